//! Norm statistics, the calotte sweep and the defense × attack matrix.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::attacks::{AdversarialExample, AttackSpec, CwConfig, PgdConfig};
use crate::defenses::{eval_detailed, train, DefenseSpec, NoiseDistribution, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::geometry::{equal_volume_radius, Norm};
use crate::model::MlpModel;
use crate::rng::{self, mix, stream};

/// `eps_inf · r₂(d)`: the ℓ2 radius whose ball has the volume of the ℓ∞
/// ball of radius `eps_inf`.
pub fn calibrate_epsilons(d: usize, eps_inf: f64) -> f64 {
    eps_inf * equal_volume_radius(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Hidden layer widths of the classifier.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Independent training seeds per cell; reported values are medians.
    pub repeats: usize,
    /// Number of test samples attacked (0 = all).
    pub eval_samples: usize,
    pub pgd_steps: usize,
    /// Noise draws per EOT gradient.
    pub eot_draws: usize,
    pub cw: CwConfig,
    /// Number of test samples given to C&W.
    pub cw_samples: usize,
    /// Average norm statistics over successful attacks only.
    pub successes_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hidden: vec![64],
            train: TrainConfig::default(),
            seed: 0,
            repeats: 3,
            eval_samples: 0,
            pgd_steps: 20,
            eot_draws: 16,
            cw: CwConfig::default(),
            cw_samples: 200,
            successes_only: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.cw.validate()?;
        if self.repeats == 0 || self.pgd_steps == 0 || self.eot_draws == 0 || self.cw_samples == 0 {
            return Err(Error::InvalidArgument(
                "repeats, pgd_steps, eot_draws and cw_samples must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Seed of repeat `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        mix(self.seed, r as u64)
    }

    fn layer_sizes(&self, d: usize, classes: usize) -> Vec<usize> {
        let mut s = vec![d];
        s.extend(&self.hidden);
        s.push(classes);
        s
    }

    fn pgd(&self, norm: Norm, epsilon: f64) -> PgdConfig {
        PgdConfig::with_steps(norm, epsilon, self.pgd_steps)
    }
}

/// Trained models keyed by defense and seed, so that experiments sharing a
/// configuration train each model once.
pub struct ModelZoo<'a> {
    data: &'a Dataset,
    cfg: ExperimentConfig,
    cache: Mutex<HashMap<String, Arc<TrainOutcome>>>,
}

impl<'a> ModelZoo<'a> {
    pub fn new(data: &'a Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelZoo {
            data,
            cfg: cfg.clone(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// The model trained under `spec` from seed `seed`; initial weights come
    /// from substream `INIT` of the seed, so all defenses share them.
    pub fn get(&self, spec: &DefenseSpec, seed: u64) -> Result<Arc<TrainOutcome>> {
        let key = format!("{}|{seed}", serde_json::to_string(spec)?);
        if let Some(m) = self.cache.lock().expect("zoo lock").get(&key) {
            return Ok(Arc::clone(m));
        }
        let sizes = self.cfg.layer_sizes(self.data.dim(), self.data.classes());
        let init = MlpModel::init(&sizes, &mut rng::substream(seed, stream::INIT))?;
        let cfg = TrainConfig { seed, ..self.cfg.train };
        let out = Arc::new(train(init, &self.data.batch(), spec, &cfg)?);
        self.cache
            .lock()
            .expect("zoo lock")
            .insert(key, Arc::clone(&out));
        Ok(out)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn eval_subset(test: &Dataset, n: usize) -> Dataset {
    if n == 0 {
        test.clone()
    } else {
        test.head(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
}

/// Norms of one attack output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub seed: u64,
    pub sample_id: usize,
    pub success: bool,
    pub l2: f64,
    pub linf: f64,
}

impl PerturbationRecord {
    fn from_adv(seed: u64, sample_id: usize, a: &AdversarialExample) -> Self {
        PerturbationRecord {
            seed,
            sample_id,
            success: a.success,
            l2: a.l2_norm,
            linf: a.linf_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStatsCell {
    pub model: String,
    /// Norm of the PGD attack.
    pub attack: Norm,
    pub epsilon: f64,
    /// Medians over seeds of the per-seed mean norms.
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub per_seed_l2: Vec<SeedValue>,
    pub per_seed_linf: Vec<SeedValue>,
    pub samples: Vec<PerturbationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStatsReport {
    pub eps_inf: f64,
    pub eps_2: f64,
    pub successes_only: bool,
    pub cells: Vec<NormStatsCell>,
}

impl NormStatsReport {
    pub fn cell(&self, model: &str, attack: Norm) -> Option<&NormStatsCell> {
        self.cells.iter().find(|c| c.model == model && c.attack == attack)
    }
}

/// Mean ℓ2 and ℓ∞ norms of PGD-ℓ2 and PGD-ℓ∞ perturbations against an
/// unprotected, an AT-ℓ∞ and an AT-ℓ2 model.
pub fn experiment_norm_stats(zoo: &ModelZoo, test: &Dataset, eps_inf: f64, eps_2: f64) -> Result<NormStatsReport> {
    let cfg = zoo.config();
    let models = [
        DefenseSpec::Natural,
        DefenseSpec::At {
            norm: Norm::Linf,
            epsilon: eps_inf,
        },
        DefenseSpec::At {
            norm: Norm::L2,
            epsilon: eps_2,
        },
    ];
    let attacks = [(Norm::L2, eps_2), (Norm::Linf, eps_inf)];
    let eval = eval_subset(test, cfg.eval_samples);
    let batch = eval.batch();
    let jobs: Vec<(usize, usize, usize)> = (0..models.len())
        .flat_map(|m| (0..attacks.len()).flat_map(move |a| (0..cfg.repeats).map(move |r| (m, a, r))))
        .collect();
    let results: Vec<Vec<PerturbationRecord>> = jobs
        .par_iter()
        .map(|&(m, a, r)| {
            let seed = cfg.repeat_seed(r);
            let model = zoo.get(&models[m], seed)?;
            let (norm, eps) = attacks[a];
            let spec = AttackSpec::Pgd(cfg.pgd(norm, eps));
            let out = eval_detailed(&model.model, &batch, Some(&spec), &NoiseDistribution::None, mix(seed, a as u64))?;
            Ok(out
                .adversarial
                .iter()
                .enumerate()
                .map(|(i, adv)| PerturbationRecord::from_adv(seed, i, adv))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (m, spec) in models.iter().enumerate() {
        for (a, &(norm, eps)) in attacks.iter().enumerate() {
            let mut samples = Vec::new();
            let mut per_seed_l2 = Vec::new();
            let mut per_seed_linf = Vec::new();
            for r in 0..cfg.repeats {
                let idx = jobs.iter().position(|j| *j == (m, a, r)).expect("job exists");
                let recs = &results[idx];
                let used: Vec<&PerturbationRecord> =
                    recs.iter().filter(|p| !cfg.successes_only || p.success).collect();
                let k = used.len().max(1) as f64;
                let seed = cfg.repeat_seed(r);
                per_seed_l2.push(SeedValue {
                    seed,
                    value: used.iter().map(|p| p.l2).sum::<f64>() / k,
                });
                per_seed_linf.push(SeedValue {
                    seed,
                    value: used.iter().map(|p| p.linf).sum::<f64>() / k,
                });
                samples.extend(recs.iter().cloned());
            }
            let med = |v: &[SeedValue]| median(&v.iter().map(|s| s.value).collect::<Vec<_>>());
            cells.push(NormStatsCell {
                model: spec.tag(),
                attack: norm,
                epsilon: eps,
                mean_l2: med(&per_seed_l2),
                mean_linf: med(&per_seed_linf),
                per_seed_l2,
                per_seed_linf,
                samples,
            });
        }
    }
    Ok(NormStatsReport {
        eps_inf,
        eps_2,
        successes_only: cfg.successes_only,
        cells,
    })
}

/// Partition of perturbations at one ℓ2 radius `ε′`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalotteRow {
    pub l2_radius: f64,
    /// `‖τ‖∞ ≤ ε`.
    pub count_inside_linf: usize,
    /// `‖τ‖∞ > ε` and `‖τ‖₂ ≤ ε′`.
    pub count_cap_l2: usize,
    pub count_outside: usize,
    pub n_total: usize,
}

/// Counts per grid radius for the given perturbation norms.
pub fn calotte_rows(records: &[&PerturbationRecord], eps_inf: f64, grid: &[f64]) -> Vec<CalotteRow> {
    let inside = records.iter().filter(|p| p.linf <= eps_inf).count();
    grid.iter()
        .map(|&r| {
            let cap = records
                .iter()
                .filter(|p| p.linf > eps_inf && p.l2 <= r)
                .count();
            CalotteRow {
                l2_radius: r,
                count_inside_linf: inside,
                count_cap_l2: cap,
                count_outside: records.len() - inside - cap,
                n_total: records.len(),
            }
        })
        .collect()
}

/// `sweep_points` uniform radii from `ε` to `ε√d`.
pub fn calotte_grid(eps_inf: f64, d: usize, sweep_points: usize) -> Vec<f64> {
    let hi = eps_inf * (d as f64).sqrt();
    (0..sweep_points)
        .map(|i| {
            if i + 1 == sweep_points {
                hi
            } else {
                eps_inf + (hi - eps_inf) * i as f64 / (sweep_points - 1) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalottePanel {
    pub model: String,
    /// Every C&W output.
    pub rows_all: Vec<CalotteRow>,
    /// Successful C&W outputs only.
    pub rows_success: Vec<CalotteRow>,
    pub samples: Vec<PerturbationRecord>,
}

impl CalottePanel {
    fn build(model: String, samples: Vec<PerturbationRecord>, eps_inf: f64, grid: &[f64]) -> Self {
        let all: Vec<&PerturbationRecord> = samples.iter().collect();
        let ok: Vec<&PerturbationRecord> = samples.iter().filter(|p| p.success).collect();
        CalottePanel {
            model,
            rows_all: calotte_rows(&all, eps_inf, grid),
            rows_success: calotte_rows(&ok, eps_inf, grid),
            samples,
        }
    }

    /// Per-seed fraction of (successful, if `successes_only`) perturbations
    /// satisfying `keep`.
    pub fn fraction_by_seed(
        &self,
        successes_only: bool,
        keep: impl Fn(&PerturbationRecord) -> bool,
    ) -> Vec<SeedValue> {
        let mut seeds: Vec<u64> = self.samples.iter().map(|p| p.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .map(|seed| {
                let pop: Vec<&PerturbationRecord> = self
                    .samples
                    .iter()
                    .filter(|p| p.seed == seed && (!successes_only || p.success))
                    .collect();
                let hit = pop.iter().filter(|p| keep(p)).count();
                SeedValue {
                    seed,
                    value: hit as f64 / pop.len().max(1) as f64,
                }
            })
            .collect()
    }
}

pub fn median_of(v: &[SeedValue]) -> f64 {
    median(&v.iter().map(|s| s.value).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalotteReport {
    pub eps_inf: f64,
    pub eps_2: f64,
    pub grid: Vec<f64>,
    /// Population written to the `.dat` panels.
    pub successes_only: bool,
    pub before: CalottePanel,
    pub after: CalottePanel,
}

/// C&W-ℓ2 perturbations of the first `cw_samples` test points against the
/// unprotected and the AT-ℓ∞ model, classified by the ℓ∞ ball of radius
/// `eps_inf` and ℓ2 balls on a uniform grid over `[ε, ε√d]`.
pub fn experiment_calotte(
    zoo: &ModelZoo,
    test: &Dataset,
    eps_inf: f64,
    eps_2: f64,
    sweep_points: usize,
) -> Result<CalotteReport> {
    if sweep_points < 8 {
        return Err(Error::InvalidArgument(format!("the sweep needs at least 8 points, got {sweep_points}")));
    }
    let cfg = zoo.config();
    let grid = calotte_grid(eps_inf, test.dim(), sweep_points);
    let eval = test.head(cfg.cw_samples);
    let batch = eval.batch();
    let models = [
        DefenseSpec::Natural,
        DefenseSpec::At {
            norm: Norm::Linf,
            epsilon: eps_inf,
        },
    ];
    let spec = AttackSpec::Cw(cfg.cw);
    let jobs: Vec<(usize, usize)> = (0..2).flat_map(|m| (0..cfg.repeats).map(move |r| (m, r))).collect();
    let results: Vec<Vec<PerturbationRecord>> = jobs
        .par_iter()
        .map(|&(m, r)| {
            let seed = cfg.repeat_seed(r);
            let model = zoo.get(&models[m], seed)?;
            let out = eval_detailed(&model.model, &batch, Some(&spec), &NoiseDistribution::None, seed)?;
            Ok(out
                .adversarial
                .iter()
                .enumerate()
                .map(|(i, a)| PerturbationRecord::from_adv(seed, i, a))
                .collect())
        })
        .collect::<Result<_>>()?;
    let panel = |m: usize| {
        let samples: Vec<PerturbationRecord> = jobs
            .iter()
            .zip(&results)
            .filter(|(j, _)| j.0 == m)
            .flat_map(|(_, v)| v.iter().cloned())
            .collect();
        CalottePanel::build(models[m].tag(), samples, eps_inf, &grid)
    };
    let report = CalotteReport {
        eps_inf,
        eps_2,
        before: panel(0),
        after: panel(1),
        successes_only: cfg.successes_only,
        grid,
    };
    for p in [&report.before, &report.after] {
        for rows in [&p.rows_all, &p.rows_success] {
            if rows.windows(2).any(|w| w[1].count_outside > w[0].count_outside) {
                return Err(Error::Invariant("calotte outside counts increase along the sweep".into()));
            }
        }
    }
    Ok(report)
}

/// Defense columns at a calibrated `(eps_inf, eps_2)` pair.
/// Noise for NI and RAT is scaled so that `√(E‖η‖₂²) = eps_2`.
pub fn default_defenses(eps_inf: f64, eps_2: f64, d: usize) -> Vec<DefenseSpec> {
    let g = NoiseDistribution::gaussian_for(eps_2, d);
    let u = NoiseDistribution::uniform_for(eps_2, d);
    let mut specs = vec![
        DefenseSpec::Natural,
        DefenseSpec::At {
            norm: Norm::Linf,
            epsilon: eps_inf,
        },
        DefenseSpec::At {
            norm: Norm::L2,
            epsilon: eps_2,
        },
        DefenseSpec::MatMax { eps_inf, eps_2 },
        DefenseSpec::MatRand { eps_inf, eps_2 },
        DefenseSpec::Ni { noise: g },
        DefenseSpec::Ni { noise: u },
    ];
    for (norm, eps) in [(Norm::Linf, eps_inf), (Norm::L2, eps_2)] {
        for noise in [g, u] {
            specs.push(DefenseSpec::Rat {
                norm,
                epsilon: eps,
                noise,
            });
        }
    }
    specs
}

pub const ROW_NATURAL: &str = "natural";
pub const ROW_PGD_LINF: &str = "pgd-linf";
pub const ROW_PGD_L2: &str = "pgd-l2";
/// PGD against a randomized model using one noise draw per gradient.
pub const ROW_PGD_LINF_SINGLE: &str = "pgd-linf-single";
pub const ROW_PGD_L2_SINGLE: &str = "pgd-l2-single";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub row: String,
    pub column: String,
    /// Median over seeds.
    pub accuracy: f64,
    pub per_seed: Vec<SeedValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub eps_inf: f64,
    pub eps_2: f64,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<MatrixCell>,
}

impl RobustnessMatrix {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.row == row && c.column == column)
            .map(|c| c.accuracy)
    }

    /// Lowest attacked accuracy of a column over the full-strength attacks.
    pub fn worst_case(&self, column: &str) -> Option<f64> {
        let a = self.get(ROW_PGD_LINF, column)?;
        let b = self.get(ROW_PGD_L2, column)?;
        Some(a.min(b))
    }
}

/// Clean and attacked accuracy of each defense, as medians over
/// `cfg.repeats` training seeds. Randomized defenses are attacked with
/// EOT-PGD and, for comparison, with single-draw PGD.
pub fn experiment_matrix(
    zoo: &ModelZoo,
    test: &Dataset,
    eps_inf: f64,
    eps_2: f64,
    specs: &[DefenseSpec],
) -> Result<RobustnessMatrix> {
    let cfg = zoo.config();
    let eval = eval_subset(test, cfg.eval_samples);
    let batch = eval.batch();
    let mut jobs: Vec<(usize, &'static str, usize)> = Vec::new();
    for (c, spec) in specs.iter().enumerate() {
        let mut rows = vec![ROW_NATURAL, ROW_PGD_LINF, ROW_PGD_L2];
        if !spec.inference_noise().is_none() {
            rows.extend([ROW_PGD_LINF_SINGLE, ROW_PGD_L2_SINGLE]);
        }
        for row in rows {
            for r in 0..cfg.repeats {
                jobs.push((c, row, r));
            }
        }
    }
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, row, r)| {
            let seed = cfg.repeat_seed(r);
            let spec = &specs[c];
            let noise = spec.inference_noise();
            let model = zoo.get(spec, seed)?;
            let (norm, eps) = match row {
                ROW_PGD_LINF | ROW_PGD_LINF_SINGLE => (Norm::Linf, eps_inf),
                _ => (Norm::L2, eps_2),
            };
            let pgd = cfg.pgd(norm, eps);
            let attack = match row {
                ROW_NATURAL => None,
                _ if noise.is_none() => Some(AttackSpec::Pgd(pgd)),
                ROW_PGD_LINF_SINGLE | ROW_PGD_L2_SINGLE => Some(AttackSpec::PgdEot {
                    pgd,
                    noise,
                    n_draws: 1,
                }),
                _ => Some(AttackSpec::PgdEot {
                    pgd,
                    noise,
                    n_draws: cfg.eot_draws,
                }),
            };
            // the rows of a column share their seed, so the EOT and
            // single-draw rows differ only in the gradient estimate
            let eval_seed = mix(seed, stream::EVAL);
            Ok(eval_detailed(&model.model, &batch, attack.as_ref(), &noise, eval_seed)?.accuracy)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<String> = Vec::new();
    let mut cells = Vec::new();
    for (c, spec) in specs.iter().enumerate() {
        let tag = spec.tag();
        let mut seen: Vec<&str> = Vec::new();
        for &(jc, row, _) in &jobs {
            if jc == c && !seen.contains(&row) {
                seen.push(row);
            }
        }
        for row in seen {
            if !rows.iter().any(|r| r == row) {
                rows.push(row.to_string());
            }
            let per_seed: Vec<SeedValue> = jobs
                .iter()
                .zip(&accs)
                .filter(|(j, _)| j.0 == c && j.1 == row)
                .map(|(j, a)| SeedValue {
                    seed: cfg.repeat_seed(j.2),
                    value: *a,
                })
                .collect();
            cells.push(MatrixCell {
                row: row.to_string(),
                column: tag.clone(),
                accuracy: median_of(&per_seed),
                per_seed,
            });
        }
    }
    let matrix = RobustnessMatrix {
        eps_inf,
        eps_2,
        rows,
        columns: specs.iter().map(|s| s.tag()).collect(),
        cells,
    };
    for col in &matrix.columns {
        let clean = matrix.get(ROW_NATURAL, col).unwrap_or(1.0);
        for cell in matrix.cells.iter().filter(|c| &c.column == col && c.row != ROW_NATURAL) {
            if cell.accuracy > clean + 0.02 {
                return Err(Error::Invariant(format!(
                    "{} accuracy of {col} ({}) exceeds its clean accuracy ({clean})",
                    cell.row, cell.accuracy
                )));
            }
        }
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        let e = calibrate_epsilons(3072, 0.031);
        assert!((0.82..=0.84).contains(&e));
        assert!((calibrate_epsilons(3072, 0.03) - 0.80).abs() < 0.01);
        assert_eq!(calibrate_epsilons(1, 0.3), 0.3);
    }

    #[test]
    fn grid_endpoints() {
        let g = calotte_grid(0.3, 784, 16);
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], 0.3);
        assert_eq!(g[15], 0.3 * 28.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rows_partition_and_monotone() {
        let recs: Vec<PerturbationRecord> = [(0.5, 0.2), (0.9, 0.4), (2.0, 0.35), (0.1, 0.05)]
            .iter()
            .enumerate()
            .map(|(i, &(l2, linf))| PerturbationRecord {
                seed: 0,
                sample_id: i,
                success: true,
                l2,
                linf,
            })
            .collect();
        let refs: Vec<&PerturbationRecord> = recs.iter().collect();
        let rows = calotte_rows(&refs, 0.3, &calotte_grid(0.3, 100, 8));
        for r in &rows {
            assert_eq!(r.count_inside_linf + r.count_cap_l2 + r.count_outside, 4);
        }
        assert_eq!(rows[0].count_inside_linf, 2);
        assert_eq!(rows[0].count_outside, 2);
        assert_eq!(rows[7].count_outside, 0);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
