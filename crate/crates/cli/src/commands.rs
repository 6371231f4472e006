//! Bodies of the subcommands. Each takes a resolved [`RunConfig`], writes its
//! artifacts under `cfg.out` and finishes with `manifest.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use normclash_core::attacks::{attack_batch, AttackSpec, PgdConfig};
use normclash_core::checkpoint::Checkpoint;
use normclash_core::defenses::{eval_detailed, train, DefenseSpec, NoiseDistribution};
use normclash_core::geometry::{
    dimension_table, equal_volume_radius, mc_intersection_ratio, write_dimension_table_csv, Norm, TableBudget,
};
use normclash_core::harness::{
    config_digest, default_defenses, experiment_calotte, experiment_matrix, experiment_norm_stats, median_of,
    write_report, ModelZoo, Report, ReportFormat,
};
use normclash_core::model::{evaluate, MlpModel};
use normclash_core::rng::{self, mix, stream};
use normclash_core::{Error, Result};
use serde::Serialize;

use crate::config::{load_checkpoint, load_inputs, Manifest, RunConfig};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_digest: &'a str,
    #[serde(flatten)]
    body: T,
}

/// Shared state of one run: the resolved config, input digests and the list
/// of files written so far.
struct Run {
    command: String,
    cfg: RunConfig,
    inputs: BTreeMap<String, String>,
    written: Vec<PathBuf>,
}

impl Run {
    /// Digest of the command and resolved config. The output directory is
    /// left out: it does not affect any result.
    fn digest(&self) -> Result<String> {
        let cfg = RunConfig {
            out: PathBuf::new(),
            ..self.cfg.clone()
        };
        config_digest(&(&self.command, &cfg))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn report(&mut self, report: &Report, format: ReportFormat, name: &str) -> Result<()> {
        let digest = self.digest()?;
        let files = write_report(report, format, &self.path(name), &digest)?;
        self.written.extend(files);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, body: T) -> Result<()> {
        let digest = self.digest()?;
        let p = self.path(name);
        write_json(
            &p,
            &Tagged {
                config_digest: &digest,
                body,
            },
        )?;
        self.written.push(p);
        Ok(())
    }

    fn finish(self) -> Result<Vec<PathBuf>> {
        let manifest = Manifest {
            tool: "normclash".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            config_digest: self.digest()?,
            inputs: self.inputs,
            config: self.cfg,
        };
        let p = manifest.config.out.join("manifest.json");
        write_json(&p, &manifest)?;
        let mut written = self.written;
        written.push(p);
        Ok(written)
    }
}

/// Runs `command` with a config whose seed is already resolved.
pub fn run(command: &str, cfg: RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let mut run = Run {
        command: command.to_string(),
        cfg,
        inputs: BTreeMap::new(),
        written: Vec::new(),
    };
    match command {
        "geometry table" => geometry_table(&mut run)?,
        "geometry mc" => geometry_mc(&mut run)?,
        "geometry radius" => geometry_radius(&mut run)?,
        "train" => cmd_train(&mut run)?,
        "attack" => cmd_attack(&mut run)?,
        "eval" => cmd_eval(&mut run)?,
        "experiment norms" | "experiment calotte" | "experiment matrix" => cmd_experiment(&mut run)?,
        other => return Err(Error::InvalidArgument(format!("unknown command {other:?}"))),
    }
    run.finish()
}

fn geometry_table(run: &mut Run) -> Result<()> {
    let cfg = &run.cfg;
    let rows = dimension_table(
        &cfg.dims,
        TableBudget {
            mc_samples: cfg.mc_samples,
            mc_max_dim: cfg.mc_max_dim,
            seed: cfg.seed(),
        },
    )?;
    let shown: Vec<_> = rows.iter().filter(|r| r.d == 2).cloned().collect();
    let shown = if shown.is_empty() { rows[..1.min(rows.len())].to_vec() } else { shown };
    let mut out = std::io::stdout().lock();
    write_dimension_table_csv(&shown, &mut out)?;
    out.flush().map_err(io_err(Path::new("<stdout>")))?;
    run.report(&Report::Dimension(rows), ReportFormat::Csv, "dimension_table.csv")
}

fn geometry_mc(run: &mut Run) -> Result<()> {
    let d = run.cfg.d;
    let l2 = *run.cfg.l2_radius.get_or_insert_with(|| equal_volume_radius(d));
    let est = mc_intersection_ratio(d, l2, 1.0, run.cfg.mc_samples, run.cfg.seed())?;
    println!(
        "d={d} ratio={:.6} stderr={:.6} log10={:.4} n={}",
        est.value, est.stderr, est.log10_value, est.n_samples
    );
    run.json("mc.json", &est)
}

fn geometry_radius(run: &mut Run) -> Result<()> {
    let r = equal_volume_radius(run.cfg.d);
    println!("{r:.4}");
    #[derive(Serialize)]
    struct Radius {
        d: usize,
        r2: f64,
    }
    run.json("radius.json", Radius { d: run.cfg.d, r2: r })
}

fn layer_sizes(hidden: &[usize], d: usize, classes: usize) -> Vec<usize> {
    let mut s = vec![d];
    s.extend(hidden);
    s.push(classes);
    s
}

fn cmd_train(run: &mut Run) -> Result<()> {
    let inputs = load_inputs(&run.cfg)?;
    run.inputs.extend(inputs.digests.clone());
    let d = inputs.train.dim();
    let eps_2 = run.cfg.resolve_eps_2(d);
    let cfg = &run.cfg;
    let spec = DefenseSpec::from_tag(&cfg.defense, cfg.eps_inf, eps_2, d)?;
    let seed = cfg.seed();
    let sizes = layer_sizes(&cfg.experiment.hidden, d, inputs.train.classes());
    let init = MlpModel::init(&sizes, &mut rng::substream(seed, stream::INIT))?;
    let start = Instant::now();
    let outcome = train(init, &inputs.train.batch(), &spec, &cfg.experiment.train)?;
    eprintln!("trained {} in {:.1}s", spec.tag(), start.elapsed().as_secs_f64());
    let (_, test_acc) = evaluate(&outcome.model, &inputs.test.batch());
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "{}: train loss {:.4} train acc {:.4} test acc {:.4}",
        spec.tag(),
        last.clean_loss,
        last.clean_acc,
        test_acc
    );

    let ckpt = Checkpoint::from_model(&outcome.model, seed, spec.tag());
    let p = run.path("model.json");
    ckpt.save(&p)?;
    run.written.push(p);
    let p = run.path("train_log.jsonl");
    let mut buf = Vec::new();
    outcome.write_log(&mut buf)?;
    write_file(&p, &buf)?;
    run.written.push(p);
    Ok(())
}

/// Attack named by `cfg.attack` at the run's budgets; `None` for `none`.
fn parse_attack(run: &RunConfig, eps_2: f64, noise: NoiseDistribution) -> Result<Option<AttackSpec>> {
    let steps = run.experiment.pgd_steps;
    let pgd = |norm: Norm| PgdConfig::with_steps(norm, if norm == Norm::Linf { run.eps_inf } else { eps_2 }, steps);
    let spec = match run.attack.as_str() {
        "none" => return Ok(None),
        "pgd-linf" => AttackSpec::Pgd(pgd(Norm::Linf)),
        "pgd-l2" => AttackSpec::Pgd(pgd(Norm::L2)),
        "eot-linf" | "eot-l2" => AttackSpec::PgdEot {
            pgd: pgd(if run.attack == "eot-linf" { Norm::Linf } else { Norm::L2 }),
            noise,
            n_draws: run.experiment.eot_draws,
        },
        "cw" => AttackSpec::Cw(run.experiment.cw),
        other => return Err(Error::InvalidArgument(format!("unknown attack {other:?}"))),
    };
    Ok(Some(spec))
}

/// Loads the test split and the checkpoint, and rebuilds the defense the
/// checkpoint was trained under.
fn load_model(run: &mut Run) -> Result<(normclash_core::harness::Dataset, MlpModel, DefenseSpec, f64)> {
    let inputs = load_inputs(&run.cfg)?;
    run.inputs.extend(inputs.digests);
    let ckpt = load_checkpoint(&run.cfg, &mut run.inputs)?;
    let model = ckpt.to_model()?;
    let d = inputs.test.dim();
    if model.input_dim() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("inputs of width {}", model.input_dim()),
            actual: d.to_string(),
        });
    }
    let eps_2 = run.cfg.resolve_eps_2(d);
    let defense = DefenseSpec::from_tag(&ckpt.defense, run.cfg.eps_inf, eps_2, d)?;
    let n = run.cfg.experiment.eval_samples;
    let test = if n == 0 { inputs.test } else { inputs.test.head(n) };
    Ok((test, model, defense, eps_2))
}

fn cmd_attack(run: &mut Run) -> Result<()> {
    let (test, model, defense, eps_2) = load_model(run)?;
    let spec = parse_attack(&run.cfg, eps_2, defense.inference_noise())?
        .ok_or_else(|| Error::InvalidArgument("attack needs an attack other than none".into()))?;
    let results = attack_batch(
        &model,
        test.inputs().data(),
        test.labels(),
        &spec,
        mix(run.cfg.seed(), stream::ATTACK),
    )?;
    let rate = results.iter().filter(|r| r.success).count() as f64 / results.len().max(1) as f64;
    let mean = |f: fn(&normclash_core::attacks::AdversarialExample) -> f64| {
        results.iter().map(f).sum::<f64>() / results.len().max(1) as f64
    };
    println!(
        "{} vs {}: success {:.4} mean l2 {:.4} mean linf {:.4}",
        run.cfg.attack,
        defense.tag(),
        rate,
        mean(|r| r.l2_norm),
        mean(|r| r.linf_norm)
    );
    let report = Report::Attack { spec, results };
    run.report(&report, ReportFormat::Csv, "attack.csv")?;
    run.report(&report, ReportFormat::Json, "attack.json")
}

fn cmd_eval(run: &mut Run) -> Result<()> {
    let (test, model, defense, eps_2) = load_model(run)?;
    let noise = defense.inference_noise();
    let attack = parse_attack(&run.cfg, eps_2, noise)?;
    let out = eval_detailed(&model, &test.batch(), attack.as_ref(), &noise, run.cfg.seed())?;
    println!("{} under {}: accuracy {:.4}", defense.tag(), run.cfg.attack, out.accuracy);
    #[derive(Serialize)]
    struct EvalSummary {
        defense: String,
        attack: String,
        n: usize,
        correct: usize,
        accuracy: f64,
    }
    let summary = EvalSummary {
        defense: defense.tag(),
        attack: run.cfg.attack.clone(),
        n: out.correct.len(),
        correct: out.correct.iter().filter(|c| **c).count(),
        accuracy: out.accuracy,
    };
    run.json("eval.json", summary)
}

fn cmd_experiment(run: &mut Run) -> Result<()> {
    let inputs = load_inputs(&run.cfg)?;
    run.inputs.extend(inputs.digests.clone());
    let d = inputs.train.dim();
    let eps_2 = run.cfg.resolve_eps_2(d);
    let eps_inf = run.cfg.eps_inf;
    let zoo = ModelZoo::new(&inputs.train, &run.cfg.experiment)?;
    let start = Instant::now();
    match run.command.as_str() {
        "experiment norms" => {
            let r = experiment_norm_stats(&zoo, &inputs.test, eps_inf, eps_2)?;
            for c in &r.cells {
                println!(
                    "{:>8} pgd-{:<4} mean l2 {:.4} mean linf {:.4}",
                    c.model, c.attack, c.mean_l2, c.mean_linf
                );
            }
            let report = Report::NormStats(r);
            run.report(&report, ReportFormat::Csv, "norms.csv")?;
            run.report(&report, ReportFormat::Json, "norms.json")?;
        }
        "experiment calotte" => {
            let r = experiment_calotte(&zoo, &inputs.test, eps_inf, eps_2, run.cfg.sweep)?;
            let succ = r.successes_only;
            for p in [&r.before, &r.after] {
                let inside = median_of(&p.fraction_by_seed(succ, |s| s.linf <= eps_inf));
                let within = median_of(&p.fraction_by_seed(succ, |s| s.linf <= eps_inf || s.l2 <= eps_2));
                println!("{:>8}: inside linf ball {inside:.3}, within l2 ball {within:.3}", p.model);
            }
            let report = Report::Calotte(r);
            run.report(&report, ReportFormat::Dat, "calotte.dat")?;
            run.report(&report, ReportFormat::Csv, "calotte.csv")?;
            run.report(&report, ReportFormat::Json, "calotte.json")?;
        }
        _ => {
            let m = experiment_matrix(&zoo, &inputs.test, eps_inf, eps_2, &default_defenses(eps_inf, eps_2, d))?;
            for row in &m.rows {
                print!("{row:<16}");
                for c in &m.columns {
                    match m.get(row, c) {
                        Some(v) => print!(" {v:>6.3}"),
                        None => print!(" {:>6}", "-"),
                    }
                }
                println!();
            }
            let report = Report::Matrix(m);
            run.report(&report, ReportFormat::Csv, "matrix.csv")?;
            run.report(&report, ReportFormat::Json, "matrix.json")?;
        }
    }
    eprintln!("{} finished in {:.1}s", run.command, start.elapsed().as_secs_f64());
    Ok(())
}
