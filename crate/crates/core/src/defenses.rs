//! Training procedures and (randomized) evaluation.
//!
//! Every defense trains with minibatch SGD and momentum on the mean
//! cross-entropy of a per-batch set of training points. The defenses differ
//! only in how those points are built from the clean batch.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, check_feasible, pgd_attack, AttackSpec, PgdConfig};
use crate::error::{Error, Result};
use crate::geometry::Norm;
use crate::model::{argmax, evaluate, grad_params, LabeledBatch, MlpModel, ParamGrads};
use crate::rng::{self, mix, stream, Rng};
use crate::tensor::Tensor;

/// Logit-averaging draws used when predicting with a randomized model.
pub const EVAL_DRAWS: usize = 64;

/// Additive input noise `η`, independent per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseDistribution {
    None,
    Gaussian { sigma: f64 },
    Uniform { half_width: f64 },
}

impl NoiseDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseDistribution::None => Ok(()),
            NoiseDistribution::Gaussian { sigma: s } | NoiseDistribution::Uniform { half_width: s } => {
                if s > 0.0 && s.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("noise scale must be positive, got {s}")))
                }
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NoiseDistribution::None)
    }

    pub fn sample(&self, d: usize, rng: &mut Rng) -> Vec<f64> {
        match *self {
            NoiseDistribution::None => vec![0.0; d],
            NoiseDistribution::Gaussian { sigma } => {
                let n = Normal::new(0.0, sigma).expect("validated sigma");
                (0..d).map(|_| n.sample(rng)).collect()
            }
            NoiseDistribution::Uniform { half_width } => (0..d)
                .map(|_| half_width * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
        }
    }

    /// `√(E‖η‖₂²)` in `d` dimensions.
    pub fn rms_norm(&self, d: usize) -> f64 {
        let d = d as f64;
        match *self {
            NoiseDistribution::None => 0.0,
            NoiseDistribution::Gaussian { sigma } => sigma * d.sqrt(),
            NoiseDistribution::Uniform { half_width } => half_width * (d / 3.0).sqrt(),
        }
    }

    /// Gaussian noise scaled so that `√(E‖η‖₂²) = eps_2`.
    pub fn gaussian_for(eps_2: f64, d: usize) -> Self {
        NoiseDistribution::Gaussian {
            sigma: eps_2 / (d as f64).sqrt(),
        }
    }

    /// Uniform noise scaled so that `√(E‖η‖₂²) = eps_2`.
    pub fn uniform_for(eps_2: f64, d: usize) -> Self {
        NoiseDistribution::Uniform {
            half_width: eps_2 / (d as f64 / 3.0).sqrt(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            NoiseDistribution::None => "none",
            NoiseDistribution::Gaussian { .. } => "gauss",
            NoiseDistribution::Uniform { .. } => "unif",
        }
    }
}

/// Class of `model` on `x`, or of the mean logits over `n_draws` noisy
/// copies `x + η` when noise is present.
pub fn predict_randomized(
    model: &MlpModel,
    noise: &NoiseDistribution,
    x: &[f64],
    n_draws: usize,
    rng: &mut Rng,
) -> Result<usize> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("randomized prediction needs at least one draw".into()));
    }
    if noise.is_none() {
        return Ok(model.predict(x));
    }
    let mut mean = vec![0.0; model.num_classes()];
    for _ in 0..n_draws {
        let eta = noise.sample(x.len(), rng);
        let xn: Vec<f64> = x.iter().zip(&eta).map(|(a, b)| a + b).collect();
        mean.iter_mut().zip(model.logits(&xn)).for_each(|(m, z)| *m += z);
    }
    Ok(argmax(&mean))
}

pub fn predict(model: &MlpModel, x: &[f64]) -> usize {
    model.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseSpec {
    Natural,
    At { norm: Norm, epsilon: f64 },
    Ni { noise: NoiseDistribution },
    MatRand { eps_inf: f64, eps_2: f64 },
    MatMax { eps_inf: f64, eps_2: f64 },
    Rat { norm: Norm, epsilon: f64, noise: NoiseDistribution },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |e: f64| {
            if e >= 0.0 && e.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("defense epsilon must be nonnegative, got {e}")))
            }
        };
        match *self {
            DefenseSpec::Natural => Ok(()),
            DefenseSpec::At { epsilon, .. } => nonneg(epsilon),
            DefenseSpec::Ni { noise } => {
                if noise.is_none() {
                    return Err(Error::InvalidArgument("noise injection needs a noise distribution".into()));
                }
                noise.validate()
            }
            DefenseSpec::MatRand { eps_inf, eps_2 } | DefenseSpec::MatMax { eps_inf, eps_2 } => {
                nonneg(eps_inf)?;
                nonneg(eps_2)
            }
            DefenseSpec::Rat { epsilon, noise, .. } => {
                if noise.is_none() {
                    return Err(Error::InvalidArgument("RAT needs a noise distribution".into()));
                }
                nonneg(epsilon)?;
                noise.validate()
            }
        }
    }

    /// Noise the deployed classifier injects at prediction time.
    pub fn inference_noise(&self) -> NoiseDistribution {
        match *self {
            DefenseSpec::Ni { noise } | DefenseSpec::Rat { noise, .. } => noise,
            _ => NoiseDistribution::None,
        }
    }

    /// Short name such as `at-linf`, `mat-rand` or `rat-l2-gauss`.
    pub fn tag(&self) -> String {
        match self {
            DefenseSpec::Natural => "natural".into(),
            DefenseSpec::At { norm, .. } => format!("at-{norm}"),
            DefenseSpec::Ni { noise } => format!("ni-{}", noise.tag()),
            DefenseSpec::MatRand { .. } => "mat-rand".into(),
            DefenseSpec::MatMax { .. } => "mat-max".into(),
            DefenseSpec::Rat { norm, noise, .. } => format!("rat-{norm}-{}", noise.tag()),
        }
    }

    /// Inverse of [`tag`](Self::tag) at a given budget pair: adversarial
    /// defenses take `eps_inf` or `eps_2` by norm, and noise is calibrated to
    /// `eps_2` in dimension `d`.
    pub fn from_tag(tag: &str, eps_inf: f64, eps_2: f64, d: usize) -> Result<Self> {
        let eps = |n: Norm| if n == Norm::Linf { eps_inf } else { eps_2 };
        let noise = |t: &str| match t {
            "gauss" => Ok(NoiseDistribution::gaussian_for(eps_2, d)),
            "unif" => Ok(NoiseDistribution::uniform_for(eps_2, d)),
            other => Err(Error::InvalidArgument(format!("unknown noise {other:?}"))),
        };
        let parts: Vec<&str> = tag.split('-').collect();
        let spec = match parts.as_slice() {
            ["natural"] => DefenseSpec::Natural,
            ["at", n] => {
                let norm: Norm = n.parse()?;
                DefenseSpec::At { norm, epsilon: eps(norm) }
            }
            ["mat", "rand"] => DefenseSpec::MatRand { eps_inf, eps_2 },
            ["mat", "max"] => DefenseSpec::MatMax { eps_inf, eps_2 },
            ["ni", t] => DefenseSpec::Ni { noise: noise(t)? },
            ["rat", n, t] => {
                let norm: Norm = n.parse()?;
                DefenseSpec::Rat {
                    norm,
                    epsilon: eps(norm),
                    noise: noise(t)?,
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown defense {tag:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same defense with every adversarial budget multiplied by `k`.
    /// Noise levels are left alone.
    pub fn scaled(&self, k: f64) -> DefenseSpec {
        match *self {
            DefenseSpec::At { norm, epsilon } => DefenseSpec::At { norm, epsilon: k * epsilon },
            DefenseSpec::MatRand { eps_inf, eps_2 } => DefenseSpec::MatRand {
                eps_inf: k * eps_inf,
                eps_2: k * eps_2,
            },
            DefenseSpec::MatMax { eps_inf, eps_2 } => DefenseSpec::MatMax {
                eps_inf: k * eps_inf,
                eps_2: k * eps_2,
            },
            DefenseSpec::Rat { norm, epsilon, noise } => DefenseSpec::Rat {
                norm,
                epsilon: k * epsilon,
                noise,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// PGD steps used to build adversarial training points.
    pub inner_steps: usize,
    /// Inject the NI noise during training as well as at prediction time.
    pub ni_train_noise: bool,
    /// Adversarial budgets grow linearly from zero to their full value over
    /// this many epochs (fractional progress is counted per batch). Zero
    /// trains at the full budget from the start.
    pub eps_warmup_epochs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 50,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            inner_steps: 10,
            ni_train_noise: true,
            eps_warmup_epochs: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidArgument("epochs, batch size and inner steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.eps_warmup_epochs >= 0.0 && self.eps_warmup_epochs.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon warm-up must be finite and nonnegative, got {}",
                self.eps_warmup_epochs
            )));
        }
        Ok(())
    }

    /// Fraction of the adversarial budget in use at `progress` epochs.
    pub fn warmup_factor(&self, progress: f64) -> f64 {
        if self.eps_warmup_epochs == 0.0 {
            1.0
        } else {
            (progress / self.eps_warmup_epochs).min(1.0)
        }
    }

    fn inner_pgd(&self, norm: Norm, epsilon: f64) -> PgdConfig {
        PgdConfig {
            random_init: true,
            ..PgdConfig::with_steps(norm, epsilon, self.inner_steps)
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    pub clean_acc: f64,
    pub defense: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub log: Vec<EpochRecord>,
    /// Norm drawn for each MAT-Rand batch, in order; empty otherwise.
    pub norm_choices: Vec<Norm>,
}

impl TrainOutcome {
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out).map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }
}

/// Builds the training point for one sample.
fn training_point(
    model: &MlpModel,
    spec: &DefenseSpec,
    cfg: &TrainConfig,
    batch_norm: Norm,
    x: &[f64],
    y: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let adversarial = |norm: Norm, eps: f64, rng: &mut Rng| -> Result<(Vec<f64>, f64)> {
        let pgd = cfg.inner_pgd(norm, eps);
        let adv = pgd_attack(model, x, y, &pgd, rng)?;
        adv.check_feasible(x, &pgd)?;
        Ok((adv.x_adv, adv.loss_value))
    };
    match *spec {
        DefenseSpec::Natural => Ok(x.to_vec()),
        DefenseSpec::At { epsilon, .. } if epsilon == 0.0 => Ok(x.to_vec()),
        DefenseSpec::At { norm, epsilon } => Ok(adversarial(norm, epsilon, rng)?.0),
        DefenseSpec::Ni { noise } => {
            if !cfg.ni_train_noise {
                return Ok(x.to_vec());
            }
            let eta = noise.sample(x.len(), rng);
            Ok(x.iter().zip(&eta).map(|(a, b)| a + b).collect())
        }
        DefenseSpec::MatRand { eps_inf, eps_2 } => {
            let eps = if batch_norm == Norm::Linf { eps_inf } else { eps_2 };
            Ok(adversarial(batch_norm, eps, rng)?.0)
        }
        DefenseSpec::MatMax { eps_inf, eps_2 } => {
            let (a_inf, l_inf) = adversarial(Norm::Linf, eps_inf, rng)?;
            let (a_2, l_2) = adversarial(Norm::L2, eps_2, rng)?;
            let (pick, loss) = if l_inf >= l_2 { (a_inf, l_inf) } else { (a_2, l_2) };
            if loss < l_inf || loss < l_2 {
                return Err(Error::Invariant("MAT-Max picked a lower-loss example".into()));
            }
            Ok(pick)
        }
        DefenseSpec::Rat { norm, epsilon, noise } => {
            let pgd = cfg.inner_pgd(norm, epsilon);
            let (p, _) = attacks::pgd_eot_point(model, &noise, x, y, &pgd, 1, rng);
            check_feasible(x, &p, &pgd)?;
            let eta = noise.sample(x.len(), rng);
            Ok(p.iter().zip(&eta).map(|(a, b)| a + b).collect())
        }
    }
}

/// Trains `model` on `data` under `spec`. Deterministic given `cfg.seed` and
/// independent of the thread count.
pub fn train(model: MlpModel, data: &LabeledBatch, spec: &DefenseSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::shape(format!("inputs of width {}", model.input_dim()), data.dim()));
    }
    let mut model = model;
    let mut velocity = ParamGrads::zeros_like(&model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut norm_choices = Vec::new();
    let mut mix_rng = rng::substream(cfg.seed, stream::MIX_NORM);
    let shuffle_seed = mix(cfg.seed, stream::SHUFFLE);
    let point_seed = mix(cfg.seed, stream::ATTACK);
    let d = data.dim();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;

    let n_batches = data.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::substream(shuffle_seed, epoch as u64));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let current = spec.scaled(cfg.warmup_factor(epoch as f64 + b as f64 / n_batches as f64));
            let batch_norm = if matches!(spec, DefenseSpec::MatRand { .. }) {
                let n = if mix_rng.random::<bool>() { Norm::Linf } else { Norm::L2 };
                norm_choices.push(n);
                n
            } else {
                Norm::Linf
            };
            let step_seed = mix(point_seed, step);
            step += 1;
            let points: Vec<Vec<f64>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let (x, y) = data.sample(idx);
                    let mut r = rng::substream(step_seed, i as u64);
                    training_point(&model, &current, cfg, batch_norm, x, y, &mut r)
                })
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let inputs = Tensor::new(vec![chunk.len(), d], points.concat())?;
            let batch = LabeledBatch::new(inputs, labels, model.num_classes())?;
            let (loss, grads) = grad_params(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            for (v, g) in velocity.layers.iter_mut().zip(&grads.layers) {
                for (a, b) in v.weights.data_mut().iter_mut().zip(g.weights.data()) {
                    *a = cfg.momentum * *a + b;
                }
                for (a, b) in v.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *a = cfg.momentum * *a + b;
                }
            }
            model.add_scaled(&velocity, -cfg.learning_rate);
        }
        let (clean_loss, clean_acc) = evaluate(&model, data);
        if !clean_loss.is_finite() || !model.is_finite() {
            return Err(Error::Diverged { epoch, loss: clean_loss });
        }
        log.push(EpochRecord {
            epoch,
            clean_loss,
            clean_acc,
            defense: spec.tag(),
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        norm_choices,
    })
}

/// Fraction of samples whose (randomized) prediction equals the label, on the
/// clean input or on the output of `attack`.
///
/// Attack randomness for sample `i` comes from `mix(mix(seed, ATTACK), i)` and
/// prediction noise from `mix(mix(seed, EVAL), i)`, so a no-op attack gives
/// exactly the clean accuracy.
pub fn eval_accuracy(
    model: &MlpModel,
    data: &LabeledBatch,
    attack: Option<&AttackSpec>,
    noise: &NoiseDistribution,
    seed: u64,
) -> Result<f64> {
    Ok(eval_detailed(model, data, attack, noise, seed)?.accuracy)
}

/// Accuracy plus the per-sample attack outputs.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub correct: Vec<bool>,
    pub adversarial: Vec<attacks::AdversarialExample>,
}

pub fn eval_detailed(
    model: &MlpModel,
    data: &LabeledBatch,
    attack: Option<&AttackSpec>,
    noise: &NoiseDistribution,
    seed: u64,
) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::shape(format!("inputs of width {}", model.input_dim()), data.dim()));
    }
    noise.validate()?;
    let attack_seed = mix(seed, stream::ATTACK);
    let eval_seed = mix(seed, stream::EVAL);
    let per_sample: Vec<(bool, Option<attacks::AdversarialExample>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = data.sample(i);
            let adv = attack
                .map(|a| a.run(model, x, y, &mut rng::substream(attack_seed, i as u64)))
                .transpose()?;
            let point = adv.as_ref().map_or(x, |a| a.x_adv.as_slice());
            let pred = predict_randomized(model, noise, point, EVAL_DRAWS, &mut rng::substream(eval_seed, i as u64))?;
            Ok((pred == y, adv))
        })
        .collect::<Result<_>>()?;
    let correct: Vec<bool> = per_sample.iter().map(|(c, _)| *c).collect();
    let accuracy = correct.iter().filter(|c| **c).count() as f64 / data.len() as f64;
    Ok(EvalOutcome {
        accuracy,
        correct,
        adversarial: per_sample.into_iter().filter_map(|(_, a)| a).collect(),
    })
}
