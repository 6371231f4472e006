//! Untargeted white-box attacks: PGD under ℓ2 or ℓ∞, C&W-ℓ2, and PGD driven
//! by noise-averaged gradients against randomized classifiers.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defenses::{predict_randomized, NoiseDistribution, EVAL_DRAWS};
use crate::error::{Error, Result};
use crate::geometry::{sample_uniform_l2, BallSpec, Norm};
use crate::model::{argmax, cross_entropy_unchecked, softmax_minus_onehot, MlpModel};
use crate::rng::{self, Rng};
use crate::tensor::{norm_l2, norm_linf};

/// Unit-norm direction maximizing `⟨grad, δ⟩` over the unit ball of `norm`.
///
/// ℓ∞ gives the coordinate-wise sign with `sign(0) = 0`; ℓ2 gives the
/// normalized gradient. A zero gradient gives a zero vector.
pub fn steepest_direction(grad: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => grad
            .iter()
            .map(|&g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 })
            .collect(),
        Norm::L2 => {
            let n = norm_l2(grad);
            if n == 0.0 || !n.is_finite() {
                return vec![0.0; grad.len()];
            }
            grad.iter().map(|g| g / n).collect()
        }
    }
}

/// Euclidean projection of `point` onto `ball`.
pub fn project_ball(point: &[f64], ball: &BallSpec) -> Vec<f64> {
    debug_assert_eq!(point.len(), ball.dim());
    project_onto(point, &ball.center, ball.norm, ball.radius)
}

fn project_onto(point: &[f64], center: &[f64], norm: Norm, radius: f64) -> Vec<f64> {
    match norm {
        Norm::Linf => point
            .iter()
            .zip(center)
            .map(|(p, c)| p.clamp(c - radius, c + radius))
            .collect(),
        Norm::L2 => {
            let tau: Vec<f64> = point.iter().zip(center).map(|(p, c)| p - c).collect();
            let n = norm_l2(&tau);
            if n <= radius {
                return point.to_vec();
            }
            let k = radius / n;
            tau.iter().zip(center).map(|(t, c)| c + t * k).collect()
        }
    }
}

fn clip_unit(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
    pub clip_domain: bool,
}

impl PgdConfig {
    /// 20 steps of size `2ε/20`, no random start, clipped to `[0, 1]^d`.
    pub fn new(norm: Norm, epsilon: f64) -> Self {
        PgdConfig::with_steps(norm, epsilon, 20)
    }

    pub fn with_steps(norm: Norm, epsilon: f64, steps: usize) -> Self {
        PgdConfig {
            norm,
            epsilon,
            steps,
            step_size: 2.0 * epsilon / steps.max(1) as f64,
            random_init: false,
            clip_domain: true,
        }
    }

    /// `ε = 0` is accepted as the degenerate no-op attack.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("PGD epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("PGD needs at least one step".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("PGD step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    pub kappa: f64,
    pub lambda_init: f64,
    pub binary_search_steps: usize,
    pub inner_iters: usize,
    pub learning_rate: f64,
    /// Stop an inner run once the objective stalls over a tenth of its budget.
    pub abort_early: bool,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            kappa: 0.0,
            lambda_init: 1e-2,
            binary_search_steps: 9,
            inner_iters: 1000,
            learning_rate: 1e-2,
            abort_early: true,
        }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lambda_init, self.learning_rate];
        if !(self.kappa >= 0.0) || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid C&W constants: {self:?}")));
        }
        if self.binary_search_steps == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidArgument("C&W needs positive iteration counts".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub x_adv: Vec<f64>,
    /// The prediction at `x_adv` differs from the true label.
    pub success: bool,
    pub l2_norm: f64,
    pub linf_norm: f64,
    /// Cross-entropy at `x_adv` (of the averaged logits for randomized models).
    pub loss_value: f64,
    pub iterations_used: usize,
}

impl AdversarialExample {
    fn new(x: &[f64], x_adv: Vec<f64>, success: bool, loss_value: f64, iterations_used: usize) -> Self {
        let tau: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
        AdversarialExample {
            l2_norm: norm_l2(&tau),
            linf_norm: norm_linf(&tau),
            x_adv,
            success,
            loss_value,
            iterations_used,
        }
    }

    pub fn perturbation(&self, x: &[f64]) -> Vec<f64> {
        self.x_adv.iter().zip(x).map(|(a, b)| a - b).collect()
    }

    /// Checks the ball and box constraints a PGD output must satisfy.
    pub fn check_feasible(&self, x: &[f64], cfg: &PgdConfig) -> Result<()> {
        check_feasible(x, &self.x_adv, cfg)
    }
}

/// Fails unless `x_adv` lies in the ε-ball around `x` (to relative `1e-9`)
/// and, when clipping is on, in `[0, 1]^d`.
pub fn check_feasible(x: &[f64], x_adv: &[f64], cfg: &PgdConfig) -> Result<()> {
    let tau: Vec<f64> = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
    let n = cfg.norm.of(&tau);
    if n > cfg.epsilon * (1.0 + 1e-9) {
        return Err(Error::Invariant(format!(
            "{} perturbation norm {n} exceeds epsilon {}",
            cfg.norm, cfg.epsilon
        )));
    }
    if cfg.clip_domain && x_adv.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invariant("adversarial example leaves [0, 1]^d".into()));
    }
    Ok(())
}

fn check_sample(model: &MlpModel, x: &[f64], y: usize) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::shape(format!("input of length {}", model.input_dim()), x.len()));
    }
    if y >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: model.num_classes(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attack input"));
    }
    Ok(())
}

/// Shared PGD loop. `oracle` returns the loss at a point and a vector whose
/// steepest direction is the ascent step.
fn pgd_loop(
    x: &[f64],
    cfg: &PgdConfig,
    rng: &mut Rng,
    mut oracle: impl FnMut(&[f64], &mut Rng) -> (f64, Vec<f64>),
) -> (Vec<f64>, f64, usize) {
    let mut cur = x.to_vec();
    let (clean_loss, mut grad) = oracle(&cur, rng);
    let mut best = (cur.clone(), clean_loss);
    if cfg.epsilon == 0.0 {
        return (best.0, best.1, 0);
    }
    if cfg.random_init {
        let delta: Vec<f64> = match cfg.norm {
            Norm::Linf => (0..x.len())
                .map(|_| cfg.epsilon * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
            Norm::L2 => sample_uniform_l2(x.len(), cfg.epsilon, rng),
        };
        cur = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        if cfg.clip_domain {
            clip_unit(&mut cur);
        }
        let (loss, g) = oracle(&cur, rng);
        grad = g;
        if loss > best.1 {
            best = (cur.clone(), loss);
        }
    }
    for _ in 0..cfg.steps {
        let dir = steepest_direction(&grad, cfg.norm);
        let stepped: Vec<f64> = cur
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + cfg.step_size * d)
            .collect();
        cur = project_onto(&stepped, x, cfg.norm, cfg.epsilon);
        if cfg.clip_domain {
            clip_unit(&mut cur);
        }
        let (loss, g) = oracle(&cur, rng);
        grad = g;
        if loss > best.1 {
            best = (cur.clone(), loss);
        }
    }
    (best.0, best.1, cfg.steps)
}

/// Projected gradient ascent on the cross-entropy within the ε-ball around
/// `x`. Returns the visited iterate with the highest loss, which includes `x`
/// itself. `rng` is only drawn from when `random_init` is set.
pub fn pgd_attack(
    model: &MlpModel,
    x: &[f64],
    y: usize,
    cfg: &PgdConfig,
    rng: &mut Rng,
) -> Result<AdversarialExample> {
    check_sample(model, x, y)?;
    cfg.validate()?;
    let (x_adv, loss, iters) = pgd_loop(x, cfg, rng, |p, _| {
        let a = model.loss_ascent(p, y);
        (a.loss, a.direction)
    });
    let success = model.predict(&x_adv) != y;
    Ok(AdversarialExample::new(x, x_adv, success, loss, iters))
}

/// Mean over `n_draws` noise draws of the cross-entropy input gradient at
/// `x + η`, together with the cross-entropy of the mean logits.
fn eot_loss_and_gradient(
    model: &MlpModel,
    noise: &NoiseDistribution,
    x: &[f64],
    y: usize,
    n_draws: usize,
    rng: &mut Rng,
) -> (f64, Vec<f64>) {
    if noise.is_none() {
        let (z, g) = model.input_vjp(x, |z| softmax_minus_onehot(z, y));
        return (cross_entropy_unchecked(&z, y), g);
    }
    let k = model.num_classes();
    let mut grad = vec![0.0; x.len()];
    let mut mean_z = vec![0.0; k];
    for _ in 0..n_draws {
        let eta = noise.sample(x.len(), rng);
        let xn: Vec<f64> = x.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let (z, g) = model.input_vjp(&xn, |z| softmax_minus_onehot(z, y));
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        mean_z.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / n_draws as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    mean_z.iter_mut().for_each(|v| *v *= inv);
    (cross_entropy_unchecked(&mean_z, y), grad)
}

/// Expectation-over-transformation gradient: the mean cross-entropy input
/// gradient over `n_draws` noisy copies of `x`.
pub fn eot_gradient(
    model: &MlpModel,
    noise: &NoiseDistribution,
    x: &[f64],
    y: usize,
    n_draws: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_sample(model, x, y)?;
    if n_draws == 0 {
        return Err(Error::InvalidArgument("EOT needs at least one draw".into()));
    }
    Ok(eot_loss_and_gradient(model, noise, x, y, n_draws, rng).1)
}

/// The highest-loss PGD iterate against the noisy forward pass, without
/// judging success. Used for training, where only the point matters.
pub(crate) fn pgd_eot_point(
    model: &MlpModel,
    noise: &NoiseDistribution,
    x: &[f64],
    y: usize,
    cfg: &PgdConfig,
    n_draws: usize,
    rng: &mut Rng,
) -> (Vec<f64>, f64) {
    let (p, loss, _) = pgd_loop(x, cfg, rng, |p, r| {
        eot_loss_and_gradient(model, noise, p, y, n_draws, r)
    });
    (p, loss)
}

/// PGD with [`eot_gradient`] in place of the exact gradient. Success is judged
/// on the randomized classifier's prediction (mean logits over
/// [`EVAL_DRAWS`] draws). Without noise this is [`pgd_attack`].
pub fn pgd_eot_attack(
    model: &MlpModel,
    noise: &NoiseDistribution,
    x: &[f64],
    y: usize,
    cfg: &PgdConfig,
    n_draws: usize,
    rng: &mut Rng,
) -> Result<AdversarialExample> {
    if noise.is_none() {
        return pgd_attack(model, x, y, cfg, rng);
    }
    check_sample(model, x, y)?;
    cfg.validate()?;
    if n_draws == 0 {
        return Err(Error::InvalidArgument("EOT needs at least one draw".into()));
    }
    let (x_adv, loss, iters) = pgd_loop(x, cfg, rng, |p, r| {
        eot_loss_and_gradient(model, noise, p, y, n_draws, r)
    });
    let success = predict_randomized(model, noise, &x_adv, EVAL_DRAWS, rng)? != y;
    Ok(AdversarialExample::new(x, x_adv, success, loss, iters))
}

/// `Z_y − max_{i≠y} Z_i` and the index attaining the max.
fn logit_gap(z: &[f64], y: usize) -> (f64, usize) {
    let mut j = if y == 0 { 1 } else { 0 };
    for (i, v) in z.iter().enumerate() {
        if i != y && *v > z[j] {
            j = i;
        }
    }
    (z[y] - z[j], j)
}

const CW_BOUNDARY_NUDGE: f64 = 1e-6;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            w[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Carlini–Wagner ℓ2 attack.
///
/// Minimizes `‖x′ − x‖₂ + λ max(Z_y(x′) − max_{i≠y} Z_i(x′), −κ)` over
/// `x′ = (tanh(w) + 1)/2` with Adam, and binary-searches λ: ×10 while no
/// success has been seen, bisection afterwards. Returns the smallest
/// perturbation that reached the `−κ` margin, or the last attempt.
pub fn cw_attack(model: &MlpModel, x: &[f64], y: usize, cfg: &CwConfig) -> Result<AdversarialExample> {
    check_sample(model, x, y)?;
    cfg.validate()?;
    let d = x.len();
    let ce = |p: &[f64]| cross_entropy_unchecked(&model.logits(p), y);
    if model.predict(x) != y {
        return Ok(AdversarialExample::new(x, x.to_vec(), true, ce(x), 0));
    }
    let w0: Vec<f64> = x
        .iter()
        .map(|v| (2.0 * v.clamp(CW_BOUNDARY_NUDGE, 1.0 - CW_BOUNDARY_NUDGE) - 1.0).atanh())
        .collect();

    let mut lambda = cfg.lambda_init;
    let (mut lower, mut upper) = (0.0f64, f64::INFINITY);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last = x.to_vec();
    let mut iters = 0usize;
    let check_every = (cfg.inner_iters / 10).max(1);

    for _ in 0..cfg.binary_search_steps {
        let mut w = w0.clone();
        let mut adam = Adam::new(d, cfg.learning_rate);
        let mut found = false;
        let mut prev_obj = f64::INFINITY;
        for it in 0..cfg.inner_iters {
            iters += 1;
            let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
            let xp: Vec<f64> = t.iter().map(|v| 0.5 * (v + 1.0)).collect();
            let tau: Vec<f64> = xp.iter().zip(x).map(|(a, b)| a - b).collect();
            let dist = norm_l2(&tau);
            let mut gap_idx = (0.0, 0);
            let (z, g_gap) = model.input_vjp(&xp, |z| {
                gap_idx = logit_gap(z, y);
                let mut dz = vec![0.0; z.len()];
                dz[y] = 1.0;
                dz[gap_idx.1] = -1.0;
                dz
            });
            let gap = gap_idx.0;
            let obj = dist + lambda * gap.max(-cfg.kappa);
            if gap <= -cfg.kappa && argmax(&z) != y {
                found = true;
                if best.as_ref().is_none_or(|(n, _)| dist < *n) {
                    best = Some((dist, xp.clone()));
                }
            }
            if cfg.abort_early && it % check_every == 0 {
                if obj > prev_obj * 0.9999 {
                    break;
                }
                prev_obj = obj;
            }
            // d obj / d x′, then through x′ = (tanh w + 1)/2
            let grad_x: Vec<f64> = (0..d)
                .map(|i| {
                    let dn = if dist > 0.0 { tau[i] / dist } else { 0.0 };
                    let dg = if gap > -cfg.kappa { lambda * g_gap[i] } else { 0.0 };
                    dn + dg
                })
                .collect();
            let grad_w: Vec<f64> = grad_x
                .iter()
                .zip(&t)
                .map(|(g, t)| g * 0.5 * (1.0 - t * t))
                .collect();
            adam.step(&mut w, &grad_w);
            last = xp;
        }
        if found {
            upper = upper.min(lambda);
            lambda = 0.5 * (lower + upper);
        } else {
            lower = lower.max(lambda);
            lambda = if upper.is_finite() {
                0.5 * (lower + upper)
            } else {
                lambda * 10.0
            };
        }
    }
    let x_adv = best.map(|(_, p)| p).unwrap_or(last);
    let success = model.predict(&x_adv) != y;
    let loss = ce(&x_adv);
    Ok(AdversarialExample::new(x, x_adv, success, loss, iters))
}

/// An attack applied by [`attack_batch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    Pgd(PgdConfig),
    PgdEot {
        pgd: PgdConfig,
        noise: NoiseDistribution,
        n_draws: usize,
    },
    Cw(CwConfig),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Pgd(_) => "pgd",
            AttackSpec::PgdEot { .. } => "pgd-eot",
            AttackSpec::Cw(_) => "cw",
        }
    }

    pub fn norm(&self) -> Norm {
        match self {
            AttackSpec::Pgd(c) | AttackSpec::PgdEot { pgd: c, .. } => c.norm,
            AttackSpec::Cw(_) => Norm::L2,
        }
    }

    /// Ball radius, or NaN for the unbounded C&W attack.
    pub fn epsilon(&self) -> f64 {
        match self {
            AttackSpec::Pgd(c) | AttackSpec::PgdEot { pgd: c, .. } => c.epsilon,
            AttackSpec::Cw(_) => f64::NAN,
        }
    }

    pub fn run(&self, model: &MlpModel, x: &[f64], y: usize, rng: &mut Rng) -> Result<AdversarialExample> {
        let adv = match self {
            AttackSpec::Pgd(c) => pgd_attack(model, x, y, c, rng)?,
            AttackSpec::PgdEot { pgd, noise, n_draws } => {
                pgd_eot_attack(model, noise, x, y, pgd, *n_draws, rng)?
            }
            AttackSpec::Cw(c) => cw_attack(model, x, y, c)?,
        };
        if let AttackSpec::Pgd(c) | AttackSpec::PgdEot { pgd: c, .. } = self {
            adv.check_feasible(x, c)?;
        }
        Ok(adv)
    }
}

/// Attacks every row of `inputs` in parallel. Sample `i` draws its randomness
/// from substream `mix(seed, i)`.
pub fn attack_batch(
    model: &MlpModel,
    inputs: &[f64],
    labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<AdversarialExample>> {
    let d = model.input_dim();
    if inputs.len() != d * labels.len() {
        return Err(Error::shape(format!("{} x {d} inputs", labels.len()), inputs.len()));
    }
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut r = rng::substream(seed, i as u64);
            spec.run(model, &inputs[i * d..(i + 1) * d], y, &mut r)
        })
        .collect()
}

pub const ATTACK_CSV_HEADER: [&str; 9] = [
    "sample_id", "attack", "norm", "epsilon", "success", "l2", "linf", "loss", "iters",
];

/// Writes one CSV row per adversarial example.
pub fn write_attack_csv<W: Write>(spec: &AttackSpec, results: &[AdversarialExample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ATTACK_CSV_HEADER)?;
    let eps = spec.epsilon();
    for (i, r) in results.iter().enumerate() {
        w.write_record([
            i.to_string(),
            spec.name().to_string(),
            spec.norm().to_string(),
            if eps.is_nan() { String::new() } else { eps.to_string() },
            r.success.to_string(),
            r.l2_norm.to_string(),
            r.linf_norm.to_string(),
            r.loss_value.to_string(),
            r.iterations_used.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
