//! Volumes of ℓ2 and ℓ∞ balls and how little of one the other covers.
//!
//! All volume arithmetic happens in log space so that `d = 150528` works.
//! For the equal-volume pair `(B∞(1), B₂(r₂(d)))` the fraction of the cube
//! inside the ℓ2 ball is the probability that `Σ x_i² ≤ r₂²(d)` for `x`
//! uniform in `[−1, 1]^d`. That probability is estimated by Monte Carlo,
//! computed exactly for `d = 2`, and bounded three ways: the Hoeffding bound,
//! its leading-order exponent, and a Chernoff bound built from the exact
//! moment generating function of `x_i²`.

use std::f64::consts::{E, LN_10, PI};
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::special::{erf, ln_gamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn of(&self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => crate::tensor::norm_l2(v),
            Norm::Linf => crate::tensor::norm_linf(v),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::InvalidArgument(format!("unknown norm {other:?}"))),
        }
    }
}

/// Closed ball `{c + τ : ‖τ‖ ≤ radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub norm: Norm,
    pub radius: f64,
    pub center: Vec<f64>,
}

impl BallSpec {
    pub fn new(norm: Norm, radius: f64, center: Vec<f64>) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("ball radius must be positive, got {radius}")));
        }
        if center.is_empty() {
            return Err(Error::InvalidArgument("ball dimension must be at least 1".into()));
        }
        Ok(BallSpec { norm, radius, center })
    }

    pub fn centered(norm: Norm, radius: f64, dim: usize) -> Result<Self> {
        BallSpec::new(norm, radius, vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        let diff: Vec<f64> = point.iter().zip(&self.center).map(|(p, c)| p - c).collect();
        self.norm.of(&diff) <= self.radius
    }
}

/// Natural log of the ball volume.
pub fn ball_log_volume(ball: &BallSpec) -> f64 {
    log_volume(ball.norm, ball.radius, ball.dim())
}

pub fn log_volume(norm: Norm, radius: f64, d: usize) -> f64 {
    let d = d as f64;
    match norm {
        Norm::Linf => d * (2.0 * radius).ln(),
        Norm::L2 => 0.5 * d * PI.ln() - ln_gamma(0.5 * d + 1.0) + d * radius.ln(),
    }
}

/// ℓ2 radius whose ball has the volume of the unit ℓ∞ ball in `d` dimensions:
/// `(2/√π) Γ(d/2 + 1)^{1/d}`.
pub fn equal_volume_radius(d: usize) -> f64 {
    assert!(d >= 1, "dimension must be positive");
    if d == 1 {
        // both balls are [−1, 1]
        return 1.0;
    }
    let d = d as f64;
    (std::f64::consts::FRAC_2_SQRT_PI.ln() + ln_gamma(0.5 * d + 1.0) / d).exp()
}

/// `√(2/(πe)) √d`, the leading-order growth of [`equal_volume_radius`].
pub fn stirling_radius(d: usize) -> f64 {
    (2.0 / (PI * E)).sqrt() * (d as f64).sqrt()
}

/// A probability bound held in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub ln_value: f64,
    /// False when the derivation does not yield an upper bound at this `d`.
    pub applicable: bool,
}

impl Bound {
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    pub fn log10(&self) -> f64 {
        self.ln_value / LN_10
    }
}

/// `r₂²(d) − d/3`: signed gap between the squared equal-volume radius and the
/// mean of `‖x‖₂²` under the uniform law on the unit cube.
pub fn deviation_from_mean(d: usize) -> f64 {
    let r = equal_volume_radius(d);
    r * r - d as f64 / 3.0
}

/// `exp(−(r₂²(d) − d E|x₁|²)² / d)` with `E|x₁|² = 1/3`.
///
/// The one-sided inequality bounds the lower tail only, so the bound is
/// flagged inapplicable whenever `r₂²(d) ≥ d/3`.
pub fn hoeffding_bound(d: usize) -> Bound {
    let dev = deviation_from_mean(d);
    Bound {
        ln_value: -dev * dev / d as f64,
        applicable: dev < 0.0,
    }
}

/// Smallest dimension at which [`hoeffding_bound`] is a valid bound.
pub fn hoeffding_crossover() -> usize {
    (1..).find(|&d| deviation_from_mean(d) < 0.0).expect("crossover exists")
}

/// `(2/(πe) − 1/3)²`.
pub fn asymptotic_rate() -> f64 {
    let c = 2.0 / (PI * E) - 1.0 / 3.0;
    c * c
}

/// `exp(−(2/(πe) − 1/3)² d)`, the Hoeffding exponent with its `o(d)` term
/// dropped.
pub fn asymptotic_bound(d: f64) -> Bound {
    Bound {
        ln_value: -asymptotic_rate() * d,
        applicable: true,
    }
}

/// `M(λ) = E[e^{λ x²}] = ∫₀¹ e^{λt²} dt` and its derivative, for `λ ≤ 0`.
fn moment(lambda: f64) -> (f64, f64) {
    if lambda.abs() < 1e-4 {
        let l = lambda;
        let m = 1.0 + l / 3.0 + l * l / 10.0 + l * l * l / 42.0;
        let dm = 1.0 / 3.0 + l / 5.0 + l * l / 14.0;
        return (m, dm);
    }
    let s = (-lambda).sqrt();
    let m = PI.sqrt() * erf(s) / (2.0 * s);
    // ∫ t² e^{λt²} dt by parts
    let dm = (lambda.exp() - m) / (2.0 * lambda);
    (m, dm)
}

/// Cramér rate `sup_{λ≤0} [λa − ln M(λ)]` of the lower tail of `x²`,
/// `x ~ U[−1, 1]`. Returns the rate and the maximizing `λ`.
///
/// Zero for `a ≥ 1/3` (no deviation below the mean).
pub fn cramer_rate(a: f64) -> Result<(f64, f64)> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::Optimizer(format!(
            "lower-tail rate needs 0 < a ≤ 1, got a = {a}"
        )));
    }
    if a >= 1.0 / 3.0 {
        return Ok((0.0, 0.0));
    }
    // The objective is concave in λ; its derivative a − M'(λ)/M(λ) is
    // increasing as λ decreases. Bracket the root, then bisect.
    let slope = |l: f64| {
        let (m, dm) = moment(l);
        a - dm / m
    };
    let mut lo = -1.0;
    let mut iters = 0;
    while slope(lo) < 0.0 {
        lo *= 2.0;
        iters += 1;
        if iters > 200 || !lo.is_finite() {
            return Err(Error::Optimizer(format!("could not bracket the tilt for a = {a}")));
        }
    }
    let mut hi = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() < 1e-15 * lo.abs().max(1.0) {
            break;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let (m, _) = moment(lambda);
    let rate = lambda * a - m.ln();
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::Optimizer(format!(
            "rate evaluated to {rate} at λ = {lambda} for a = {a}"
        )));
    }
    Ok((rate, lambda))
}

/// Chernoff bound `inf_{λ<0} e^{−λ r₂²} M(λ)^d` on the intersection ratio.
pub fn chernoff_bound(d: usize) -> Result<Bound> {
    let r = equal_volume_radius(d);
    let a = r * r / d as f64;
    if a >= 1.0 / 3.0 {
        return Err(Error::Optimizer(format!(
            "d = {d}: r₂²/d = {a:.6} is not below the mean 1/3, no lower-tail bound"
        )));
    }
    let (rate, _) = cramer_rate(a)?;
    Ok(Bound {
        ln_value: -(d as f64) * rate,
        applicable: true,
    })
}

/// Uniform sample from the ℓ∞ ball of the given radius at the origin.
pub fn sample_uniform_linf(d: usize, radius: f64, rng: &mut Rng) -> Vec<f64> {
    (0..d)
        .map(|_| radius * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

/// Uniform sample from the ℓ2 ball: a Gaussian direction scaled by
/// `radius · U^{1/d}`.
pub fn sample_uniform_l2(d: usize, radius: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::tensor::norm_l2(&g);
        if n == 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        let scale = radius * u.powf(1.0 / d as f64) / n;
        let mut x: Vec<f64> = g.iter().map(|v| v * scale).collect();
        // guard against rounding just past the boundary
        let nx = crate::tensor::norm_l2(&x);
        if nx > radius {
            x.iter_mut().for_each(|v| *v *= radius / nx);
        }
        return x;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateMethod {
    MonteCarlo,
    Exact2D,
    HoeffdingBound,
    AsymptoticBound,
    ChernoffBound,
}

/// Estimate of `Vol(B₂ ∩ B∞) / Vol(B∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionEstimate {
    pub dim: usize,
    pub method: EstimateMethod,
    /// Ratio in `[0, 1]`. Bounds that underflow report 0 here; see `log10_value`.
    pub value: f64,
    pub log10_value: f64,
    /// Binomial standard error (Monte Carlo only).
    pub stderr: f64,
    /// One-sided 95% upper bound `3/n` when no sample hit the intersection.
    pub zero_hit_upper: Option<f64>,
    pub n_samples: u64,
    pub seed: Option<u64>,
}

impl IntersectionEstimate {
    fn from_bound(dim: usize, method: EstimateMethod, b: Bound) -> Self {
        IntersectionEstimate {
            dim,
            method,
            value: b.value().min(1.0),
            log10_value: b.log10().min(0.0),
            stderr: 0.0,
            zero_hit_upper: None,
            n_samples: 0,
            seed: None,
        }
    }
}

pub const MC_CHUNK: u64 = 1 << 16;

/// Monte Carlo estimate of the fraction of `B∞(linf_radius)` inside
/// `B₂(l2_radius)` in `d` dimensions.
///
/// Samples are split into chunks of [`MC_CHUNK`]; chunk `i` draws from
/// substream `mix(seed, i)` and hit counts are summed in chunk order, so the
/// estimate does not depend on the number of worker threads.
pub fn mc_intersection_ratio(
    d: usize,
    l2_radius: f64,
    linf_radius: f64,
    n: u64,
    seed: u64,
) -> Result<IntersectionEstimate> {
    if n < 10_000 {
        return Err(Error::InvalidArgument(format!("need at least 10^4 samples, got {n}")));
    }
    if d == 0 || !(l2_radius > 0.0) || !(linf_radius > 0.0) {
        return Err(Error::InvalidArgument("dimension and radii must be positive".into()));
    }
    let r2sq = l2_radius * l2_radius;
    let chunks = n.div_ceil(MC_CHUNK);
    let hits: Vec<u64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::substream(seed, c);
            let count = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut hit = 0u64;
            for _ in 0..count {
                let mut s = 0.0;
                let mut inside = true;
                for _ in 0..d {
                    let x = linf_radius * (2.0 * rng.random::<f64>() - 1.0);
                    s += x * x;
                    if s > r2sq {
                        inside = false;
                        break;
                    }
                }
                hit += inside as u64;
            }
            hit
        })
        .collect();
    let total: u64 = hits.iter().sum();
    let p = total as f64 / n as f64;
    Ok(IntersectionEstimate {
        dim: d,
        method: EstimateMethod::MonteCarlo,
        value: p,
        log10_value: p.log10(),
        stderr: (p * (1.0 - p) / n as f64).sqrt(),
        zero_hit_upper: (total == 0).then(|| 3.0 / n as f64),
        n_samples: n,
        seed: Some(seed),
    })
}

/// Exact area fraction of the square `[−1, 1]²` covered by the disk of radius
/// `r` centred at the origin.
pub fn exact_ratio_2d(r: f64) -> f64 {
    assert!(r > 0.0, "radius must be positive");
    if r <= 1.0 {
        PI * r * r / 4.0
    } else if r >= std::f64::consts::SQRT_2 {
        1.0
    } else {
        // disk minus the four circular segments beyond the sides
        let segment = r * r * (1.0 / r).acos() - (r * r - 1.0).sqrt();
        (PI * r * r - 4.0 * segment) / 4.0
    }
}

pub fn exact_estimate_2d(r: f64) -> IntersectionEstimate {
    let v = exact_ratio_2d(r);
    IntersectionEstimate {
        dim: 2,
        method: EstimateMethod::Exact2D,
        value: v,
        log10_value: v.log10(),
        stderr: 0.0,
        zero_hit_upper: None,
        n_samples: 0,
        seed: None,
    }
}

pub fn hoeffding_estimate(d: usize) -> IntersectionEstimate {
    IntersectionEstimate::from_bound(d, EstimateMethod::HoeffdingBound, hoeffding_bound(d))
}

pub fn asymptotic_estimate(d: usize) -> IntersectionEstimate {
    IntersectionEstimate::from_bound(d, EstimateMethod::AsymptoticBound, asymptotic_bound(d as f64))
}

pub fn chernoff_estimate(d: usize) -> Result<IntersectionEstimate> {
    Ok(IntersectionEstimate::from_bound(d, EstimateMethod::ChernoffBound, chernoff_bound(d)?))
}

/// One row of the dimension table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub d: usize,
    pub r2: f64,
    pub hoeffding: Bound,
    /// Drops the unspecified `o(d)` term of the exponent.
    pub asymptotic: Bound,
    pub chernoff: Option<Bound>,
    pub mc: Option<IntersectionEstimate>,
}

/// Settings for [`dimension_table`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableBudget {
    pub mc_samples: u64,
    /// Largest dimension at which Monte Carlo runs at all.
    pub mc_max_dim: usize,
    pub seed: u64,
}

/// Bounds and (where detectable) a Monte Carlo estimate for each dimension.
///
/// Monte Carlo is skipped above `mc_max_dim`, and also when the tightest
/// available bound puts the ratio below `10 / mc_samples`.
pub fn dimension_table(dims: &[usize], budget: TableBudget) -> Result<Vec<DimensionRow>> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no dimensions given".into()));
    }
    dims.iter()
        .enumerate()
        .map(|(i, &d)| {
            if d == 0 {
                return Err(Error::InvalidArgument("dimensions must be positive".into()));
            }
            let hoeffding = hoeffding_bound(d);
            let chernoff = (deviation_from_mean(d) < 0.0)
                .then(|| chernoff_bound(d))
                .transpose()?;
            let mut expected_ln = 0.0f64;
            if hoeffding.applicable {
                expected_ln = expected_ln.min(hoeffding.ln_value);
            }
            if let Some(c) = chernoff {
                expected_ln = expected_ln.min(c.ln_value);
            }
            let detectable = expected_ln >= (10.0 / budget.mc_samples as f64).ln();
            let mc = (d <= budget.mc_max_dim && detectable)
                .then(|| {
                    mc_intersection_ratio(
                        d,
                        equal_volume_radius(d),
                        1.0,
                        budget.mc_samples,
                        rng::mix(budget.seed, i as u64),
                    )
                })
                .transpose()?;
            Ok(DimensionRow {
                d,
                r2: equal_volume_radius(d),
                hoeffding,
                asymptotic: asymptotic_bound(d as f64),
                chernoff,
                mc,
            })
        })
        .collect()
}

pub const DIMENSION_TABLE_HEADER: [&str; 8] = [
    "d",
    "r2",
    "log10_hoeffding",
    "log10_asymptotic",
    "log10_chernoff",
    "mc_ratio",
    "mc_stderr",
    "n_samples",
];

/// Writes the table as CSV; inapplicable cells are left empty.
pub fn write_dimension_table_csv<W: Write>(rows: &[DimensionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIMENSION_TABLE_HEADER)?;
    for row in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        w.write_record([
            row.d.to_string(),
            format!("{:.10}", row.r2),
            opt(row.hoeffding.applicable.then(|| row.hoeffding.log10())),
            format!("{:.10}", row.asymptotic.log10()),
            opt(row.chernoff.map(|c| c.log10())),
            opt(row.mc.as_ref().map(|m| m.value)),
            opt(row.mc.as_ref().map(|m| m.stderr)),
            row.mc
                .as_ref()
                .map(|m| m.n_samples.to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
