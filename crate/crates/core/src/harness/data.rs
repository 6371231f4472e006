//! Datasets and the synthetic generators.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::rng::{self, mix, stream, Rng};
use crate::tensor::{norm_l2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { spec: String },
    Idx { images_sha256: String, labels_sha256: String },
}

/// Labeled inputs in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least two classes, got {classes}")));
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("dataset inputs must lie in [0, 1]".into()));
        }
        // validates the shape and the labels
        LabeledBatch::new(inputs.clone(), labels.clone(), classes)?;
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self) -> LabeledBatch {
        LabeledBatch::new(self.inputs.clone(), self.labels.clone(), self.classes)
            .expect("validated at construction")
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let d = self.dim();
        Dataset {
            inputs: Tensor::new(vec![n, d], self.inputs.data()[..n * d].to_vec()).expect("sub-slice"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Two Gaussian clusters `margin` apart along a random unit direction.
    Blobs,
    /// A ball and a surrounding shell around the center of the cube.
    Ring,
    /// Three coordinate groups: a weak linear shortcut plus a sparse and a
    /// dense group with symmetric class signal (see [`features_groups`]).
    Features,
}

/// Parsed form of `kind:key=value,...`, e.g. `blobs:d=100,n=2000,margin=1.5`.
///
/// Keys: `d`, `n` (train size), `test` (test size, default `n/4`), `margin`,
/// `sigma` (per-coordinate noise for blobs and features), `seed` (data seed; the run seed when
/// absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub d: usize,
    pub n: usize,
    pub n_test: usize,
    pub margin: f64,
    pub sigma: f64,
    pub seed: Option<u64>,
}

impl SyntheticSpec {
    pub fn defaults(kind: SyntheticKind) -> Self {
        let (margin, sigma) = match kind {
            SyntheticKind::Blobs => (0.26, 0.1),
            SyntheticKind::Ring => (0.1, 0.0),
            SyntheticKind::Features => (1.0, 0.05),
        };
        SyntheticSpec {
            kind,
            d: 100,
            n: 2000,
            n_test: 500,
            margin,
            sigma,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.n < 100 || self.n_test == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs d >= 2, n >= 100 and a nonempty test split (d={}, n={}, test={})",
                self.d, self.n, self.n_test
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be finite and nonnegative, got {}", self.sigma)));
        }
        if self.kind == SyntheticKind::Blobs && self.sigma == 0.0 {
            return Err(Error::InvalidArgument("blobs need a positive sigma".into()));
        }
        if self.kind == SyntheticKind::Ring && RING_INNER + self.margin >= RING_OUTER {
            return Err(Error::InvalidArgument(format!(
                "ring margin must be below {}",
                RING_OUTER - RING_INNER
            )));
        }
        Ok(())
    }

    /// Canonical string form; parses back to `self`.
    pub fn canonical(&self) -> String {
        let kind = match self.kind {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Ring => "ring",
            SyntheticKind::Features => "features",
        };
        let mut s = format!(
            "{kind}:d={},n={},test={},margin={},sigma={}",
            self.d, self.n, self.n_test, self.margin, self.sigma
        );
        if let Some(seed) = self.seed {
            s.push_str(&format!(",seed={seed}"));
        }
        s
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let kind = match kind.trim() {
            "blobs" => SyntheticKind::Blobs,
            "ring" => SyntheticKind::Ring,
            "features" => SyntheticKind::Features,
            other => return Err(Error::InvalidArgument(format!("unknown synthetic kind {other:?}"))),
        };
        let mut spec = SyntheticSpec::defaults(kind);
        let mut test_given = false;
        for pair in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {pair:?}")))?;
            let bad = |_| Error::InvalidArgument(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "d" => spec.d = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "n" => spec.n = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "test" => {
                    spec.n_test = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                    test_given = true;
                }
                "margin" => spec.margin = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "sigma" => spec.sigma = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "seed" => spec.seed = Some(v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                other => return Err(Error::InvalidArgument(format!("unknown synthetic key {other:?}"))),
            }
        }
        if !test_given {
            spec.n_test = (spec.n / 4).max(1);
        }
        spec.validate()?;
        Ok(spec)
    }
}

const RING_INNER: f64 = 0.2;
const RING_OUTER: f64 = 0.45;

/// `(share of coordinates, shift)` per group of the `features` task, before
/// scaling the shifts by `margin`.
///
/// The first group is a linear shortcut: class 1 is shifted by `+shift`,
/// class 0 by `-shift`. The other two carry the label symmetrically: class 0
/// sits at the center while class 1 is displaced by `±shift` (one random sign
/// per sample and group), so their class means agree. The second group is
/// sparse with a shift above the usual ℓ∞ budget; the third is dense with a
/// small shift but a large ℓ2 length.
pub fn features_groups() -> [(f64, f64); 3] {
    [(0.36, 0.05), (0.04, 0.35), (0.60, 0.16)]
}

fn group_sizes(d: usize) -> [usize; 3] {
    let g = features_groups();
    let b = ((g[1].0 * d as f64).round() as usize).max(1);
    let c = ((g[2].0 * d as f64).round() as usize).max(1).min(d.saturating_sub(b + 1));
    [d - b - c, b, c]
}

/// Per-coordinate signed shift and group index, in a random coordinate order.
fn features_layout(d: usize, margin: f64, rng: &mut Rng) -> Vec<(f64, usize)> {
    let mut cols: Vec<(f64, usize)> = Vec::with_capacity(d);
    for (g, ((_, shift), k)) in features_groups().iter().zip(group_sizes(d)).enumerate() {
        cols.extend(std::iter::repeat_n((margin * shift, g), k));
    }
    cols.shuffle(rng);
    cols.into_iter()
        .map(|(s, g)| (if rng.random::<bool>() { s } else { -s }, g))
        .collect()
}

fn random_unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm_l2(&g);
        if n > 0.0 {
            return g.iter().map(|v| v / n).collect();
        }
    }
}

/// Train or test split of a synthetic task. Both splits share the class
/// geometry (direction, permutation) drawn from the data seed; samples are
/// drawn from distinct substreams. Labels alternate, so classes are balanced
/// to within one.
pub fn gen_synthetic(spec: &SyntheticSpec, split: Split, run_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let seed = mix(spec.seed.unwrap_or(run_seed), stream::DATA);
    let mut geo = rng::substream(seed, 0);
    let mut r = rng::substream(seed, if split == Split::Train { 1 } else { 2 });
    let n = if split == Split::Train { spec.n } else { spec.n_test };
    let d = spec.d;
    let mut xs = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    match spec.kind {
        SyntheticKind::Blobs => {
            let u = random_unit(d, &mut geo);
            let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for &y in &labels {
                let s = if y == 1 { 0.5 } else { -0.5 } * spec.margin;
                xs.extend(u.iter().map(|ui| 0.5 + s * ui + noise.sample(&mut r)));
            }
        }
        SyntheticKind::Ring => {
            for &y in &labels {
                let (lo, hi) = if y == 0 {
                    (0.0, RING_INNER)
                } else {
                    (RING_INNER + spec.margin, RING_OUTER)
                };
                let rho = lo + (hi - lo) * r.random::<f64>();
                let v = random_unit(d, &mut r);
                xs.extend(v.iter().map(|vi| 0.5 + rho * vi));
            }
        }
        SyntheticKind::Features => {
            let layout = features_layout(d, spec.margin, &mut geo);
            for &y in &labels {
                let flip = [1.0, if r.random::<bool>() { 1.0 } else { -1.0 }, if r.random::<bool>() { 1.0 } else { -1.0 }];
                for &(m, g) in &layout {
                    let z: f64 = StandardNormal.sample(&mut r);
                    let shift = match (g, y) {
                        (0, 1) => m,
                        (0, _) => -m,
                        (_, 1) => flip[g] * m,
                        _ => 0.0,
                    };
                    xs.push(0.5 + shift + spec.sigma * z);
                }
            }
        }
    }
    xs.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Dataset::new(
        Tensor::new(vec![n, d], xs)?,
        labels,
        2,
        split,
        Provenance::Synthetic { spec: spec.canonical() },
    )
}
