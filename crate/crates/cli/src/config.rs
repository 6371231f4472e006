//! Run configuration, input loading and the per-run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use normclash_core::checkpoint::Checkpoint;
use normclash_core::harness::{calibrate_epsilons, gen_synthetic, load_idx, Dataset, Provenance, Split, SyntheticSpec};
use normclash_core::harness::ExperimentConfig;
use normclash_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "NORMCLASH_SEED";

/// Everything a command reads. Loaded from `--config`, then overridden by
/// flags; the resolved value is what the manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Synthetic spec (`features`, `blobs:d=100,margin=1.5`, ...) or
    /// `idx:<train images>,<train labels>,<test images>,<test labels>`.
    pub data: String,
    pub seed: Option<u64>,
    pub eps_inf: f64,
    /// Defaults to the equal-volume radius `eps_inf · r₂(d)`.
    pub eps_2: Option<f64>,
    pub defense: String,
    /// `pgd-linf`, `pgd-l2`, `eot-linf`, `eot-l2`, `cw` or `none`.
    pub attack: String,
    pub checkpoint: Option<PathBuf>,
    pub sweep: usize,
    pub experiment: ExperimentConfig,
    pub dims: Vec<usize>,
    pub d: usize,
    pub mc_samples: u64,
    pub mc_max_dim: usize,
    /// ℓ2 radius for `geometry mc`; the equal-volume radius when absent.
    pub l2_radius: Option<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: "features".into(),
            seed: None,
            eps_inf: 0.1,
            eps_2: None,
            defense: "natural".into(),
            attack: "pgd-linf".into(),
            checkpoint: None,
            sweep: 16,
            experiment: ExperimentConfig::default(),
            dims: vec![2, 784, 3072, 150528],
            d: 2,
            mc_samples: 1_000_000,
            mc_max_dim: 100,
            l2_radius: None,
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&s).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    /// Fills the seed from the environment (or 0) when neither the file nor
    /// a flag set it, and pins the experiment seed to it.
    pub fn resolve_seed(&mut self) -> Result<()> {
        let seed = match self.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV} is not an unsigned integer: {v:?}")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        self.experiment.seed = seed;
        self.experiment.train.seed = seed;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_inf >= 0.0 && self.eps_inf.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_inf must be nonnegative, got {}", self.eps_inf)));
        }
        if let Some(e) = self.eps_2 {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::InvalidArgument(format!("eps_2 must be nonnegative, got {e}")));
            }
        }
        if self.dims.contains(&0) || self.d == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        self.experiment.validate()
    }

    /// Pins `eps_2` to the calibrated value for dimension `d` if unset.
    pub fn resolve_eps_2(&mut self, d: usize) -> f64 {
        *self.eps_2.get_or_insert_with(|| calibrate_epsilons(d, self.eps_inf))
    }
}

/// Train and test splits plus digests of the files they came from.
pub struct Inputs {
    pub train: Dataset,
    pub test: Dataset,
    pub digests: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let mut digests = BTreeMap::new();
    if let Some(rest) = cfg.data.strip_prefix("idx:") {
        let paths: Vec<&str> = rest.split(',').map(str::trim).collect();
        let [ti, tl, vi, vl] = paths.as_slice() else {
            return Err(Error::InvalidArgument(
                "idx data needs four paths: train images, train labels, test images, test labels".into(),
            ));
        };
        let train = load_idx(Path::new(ti), Path::new(tl), Split::Train)?;
        let test = load_idx(Path::new(vi), Path::new(vl), Split::Test)?;
        if train.dim() != test.dim() {
            return Err(Error::InvalidArgument(format!(
                "train and test widths differ ({} vs {})",
                train.dim(),
                test.dim()
            )));
        }
        for (name, ds) in [("train", &train), ("test", &test)] {
            if let Provenance::Idx {
                images_sha256,
                labels_sha256,
            } = &ds.provenance
            {
                digests.insert(format!("{name}_images"), images_sha256.clone());
                digests.insert(format!("{name}_labels"), labels_sha256.clone());
            }
        }
        return Ok(Inputs { train, test, digests });
    }
    let spec: SyntheticSpec = cfg.data.parse()?;
    let train = gen_synthetic(&spec, Split::Train, cfg.seed())?;
    let test = gen_synthetic(&spec, Split::Test, cfg.seed())?;
    Ok(Inputs { train, test, digests })
}

pub fn load_checkpoint(cfg: &RunConfig, digests: &mut BTreeMap<String, String>) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("this command needs --checkpoint".into()))?;
    digests.insert("checkpoint".into(), sha256_file(path)?);
    Checkpoint::load(path)
}

/// Written next to every run's outputs; `replay` re-runs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"eps_inf": 0.2}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"eps_infinity": 0.2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"experiment": {"repeat": 2}}"#).is_err());
    }

    #[test]
    fn config_round_trips() {
        let mut c = RunConfig::default();
        c.seed = Some(9);
        c.eps_2 = Some(0.5);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
