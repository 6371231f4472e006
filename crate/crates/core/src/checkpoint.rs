//! JSON model checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, MlpModel};
use crate::tensor::Tensor;

pub const ACTIVATION_RELU: &str = "relu";

/// On-disk form of a model: layer sizes, activation tag, flattened
/// row-major weights and biases, and the seed and defense that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub defense: String,
}

impl Checkpoint {
    pub fn from_model(model: &MlpModel, seed: u64, defense: impl Into<String>) -> Self {
        Checkpoint {
            layer_sizes: model.sizes(),
            activation: ACTIVATION_RELU.to_string(),
            weights: model.layers().iter().map(|l| l.weights.data().to_vec()).collect(),
            biases: model.layers().iter().map(|l| l.bias.data().to_vec()).collect(),
            seed,
            defense: defense.into(),
        }
    }

    pub fn to_model(&self) -> Result<MlpModel> {
        if self.activation != ACTIVATION_RELU {
            return Err(Error::Checkpoint(format!("unsupported activation {:?}", self.activation)));
        }
        let n_layers = self.layer_sizes.len().saturating_sub(1);
        if n_layers == 0 || self.weights.len() != n_layers || self.biases.len() != n_layers {
            return Err(Error::Checkpoint(format!(
                "{} layer sizes need {} weight and bias arrays, found {} and {}",
                self.layer_sizes.len(),
                n_layers,
                self.weights.len(),
                self.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, pair) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            if self.weights[i].len() != n_in * n_out || self.biases[i].len() != n_out {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: sizes {n_in}->{n_out} do not match {} weights / {} biases",
                    self.weights[i].len(),
                    self.biases[i].len()
                )));
            }
            layers.push(Layer {
                weights: Tensor::new(vec![n_out, n_in], self.weights[i].clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
                bias: Tensor::new(vec![n_out], self.biases[i].clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            });
        }
        MlpModel::new(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_model_bits() {
        let m = MlpModel::init(&[5, 4, 3], &mut crate::rng::from_seed(3)).unwrap();
        let ck = Checkpoint::from_model(&m, 3, "natural");
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn rejects_mismatched_chain() {
        let m = MlpModel::init(&[5, 4, 3], &mut crate::rng::from_seed(3)).unwrap();
        let mut ck = Checkpoint::from_model(&m, 3, "natural");
        ck.layer_sizes = vec![5, 6, 3];
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint::from_model(&m, 3, "natural");
        ck.biases.pop();
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&m, 3, "natural");
        ck.activation = "tanh".into();
        assert!(ck.to_model().is_err());
    }
}
