use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Dense, Mlp};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    /// Row-major `(out, in)` weights.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// On-disk JSON form of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub layers: Vec<LayerRecord>,
    /// Free-form tags such as `role` or `task_id`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl MlpCheckpoint {
    pub fn from_mlp(net: &Mlp) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: net.layer_dims().to_vec(),
            hidden_activation: net.hidden_activation(),
            output_activation: net.output_activation(),
            layers,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_tag(mut self, key: &str, value: &str) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint format version {}", self.format_version)));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, rec) in self.layers.iter().enumerate() {
            let rows = rec.weight.len();
            let cols = rec.weight.first().map_or(0, Vec::len);
            if rec.weight.iter().any(|r| r.len() != cols) {
                return Err(Error::shape(format!("layer {i} has ragged weight rows")));
            }
            let flat: Vec<f64> = rec.weight.iter().flatten().copied().collect();
            let weight =
                Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            layers.push(Dense { weight, bias: Array1::from(rec.bias.clone()) });
        }
        let net = Mlp::from_layers(layers, self.hidden_activation, self.output_activation)?;
        if net.layer_dims() != self.layer_dims.as_slice() {
            return Err(Error::shape(format!(
                "declared layer dims {:?} disagree with weights {:?}",
                self.layer_dims,
                net.layer_dims()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

pub fn save_mlp(net: &Mlp, path: &Path) -> Result<()> {
    MlpCheckpoint::from_mlp(net).save(path)
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    MlpCheckpoint::load(path)?.to_mlp()
}
