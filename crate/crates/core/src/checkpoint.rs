//! JSON checkpoints.
//!
//! Layer arrays are written row-major with 17 significant digits so a 64-bit
//! model round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::model::{Layer, ModelParams, ModelSpec};
use crate::nd::{Precision, Real, Tensor};

#[derive(Serialize)]
struct LayerOut {
    weight: Vec<Box<RawValue>>,
    bias: Vec<Box<RawValue>>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    spec: &'a ModelSpec,
    precision: Precision,
    seed: u64,
    epoch: usize,
    layers: Vec<LayerOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIn {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    spec: ModelSpec,
    precision: Precision,
    seed: u64,
    epoch: usize,
    layers: Vec<LayerIn>,
}

/// A saved model plus the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub precision: Precision,
    pub seed: u64,
    pub epoch: usize,
    pub params: ModelParams<T>,
}

fn number(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("formatted float is valid JSON")
}

impl<T: Real> Checkpoint<T> {
    pub fn new(spec: ModelSpec, seed: u64, epoch: usize, params: ModelParams<T>) -> Self {
        Checkpoint {
            spec,
            precision: T::PRECISION,
            seed,
            epoch,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.params.all_finite() {
            return Err(Error::NonFinite {
                location: "checkpoint parameters".into(),
            });
        }
        let out = CheckpointOut {
            spec: &self.spec,
            precision: self.precision,
            seed: self.seed,
            epoch: self.epoch,
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerOut {
                    weight: l
                        .weight
                        .data()
                        .iter()
                        .map(|v| number(v.to_f64_lossless()))
                        .collect(),
                    bias: l
                        .bias
                        .data()
                        .iter()
                        .map(|v| number(v.to_f64_lossless()))
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string(&out).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CheckpointIn =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        raw.spec
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = raw.spec.widths.len() - 1;
        if raw.layers.len() != expected {
            return Err(Error::Checkpoint(format!(
                "spec has {expected} layers, file has {}",
                raw.layers.len()
            )));
        }
        let layers = raw
            .spec
            .widths
            .windows(2)
            .zip(raw.layers)
            .enumerate()
            .map(|(i, (w, l))| {
                let conv = |v: Vec<f64>, shape: Vec<usize>, what: &str| {
                    Tensor::new(shape, v.into_iter().map(T::lit).collect())
                        .map_err(|e| Error::Checkpoint(format!("layer {i} {what}: {e}")))
                };
                Ok(Layer {
                    weight: conv(l.weight, vec![w[0], w[1]], "weight")?,
                    bias: conv(l.bias, vec![w[1]], "bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams {
            activation: raw.spec.activation,
            layers,
        };
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Checkpoint {
            spec: raw.spec,
            precision: raw.precision,
            seed: raw.seed,
            epoch: raw.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
