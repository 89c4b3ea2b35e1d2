//! Adversarial weight perturbation with a layer-wise relative budget.
//!
//! A layer is one (weight matrix, bias) pair and its norm is the l2 norm over
//! both. The budget for layer `n` is `gamma * ||theta_n||`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_aligned, LabeledBatch, Layer, ModelParams, ParamGrads};
use crate::nd::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightPerturbConfig {
    pub gamma: f64,
    #[serde(default = "one")]
    pub steps: usize,
}

fn one() -> usize {
    1
}

impl WeightPerturbConfig {
    pub fn new(gamma: f64) -> Self {
        WeightPerturbConfig { gamma, steps: 1 }
    }

    /// Step size of the ascent on weights; tied to `gamma`.
    pub fn rho(&self) -> f64 {
        self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Argument(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.steps == 0 {
            return Err(Error::Argument(
                "weight perturbation steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer perturbation `v_n`, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPerturbation<T> {
    pub layers: Vec<Layer<T>>,
}

/// Relative slack on the budget test; keeps projection idempotent under rounding.
fn slack<T: Real>() -> T {
    T::epsilon() * T::lit(4096.0)
}

impl<T: Real> WeightPerturbation<T> {
    pub fn zeros_like(theta: &ModelParams<T>) -> Self {
        WeightPerturbation {
            layers: theta.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.values().all(|v| *v == T::zero()))
    }

    pub fn layer_norms(&self) -> Vec<T> {
        self.layers.iter().map(Layer::norm).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Layer::all_finite)
    }
}

/// Rescales each layer whose norm exceeds `gamma * ||theta_n||` back onto the budget.
pub fn project_layerwise<T: Real>(
    v: &WeightPerturbation<T>,
    theta: &ModelParams<T>,
    gamma: T,
) -> Result<WeightPerturbation<T>> {
    check_aligned(&v.layers, &theta.layers, "project_layerwise")?;
    let layers = v
        .layers
        .iter()
        .zip(&theta.layers)
        .map(|(vn, tn)| {
            let vnorm = vn.norm();
            let budget = gamma * tn.norm();
            if vnorm <= budget * (T::one() + slack()) {
                vn.clone()
            } else if budget > T::zero() {
                vn.scale(budget / vnorm)
            } else {
                vn.zeros_like()
            }
        })
        .collect();
    Ok(WeightPerturbation { layers })
}

/// Per layer: `scale * ||theta_n|| * g_n / ||g_n||`, zero where `g_n = 0`.
fn normalized_step<T: Real>(
    grads: &ParamGrads<T>,
    theta: &ModelParams<T>,
    scale: T,
) -> Vec<Layer<T>> {
    grads
        .layers
        .iter()
        .zip(&theta.layers)
        .map(|(gn, tn)| {
            let gnorm = gn.norm();
            if gnorm > T::zero() {
                gn.scale(scale * tn.norm() / gnorm)
            } else {
                gn.zeros_like()
            }
        })
        .collect()
}

/// Weight perturbation that ascends the mean loss on an already-perturbed batch.
///
/// With `steps == 1` this is the closed form `gamma * ||theta_n|| * g_n / ||g_n||`
/// with `g` taken at `theta`; more steps iterate projected normalised ascent
/// with step `rho = gamma`.
pub fn awp_direction<T: Real>(
    params: &ModelParams<T>,
    adv_batch: &LabeledBatch<T>,
    cfg: &WeightPerturbConfig,
) -> Result<WeightPerturbation<T>> {
    cfg.validate()?;
    if adv_batch.is_empty() {
        return Err(Error::Argument(
            "weight perturbation needs a non-empty batch".into(),
        ));
    }
    let gamma = T::lit(cfg.gamma);
    let rho = T::lit(cfg.rho());
    let mut v = WeightPerturbation::zeros_like(params);
    for step in 0..cfg.steps {
        let (_, grads) = if step == 0 {
            params.param_gradient(adv_batch)?
        } else {
            apply(params, &v)?.perturbed.param_gradient(adv_batch)?
        };
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                location: "weight perturbation gradient".into(),
            });
        }
        let stepped = normalized_step(&grads, params, rho);
        for (vn, sn) in v.layers.iter_mut().zip(&stepped) {
            vn.axpy(T::one(), sn)?;
        }
        v = project_layerwise(&v, params, gamma)?;
    }
    Ok(v)
}

/// Parameters with a perturbation applied, holding a copy of the originals.
#[derive(Debug, Clone)]
pub struct Applied<T> {
    pub perturbed: ModelParams<T>,
    original: ModelParams<T>,
}

impl<T: Real> Applied<T> {
    pub fn original(&self) -> &ModelParams<T> {
        &self.original
    }
}

/// `theta + v`, elementwise.
pub fn apply<T: Real>(theta: &ModelParams<T>, v: &WeightPerturbation<T>) -> Result<Applied<T>> {
    check_aligned(&theta.layers, &v.layers, "apply")?;
    let mut perturbed = theta.clone();
    for (p, vn) in perturbed.layers.iter_mut().zip(&v.layers) {
        p.axpy(T::one(), vn)?;
    }
    Ok(Applied {
        perturbed,
        original: theta.clone(),
    })
}

/// Restores the stored original parameters (bit-identical, no subtraction).
pub fn revert<T: Real>(applied: Applied<T>) -> ModelParams<T> {
    applied.original
}

/// `theta - v`, elementwise; the last step of the perturbed-model update.
pub fn subtract<T: Real>(theta: &mut ModelParams<T>, v: &WeightPerturbation<T>) -> Result<()> {
    check_aligned(&theta.layers, &v.layers, "subtract")?;
    for (p, vn) in theta.layers.iter_mut().zip(&v.layers) {
        p.axpy(-T::one(), vn)?;
    }
    Ok(())
}

/// Builds a perturbation from explicit per-layer tensors.
pub fn from_tensors<T: Real>(layers: Vec<(Tensor<T>, Tensor<T>)>) -> WeightPerturbation<T> {
    WeightPerturbation {
        layers: layers
            .into_iter()
            .map(|(weight, bias)| Layer { weight, bias })
            .collect(),
    }
}
