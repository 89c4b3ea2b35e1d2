//! Logit-stability penalties between clean and adversarial logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, ModelParams};
use crate::nd::{kl_logits, Graph, NodeId, Real, Tensor};
use crate::vulnerability::{av, weigh, WeightScheme};
use crate::weight_perturb::{apply, WeightPerturbation};

/// Which model copies produce the two logit vectors being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `f(x + delta; theta + v)` against `f(x; theta)`.
    #[default]
    Lsiw,
    /// `f(x + delta; theta)` against `f(x; theta)`.
    Lsi,
    /// `f(x + delta; theta + v)` against `f(x; theta + v)`.
    TradeAwp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SqL2,
    /// `KL(softmax(clean) || softmax(adv))`.
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub scheme: WeightScheme,
}

fn default_lambda() -> f64 {
    0.1
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            variant: Variant::Lsiw,
            distance: Distance::SqL2,
            lambda: default_lambda(),
            scheme: WeightScheme::Linear,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!(
                "penalty.lambda: must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Distance between two logit rows; `clean` is the reference side.
pub fn distance<T: Real>(d: Distance, clean: &[T], adv: &[T]) -> T {
    match d {
        Distance::SqL2 => clean
            .iter()
            .zip(adv)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum(),
        Distance::Kl => kl_logits(clean, adv),
    }
}

/// Records the row-wise distance on the tape.
pub fn distance_rows<T: Real>(
    g: &mut Graph<T>,
    d: Distance,
    clean: NodeId,
    adv: NodeId,
) -> Result<NodeId> {
    match d {
        Distance::SqL2 => g.sq_dist_rows(adv, clean),
        Distance::Kl => g.kl_rows(clean, adv),
    }
}

fn row_distances<T: Real>(d: Distance, clean: &Tensor<T>, adv: &Tensor<T>) -> Vec<T> {
    (0..clean.rows())
        .map(|i| distance(d, clean.row(i), adv.row(i)))
        .collect()
}

/// Per-instance penalty for the batch `x` perturbed by `delta`.
/// `v` is ignored by the input-only variant.
pub fn penalty<T: Real>(
    params: &ModelParams<T>,
    v: &WeightPerturbation<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    variant: Variant,
    d: Distance,
) -> Result<Vec<T>> {
    let adv_x = x.add(delta)?;
    let perturbed = apply(params, v)?.perturbed;
    let (clean, adv) = match variant {
        Variant::Lsiw => (params.forward_logits(x)?, perturbed.forward_logits(&adv_x)?),
        Variant::Lsi => (params.forward_logits(x)?, params.forward_logits(&adv_x)?),
        Variant::TradeAwp => (
            perturbed.forward_logits(x)?,
            perturbed.forward_logits(&adv_x)?,
        ),
    };
    Ok(row_distances(d, &clean, &adv))
}

/// Adversarial loss plus `eta * ||f(x + delta) - f(x)||^2` on the most
/// vulnerable tenth of the batch (ranked by `L(x + delta) - L(x)`), averaged
/// over the batch.
pub fn topn_regularized_loss<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    delta: &Tensor<T>,
    eta: f64,
) -> Result<T> {
    if !(eta >= 0.0) {
        return Err(Error::Argument(format!("eta must be >= 0, got {eta}")));
    }
    let avs: Vec<f64> = av(params, x, labels, delta)?
        .iter()
        .map(|a| a.to_f64_lossless())
        .collect();
    let top = weigh(&avs, WeightScheme::Top10)?;
    let adv_x = x.add(delta)?;
    let clean = params.forward_logits(x)?;
    let adv = params.forward_logits(&adv_x)?;
    let pen = row_distances(Distance::SqL2, &clean, &adv);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        total += cross_entropy(adv.row(i), y)? + T::lit(eta * top.weights[i]) * pen[i];
    }
    Ok(total / T::lit(labels.len() as f64))
}
