//! Adversarial vulnerability (loss increase under attack), its dataset-level
//! statistics, and rank-based instance weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nd::{Real, Tensor};
use crate::weight_perturb::{apply, WeightPerturbation};

/// Per-instance `L(x + delta) - L(x)` for a batch.
pub fn av<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    delta: &Tensor<T>,
) -> Result<Vec<T>> {
    let clean = params.losses(x, labels)?;
    let adv = params.losses(&x.add(delta)?, labels)?;
    Ok(adv.iter().zip(&clean).map(|(&a, &c)| a - c).collect())
}

/// Per-instance `L(x + delta; theta + v) - L(x; theta)`.
pub fn av_joint<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    delta: &Tensor<T>,
    v: &WeightPerturbation<T>,
) -> Result<Vec<T>> {
    let clean = params.losses(x, labels)?;
    let perturbed = apply(params, v)?.perturbed;
    let adv = perturbed.losses(&x.add(delta)?, labels)?;
    Ok(adv.iter().zip(&clean).map(|(&a, &c)| a - c).collect())
}

/// Dispersion summary of vulnerability values over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvStats {
    pub av_sd: f64,
    pub av_top10: f64,
    pub av_bot10: f64,
    pub frac_ge_1: f64,
    pub frac_le_0: f64,
}

impl AvStats {
    pub const COLUMNS: [&'static str; 5] =
        ["av_sd", "av_top10", "av_bot10", "frac_ge_1", "frac_le_0"];

    pub fn values(&self) -> [f64; 5] {
        [
            self.av_sd,
            self.av_top10,
            self.av_bot10,
            self.frac_ge_1,
            self.frac_le_0,
        ]
    }
}

/// Number of instances in a top or bottom tenth: `ceil(0.1 * n)`.
pub fn tenth(n: usize) -> usize {
    n.div_ceil(10)
}

/// Population SD, means of the `ceil(n/10)` largest and smallest values, and
/// the fractions at or beyond the thresholds 1 and 0.
pub fn av_stats(avs: &[f64]) -> Result<AvStats> {
    if avs.is_empty() {
        return Err(Error::Argument(
            "vulnerability statistics need at least one value".into(),
        ));
    }
    if avs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "vulnerability values".into(),
        });
    }
    let n = avs.len() as f64;
    let mean = avs.iter().sum::<f64>() / n;
    let var = avs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = avs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = tenth(avs.len());
    let top = sorted[..k].iter().sum::<f64>() / k as f64;
    let bot = sorted[avs.len() - k..].iter().sum::<f64>() / k as f64;
    Ok(AvStats {
        av_sd: var.sqrt(),
        av_top10: top,
        av_bot10: bot,
        frac_ge_1: avs.iter().filter(|&&v| v >= 1.0).count() as f64 / n,
        frac_le_0: avs.iter().filter(|&&v| v <= 0.0).count() as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    #[default]
    Linear,
    Unweighted,
    Top10,
}

impl WeightScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::Linear => "linear",
            WeightScheme::Unweighted => "unweighted",
            WeightScheme::Top10 => "top10",
        }
    }
}

/// Vulnerabilities of one batch with their ranks and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchVulnerability {
    pub av: Vec<f64>,
    /// Rank 0 is the most vulnerable instance.
    pub ranks: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Descending ranks; equal values keep batch order.
pub fn ranks(avs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..avs.len()).collect();
    order.sort_by(|&a, &b| avs[b].total_cmp(&avs[a]));
    let mut r = vec![0; avs.len()];
    for (rank, &i) in order.iter().enumerate() {
        r[i] = rank;
    }
    r
}

pub fn weigh(avs: &[f64], scheme: WeightScheme) -> Result<BatchVulnerability> {
    if avs.is_empty() {
        return Err(Error::Argument("cannot weight an empty batch".into()));
    }
    if avs.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            location: "batch vulnerability".into(),
        });
    }
    let m = avs.len();
    let ranks = ranks(avs);
    let k = tenth(m);
    let weights = ranks
        .iter()
        .map(|&r| match scheme {
            WeightScheme::Linear => 1.0 - r as f64 / m as f64,
            WeightScheme::Unweighted => 1.0,
            WeightScheme::Top10 => {
                if r < k {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    Ok(BatchVulnerability {
        av: avs.to_vec(),
        ranks,
        weights,
    })
}

/// `w_i = 1 - r_i / m`.
pub fn linear_weights(avs: &[f64]) -> Result<BatchVulnerability> {
    weigh(avs, WeightScheme::Linear)
}

/// `|L(x + delta) - L(x) - grad_x L(x) . delta|` per instance.
pub fn taylor_residual<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    delta: &Tensor<T>,
) -> Result<Vec<T>> {
    let grad = params.input_gradient(x, labels)?;
    let diff = av(params, x, labels, delta)?;
    let d = x.cols();
    Ok(diff
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let lin: T = grad.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&delta.data()[i * d..(i + 1) * d])
                .map(|(&g, &e)| g * e)
                .sum();
            (a - lin).abs()
        })
        .collect())
}
