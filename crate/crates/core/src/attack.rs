//! l-infinity input attacks, margin search along the attack direction, and
//! loss-landscape grids.
//!
//! Every perturbation returned here satisfies `|delta_i| <= epsilon` and
//! `0 <= x_i + delta_i <= 1` exactly in floating point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::fmt_sig;
use crate::model::{predict_rows, ModelParams};
use crate::nd::{sign, Real, Tensor};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Budget in input units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    /// `steps`-step PGD with step size `2.5 * epsilon / steps` and a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: 2.5 * epsilon / steps.max(1) as f64,
            random_start: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Argument("steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Argument(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AttackConfig {
            seed,
            ..self.clone()
        }
    }
}

/// An input perturbation shaped like the batch it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T> {
    pub delta: Tensor<T>,
}

impl<T: Real> Perturbation<T> {
    pub fn zeros_like(x: &Tensor<T>) -> Self {
        Perturbation {
            delta: Tensor::zeros(x.shape()),
        }
    }

    /// `x + delta`
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.delta)
    }

    pub fn linf(&self) -> T {
        self.delta.max_abs()
    }
}

/// Clamps `delta` into `[-eps, eps]` and then into the box `x + delta in [0, 1]`.
pub fn project<T: Real>(x: &[T], delta: &mut [T], eps: T) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let mut v = d.max(-eps).min(eps);
        if xi + v > T::one() {
            // fl(x + fl(1 - x)) == 1 for x in [0, 1]
            v = T::one() - xi;
        } else if xi + v < T::zero() {
            v = -xi;
        }
        *d = v;
    }
}

fn check_inputs<T: Real>(params: &ModelParams<T>, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != params.input_dim() || x.rows() != labels.len() {
        return Err(Error::shape(
            "attack",
            format!("inputs {:?} with {} labels", x.shape(), labels.len()),
        ));
    }
    Ok(())
}

/// Single-step attack: `delta = eps * sign(grad_x L)`, then projected.
pub fn fgsm<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: T,
) -> Result<Perturbation<T>> {
    check_inputs(params, x, labels)?;
    let grad = params.input_gradient(x, labels)?;
    let mut delta = grad.map(|g| epsilon * sign(g));
    project(x.data(), delta.data_mut(), epsilon);
    Ok(Perturbation { delta })
}

/// Iterated signed-gradient ascent with projection after every step.
pub fn pgd<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Perturbation<T>> {
    cfg.validate()?;
    check_inputs(params, x, labels)?;
    let eps = T::lit(cfg.epsilon);
    let alpha = T::lit(cfg.step_size);
    let mut delta = if cfg.random_start && cfg.epsilon > 0.0 {
        let mut rng = rng_for(cfg.seed, &[0xa77a]);
        let e = cfg.epsilon;
        let draws = (0..x.len())
            .map(|_| T::lit(rng.gen_range(-e..=e)))
            .collect();
        Tensor::new(x.shape().to_vec(), draws)?
    } else {
        Tensor::zeros(x.shape())
    };
    project(x.data(), delta.data_mut(), eps);
    for _ in 0..cfg.steps {
        let adv = x.add(&delta)?;
        let grad = params.input_gradient(&adv, labels)?;
        for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
            *d += alpha * sign(g);
        }
        project(x.data(), delta.data_mut(), eps);
    }
    Ok(Perturbation { delta })
}

/// Lattice for [`margin_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub step: f64,
    pub max: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            step: 0.25,
            max: 50.0,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.max >= 0.0 && self.max.is_finite()) {
            return Err(Error::Argument(format!(
                "margin lattice needs step > 0 and max >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lattice(&self) -> Vec<f64> {
        let n = (self.max / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.step).collect()
    }
}

/// Smallest lattice distance that flips the prediction, or none within the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Margin {
    At(f64),
    Max,
}

impl Margin {
    pub fn value(self) -> Option<f64> {
        match self {
            Margin::At(v) => Some(v),
            Margin::Max => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginResult {
    pub mu: Margin,
    /// l2 norm of the search direction before normalisation.
    pub direction_norm: f64,
}

/// Walks `x + mu * delta / ||delta||_2` (clipped to `[0, 1]`) over the lattice.
pub fn margin_search<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    cfg: &MarginConfig,
) -> Result<MarginResult> {
    cfg.validate()?;
    x.same_shape(delta, "margin_search")?;
    let norm = delta.norm_l2();
    if !(norm > T::zero()) {
        return Err(Error::Argument(
            "margin search needs a non-zero direction".into(),
        ));
    }
    let d = x.len();
    let base = params.predict(x)?[0];
    let unit = delta.scale(T::one() / norm);
    let lattice = cfg.lattice();
    const CHUNK: usize = 64;
    for chunk in lattice.chunks(CHUNK) {
        let mut pts = Vec::with_capacity(chunk.len() * d);
        for &mu in chunk {
            let mu = T::lit(mu);
            pts.extend(
                x.data()
                    .iter()
                    .zip(unit.data())
                    .map(|(&xi, &ui)| (xi + mu * ui).max(T::zero()).min(T::one())),
            );
        }
        let preds = predict_rows(&params.forward_logits(&Tensor::new(vec![chunk.len(), d], pts)?)?);
        if let Some(k) = preds.iter().position(|&p| p != base) {
            return Ok(MarginResult {
                mu: Margin::At(chunk[k]),
                direction_norm: norm.to_f64_lossless(),
            });
        }
    }
    Ok(MarginResult {
        mu: Margin::Max,
        direction_norm: norm.to_f64_lossless(),
    })
}

/// Loss on a plane spanned by the attack direction and a random direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid<T> {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` is the loss at `(alphas[i], betas[j])`.
    pub losses: Vec<Vec<T>>,
    pub u: Tensor<T>,
    pub seed: u64,
    /// `||delta||_2`: the alpha at which the walk reaches the attack point.
    pub budget_alpha: f64,
}

impl<T: Real> LandscapeGrid<T> {
    /// Index of the alpha closest to the budget-equivalent distance.
    pub fn budget_row(&self) -> usize {
        let mut best = 0;
        for (i, a) in self.alphas.iter().enumerate() {
            if (a - self.budget_alpha).abs() < (self.alphas[best] - self.budget_alpha).abs() {
                best = i;
            }
        }
        best
    }

    /// `alpha,beta,loss` rows, alpha-major, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, &a) in self.alphas.iter().enumerate() {
            for (j, &b) in self.betas.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt_sig(a, 9),
                    fmt_sig(b, 9),
                    fmt_sig(self.losses[i][j].to_f64_lossless(), 9)
                ));
            }
        }
        out
    }
}

/// Evaluates `L(clip(x + alpha * delta/||delta|| + beta * u/||u||))` on the grid,
/// with `u ~ U(-epsilon, epsilon)^d` drawn from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    label: usize,
    delta: &Tensor<T>,
    alphas: &[f64],
    betas: &[f64],
    epsilon: f64,
    seed: u64,
) -> Result<LandscapeGrid<T>> {
    x.same_shape(delta, "loss_landscape")?;
    let dn = delta.norm_l2();
    if !(dn > T::zero()) {
        return Err(Error::Argument(
            "landscape needs a non-zero attack direction".into(),
        ));
    }
    let mut rng = rng_for(seed, &[0x1a4d]);
    let u = Tensor::new(
        x.shape().to_vec(),
        (0..x.len())
            .map(|_| T::lit(rng.gen_range(-epsilon..=epsilon)))
            .collect(),
    )?;
    let un = u.norm_l2();
    if !(un > T::zero()) {
        return Err(Error::Argument(
            "random landscape direction has zero norm".into(),
        ));
    }
    let du = delta.scale(T::one() / dn);
    let uu = u.scale(T::one() / un);
    let mut losses = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let a = T::lit(a);
        let mut row = Vec::with_capacity(betas.len());
        for &b in betas {
            let b = T::lit(b);
            let p: Vec<T> = x
                .data()
                .iter()
                .zip(du.data().iter().zip(uu.data()))
                .map(|(&xi, (&di, &ui))| (xi + a * di + b * ui).max(T::zero()).min(T::one()))
                .collect();
            let pt = Tensor::new(x.shape().to_vec(), p)?;
            row.push(params.losses(&pt, &[label])?[0]);
        }
        losses.push(row);
    }
    Ok(LandscapeGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        losses,
        u,
        seed,
        budget_alpha: dn.to_f64_lossless(),
    })
}
