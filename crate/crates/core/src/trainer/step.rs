use crate::attack::{pgd, AttackConfig};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, forward_graph, LabeledBatch, ModelParams, ParamGrads};
use crate::nd::{Graph, Real, Tensor};
use crate::smoothing::{distance, distance_rows, Distance, PenaltyConfig, Variant};
use crate::trainer::Method;
use crate::vulnerability::{av_joint, weigh};
use crate::weight_perturb::{apply, awp_direction, WeightPerturbConfig, WeightPerturbation};

/// Penalty term of the objective with frozen per-instance multipliers `lambda * w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerm<T> {
    pub variant: Variant,
    pub distance: Distance,
    pub coeffs: Vec<T>,
}

/// Batch objective `mean_i [ L(x_i + delta_i; theta + v) + c_i * o_i ]` with
/// `delta`, `v` and the coefficients `c_i` held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective<T> {
    pub clean: Tensor<T>,
    pub adv: Tensor<T>,
    pub labels: Vec<usize>,
    pub v: WeightPerturbation<T>,
    pub penalty: Option<PenaltyTerm<T>>,
}

impl<T: Real> Objective<T> {
    /// Direct evaluation without the tape; the reference for gradient checks.
    pub fn value(&self, theta: &ModelParams<T>) -> Result<T> {
        let perturbed = apply(theta, &self.v)?.perturbed;
        let logits = perturbed.forward_logits(&self.adv)?;
        let mut per = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| cross_entropy(logits.row(i), y))
            .collect::<Result<Vec<T>>>()?;
        if let Some(p) = &self.penalty {
            let o = pair_penalty(
                theta,
                &self.v,
                &self.clean,
                &self.adv,
                p.variant,
                p.distance,
            )?;
            for ((l, c), oi) in per.iter_mut().zip(&p.coeffs).zip(o) {
                *l += *c * oi;
            }
        }
        Ok(per.iter().copied().sum::<T>() / T::lit(per.len() as f64))
    }

    /// Objective value and its gradient with respect to `theta`.
    ///
    /// The perturbed copy `theta + v` and the clean copy `theta` enter the tape
    /// as separate leaves; since `v` is constant, the gradient with respect to
    /// `theta` is the sum of the two leaf gradients.
    pub fn gradient(&self, theta: &ModelParams<T>) -> Result<(T, ParamGrads<T>)> {
        let perturbed = apply(theta, &self.v)?.perturbed;
        let mut g = Graph::new();
        let pn = perturbed.record(&mut g);
        let cn = theta.record(&mut g);
        let act = theta.activation;
        let xa = g.input(self.adv.clone());
        let adv_logits = forward_graph(&mut g, &pn, act, xa)?;
        let ce = g.cross_entropy_rows(adv_logits, &self.labels)?;
        let per = match &self.penalty {
            None => ce,
            Some(p) => {
                let xc = g.input(self.clean.clone());
                let (clean, adv) = match p.variant {
                    Variant::Lsiw => (forward_graph(&mut g, &cn, act, xc)?, adv_logits),
                    Variant::Lsi => (
                        forward_graph(&mut g, &cn, act, xc)?,
                        forward_graph(&mut g, &cn, act, xa)?,
                    ),
                    Variant::TradeAwp => (forward_graph(&mut g, &pn, act, xc)?, adv_logits),
                };
                let o = distance_rows(&mut g, p.distance, clean, adv)?;
                let weighted = g.mul_const(o, Tensor::vector(p.coeffs.clone()))?;
                g.add(ce, weighted)?
            }
        };
        let loss = g.mean(per);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                location: "training objective".into(),
            });
        }
        let mut tape = g.backward(loss, Tensor::scalar(T::one()))?;
        let mut grads = pn.gradients(&mut tape, &perturbed);
        grads.add(&cn.gradients(&mut tape, theta))?;
        Ok((value, grads))
    }
}

fn pair_penalty<T: Real>(
    theta: &ModelParams<T>,
    v: &WeightPerturbation<T>,
    clean: &Tensor<T>,
    adv: &Tensor<T>,
    variant: Variant,
    d: Distance,
) -> Result<Vec<T>> {
    let perturbed = apply(theta, v)?.perturbed;
    let (c, a) = match variant {
        Variant::Lsiw => (theta.forward_logits(clean)?, perturbed.forward_logits(adv)?),
        Variant::Lsi => (theta.forward_logits(clean)?, theta.forward_logits(adv)?),
        Variant::TradeAwp => (
            perturbed.forward_logits(clean)?,
            perturbed.forward_logits(adv)?,
        ),
    };
    Ok((0..c.rows())
        .map(|i| distance(d, c.row(i), a.row(i)))
        .collect())
}

/// SGD with momentum and weight decay, stepping from the perturbed point:
/// `theta <- ((theta + v) - lr * b) - v` with `b = mu * b + grad + wd * theta`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    buf: Option<ParamGrads<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: T::lit(momentum),
            weight_decay: T::lit(weight_decay),
            buf: None,
        }
    }

    pub fn step(
        &mut self,
        theta: &mut ModelParams<T>,
        v: &WeightPerturbation<T>,
        grads: &ParamGrads<T>,
        lr: T,
    ) -> Result<()> {
        crate::model::check_aligned(&theta.layers, &grads.layers, "sgd")?;
        crate::model::check_aligned(&theta.layers, &v.layers, "sgd")?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let mut d = grads.clone();
        for (dl, tl) in d.layers.iter_mut().zip(&theta.layers) {
            for (dv, &tv) in dl.values_mut().zip(tl.values()) {
                *dv += wd * tv;
            }
        }
        let buf = match self.buf.take() {
            None => d,
            Some(mut b) => {
                for (bl, dl) in b.layers.iter_mut().zip(&d.layers) {
                    for (bv, &dv) in bl.values_mut().zip(dl.values()) {
                        *bv = mu * *bv + dv;
                    }
                }
                b
            }
        };
        for ((tl, bl), vl) in theta.layers.iter_mut().zip(&buf.layers).zip(&v.layers) {
            for ((t, &b), &vv) in tl.values_mut().zip(bl.values()).zip(vl.values()) {
                *t = ((*t + vv) - lr * b) - vv;
            }
        }
        self.buf = Some(buf);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean `L(x; theta)` before the update.
    pub clean_loss: f64,
    /// Mean `L(x + delta; theta + v)` before the update.
    pub adv_loss: f64,
    pub objective: f64,
}

/// Per-step settings resolved from the run configuration for one epoch.
#[derive(Debug, Clone)]
pub struct StepSettings<'a> {
    pub method: Method,
    /// Already seeded for this batch.
    pub attack: AttackConfig,
    pub wp: &'a WeightPerturbConfig,
    pub penalty: &'a PenaltyConfig,
    pub lambda: f64,
    pub lr: f64,
}

/// Attack, weight perturbation and instance weights for one batch.
pub fn build_objective<T: Real>(
    params: &ModelParams<T>,
    batch: &LabeledBatch<T>,
    s: &StepSettings<'_>,
) -> Result<Objective<T>> {
    let delta = pgd(params, &batch.inputs, &batch.labels, &s.attack)?.delta;
    let adv = batch.inputs.add(&delta)?;
    let v = if s.method.uses_weight_perturbation() {
        let adv_batch = LabeledBatch {
            inputs: adv.clone(),
            labels: batch.labels.clone(),
        };
        awp_direction(params, &adv_batch, s.wp)?
    } else {
        WeightPerturbation::zeros_like(params)
    };
    let penalty = match s.method.penalty(s.penalty) {
        None => None,
        Some(p) => {
            let avs: Vec<f64> = av_joint(params, &batch.inputs, &batch.labels, &delta, &v)?
                .iter()
                .map(|a| a.to_f64_lossless())
                .collect();
            let weights = weigh(&avs, p.scheme)?.weights;
            Some(PenaltyTerm {
                variant: p.variant,
                distance: p.distance,
                coeffs: weights.iter().map(|w| T::lit(s.lambda * w)).collect(),
            })
        }
    };
    Ok(Objective {
        clean: batch.inputs.clone(),
        adv,
        labels: batch.labels.clone(),
        v,
        penalty,
    })
}

/// One training step of any method; updates `params` in place.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut Sgd<T>,
    batch: &LabeledBatch<T>,
    s: &StepSettings<'_>,
) -> Result<StepReport> {
    let clean_loss = params.mean_loss(&batch.inputs, &batch.labels)?;
    let obj = build_objective(params, batch, s)?;
    let (value, grads) = obj.gradient(params)?;
    let adv_loss = apply(params, &obj.v)?
        .perturbed
        .mean_loss(&obj.adv, &obj.labels)?;
    opt.step(params, &obj.v, &grads, T::lit(s.lr))?;
    if !params.all_finite() {
        return Err(Error::NonFinite {
            location: "parameters after update".into(),
        });
    }
    Ok(StepReport {
        clean_loss: clean_loss.to_f64_lossless(),
        adv_loss: adv_loss.to_f64_lossless(),
        objective: value.to_f64_lossless(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::nd::{finite_diff_gradient, Activation, GradCheckReport};
    use crate::vulnerability::WeightScheme;

    fn setup() -> (ModelParams<f64>, LabeledBatch<f64>) {
        let spec = ModelSpec::new(vec![2, 3, 2], Activation::Tanh, 31).unwrap();
        let p = ModelParams::init(&spec).unwrap();
        let b = LabeledBatch::new(
            Tensor::matrix(4, 2, vec![0.2, 0.8, 0.6, 0.4, 0.9, 0.1, 0.3, 0.3]).unwrap(),
            vec![0, 1, 1, 0],
        )
        .unwrap();
        (p, b)
    }

    fn settings<'a>(
        method: Method,
        wp: &'a WeightPerturbConfig,
        pen: &'a PenaltyConfig,
    ) -> StepSettings<'a> {
        let mut attack = AttackConfig::pgd(0.1, 3);
        attack.random_start = false;
        StepSettings {
            method,
            attack,
            wp,
            penalty: pen,
            lambda: pen.lambda,
            lr: 0.05,
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let (p, b) = setup();
        let wp = WeightPerturbConfig::new(0.05);
        for (method, distance) in [
            (Method::Iseat, Distance::SqL2),
            (Method::Iseat, Distance::Kl),
            (Method::Lsi, Distance::SqL2),
            (Method::TradeAwp, Distance::Kl),
        ] {
            let pen = PenaltyConfig {
                lambda: 0.7,
                distance,
                ..PenaltyConfig::default()
            };
            let obj = build_objective(&p, &b, &settings(method, &wp, &pen)).unwrap();
            let (value, grads) = obj.gradient(&p).unwrap();
            assert!((value - obj.value(&p).unwrap()).abs() < 1e-14);
            for li in 0..p.layers.len() {
                let numeric = finite_diff_gradient(
                    |w| {
                        let mut q = p.clone();
                        q.layers[li].weight = w.clone();
                        obj.value(&q)
                    },
                    &p.layers[li].weight,
                    1e-5,
                )
                .unwrap();
                let r = GradCheckReport::compare(&grads.layers[li].weight, &numeric, 1e-5).unwrap();
                assert!(
                    r.max_rel_error < 1e-5,
                    "{method:?} {distance:?}: {}",
                    r.max_rel_error
                );
            }
        }
    }

    #[test]
    fn plain_sgd_update_equals_gradient_step() {
        let (p, b) = setup();
        let wp = WeightPerturbConfig::new(0.05);
        let pen = PenaltyConfig::default();
        let obj = build_objective(&p, &b, &settings(Method::Iseat, &wp, &pen)).unwrap();
        let (_, grads) = obj.gradient(&p).unwrap();
        let mut q = p.clone();
        Sgd::new(0.0, 0.0)
            .step(&mut q, &obj.v, &grads, 0.05)
            .unwrap();
        for ((a, t), g) in q.values().zip(p.values()).zip(grads.values()) {
            assert!((a - (t - 0.05 * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let (p, _) = setup();
        let grads = ParamGrads {
            layers: p.layers.iter().map(|l| l.zeros_like()).collect(),
        };
        let mut ones = grads.clone();
        ones.layers
            .iter_mut()
            .for_each(|l| l.values_mut().for_each(|v| *v = 1.0));
        let zero = WeightPerturbation::zeros_like(&p);
        let mut q = p.clone();
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut q, &zero, &ones, 1.0).unwrap();
        opt.step(&mut q, &zero, &ones, 1.0).unwrap();
        for (a, t) in q.values().zip(p.values()) {
            assert!((a - (t - 2.9)).abs() < 1e-12);
        }
    }

    #[test]
    fn top10_scheme_penalises_one_of_ten() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Tanh, 3).unwrap();
        let p = ModelParams::<f64>::init(&spec).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let b = LabeledBatch::new(
            Tensor::matrix(10, 2, x).unwrap(),
            (0..10).map(|i| i % 2).collect(),
        )
        .unwrap();
        let wp = WeightPerturbConfig::new(0.0);
        let pen = PenaltyConfig {
            lambda: 2.0,
            scheme: WeightScheme::Linear,
            ..PenaltyConfig::default()
        };
        let obj = build_objective(&p, &b, &settings(Method::TopnFinetune, &wp, &pen)).unwrap();
        let c = obj.penalty.unwrap().coeffs;
        assert_eq!(c.iter().filter(|&&v| v == 2.0).count(), 1);
        assert_eq!(c.iter().filter(|&&v| v == 0.0).count(), 9);
    }

    #[test]
    fn degenerate_configurations_agree_bitwise() {
        let (p0, b) = setup();
        let wp0 = WeightPerturbConfig::new(0.0);
        let pen0 = PenaltyConfig {
            lambda: 0.0,
            ..PenaltyConfig::default()
        };
        let mut trajectories = Vec::new();
        for method in [Method::At, Method::AtAwp, Method::Iseat] {
            let mut p = p0.clone();
            let mut opt = Sgd::new(0.9, 5e-4);
            let mut traj = Vec::new();
            for _ in 0..3 {
                train_step(&mut p, &mut opt, &b, &settings(method, &wp0, &pen0)).unwrap();
                traj.push(p.clone());
            }
            trajectories.push(traj);
        }
        assert_eq!(trajectories[0], trajectories[1]);
        assert_eq!(trajectories[0], trajectories[2]);
    }
}
