use crate::attack::{pgd, AttackConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::fmt::fmt_sig;
use crate::model::{ModelParams, ModelSpec};
use crate::nd::Real;
use crate::rng::mix_seed;
use crate::trainer::step::{train_step, Sgd, StepSettings};
use crate::trainer::RunConfig;
use crate::vulnerability::{av, av_stats, AvStats};

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "train_clean_loss",
    "train_adv_loss",
    "eval_clean_acc",
    "eval_robust_acc",
    "av_sd",
    "av_top10",
    "av_bot10",
    "frac_ge_1",
    "frac_le_0",
    "lr",
    "lambda",
    "epsilon",
];

/// One row of the per-epoch metrics table; `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_clean_loss: f64,
    pub train_adv_loss: f64,
    pub eval_clean_acc: f64,
    pub eval_robust_acc: f64,
    pub av: AvStats,
    pub lr: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.epoch.to_string()];
        let vals = [
            self.train_clean_loss,
            self.train_adv_loss,
            self.eval_clean_acc,
            self.eval_robust_acc,
        ];
        cells.extend(vals.iter().map(|&v| fmt_sig(v, 9)));
        cells.extend(self.av.values().iter().map(|&v| fmt_sig(v, 9)));
        cells.extend(
            [self.lr, self.lambda, self.epsilon]
                .iter()
                .map(|&v| fmt_sig(v, 9)),
        );
        cells.join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRecord]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Sum of the included parameter snapshots and their count.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaState<T> {
    sum: ModelParams<T>,
    count: usize,
}

impl<T: Real> SwaState<T> {
    pub fn count(&self) -> usize {
        self.count
    }

    /// Equal-weight mean of every snapshot added so far.
    pub fn average(&self) -> ModelParams<T> {
        let mut avg = self.sum.clone();
        let n = T::lit(self.count as f64);
        avg.values_mut().for_each(|v| *v /= n);
        avg
    }
}

pub fn swa_update<T: Real>(
    running: Option<SwaState<T>>,
    params: &ModelParams<T>,
) -> Result<SwaState<T>> {
    match running {
        None => Ok(SwaState {
            sum: params.clone(),
            count: 1,
        }),
        Some(mut s) => {
            crate::model::check_aligned(&s.sum.layers, &params.layers, "swa_update")?;
            for (a, &b) in s.sum.values_mut().zip(params.values()) {
                *a += b;
            }
            s.count += 1;
            Ok(s)
        }
    }
}

const CHUNK: usize = 512;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(move |s| (s..(s + CHUNK).min(n)).collect())
}

/// Clean and robust accuracy of `params` on `data` under `attack`.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    attack: &AttackConfig,
) -> Result<(f64, f64)> {
    let (mut clean, mut robust) = (0usize, 0usize);
    for (c, idx) in chunks(data.len()).enumerate() {
        let b = data.batch(&idx);
        let delta = pgd(
            params,
            &b.inputs,
            &b.labels,
            &attack.with_seed(mix_seed(attack.seed, &[c as u64])),
        )?
        .delta;
        let pc = params.predict(&b.inputs)?;
        let pr = params.predict(&b.inputs.add(&delta)?)?;
        clean += pc.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
        robust += pr.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
    }
    let n = data.len() as f64;
    Ok((clean as f64 / n, robust as f64 / n))
}

/// `L(x + delta) - L(x)` for the first `limit` samples, with a fresh attack.
pub fn vulnerabilities<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    attack: &AttackConfig,
    limit: Option<usize>,
) -> Result<Vec<f64>> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    let mut out = Vec::with_capacity(n);
    for (c, idx) in chunks(n).enumerate() {
        let b = data.batch(&idx);
        let delta = pgd(
            params,
            &b.inputs,
            &b.labels,
            &attack.with_seed(mix_seed(attack.seed, &[c as u64])),
        )?
        .delta;
        out.extend(
            av(params, &b.inputs, &b.labels, &delta)?
                .iter()
                .map(|a| a.to_f64_lossless()),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub spec: ModelSpec,
    pub metrics: Vec<MetricsRecord>,
    pub final_params: ModelParams<T>,
    /// 1-based epoch with the highest held-out robust accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_params: ModelParams<T>,
    pub swa: Option<ModelParams<T>>,
}

/// Trains from `init` (or a fresh seeded initialisation) and evaluates on `eval` after every epoch.
pub fn run<T: Real>(
    cfg: &RunConfig,
    train: &Dataset<T>,
    eval: &Dataset<T>,
    init: Option<ModelParams<T>>,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    if train.dim() != eval.dim() {
        return Err(Error::shape(
            "run",
            format!("train dim {} vs eval dim {}", train.dim(), eval.dim()),
        ));
    }
    let mut widths = vec![train.dim()];
    widths.extend(&cfg.hidden);
    widths.push(train.num_classes.max(eval.num_classes).max(2));
    let spec = ModelSpec::new(widths, cfg.activation, mix_seed(cfg.seed, &[0x1417]))?;
    let mut params = match init {
        Some(p) => {
            if p.widths() != spec.widths {
                return Err(Error::shape(
                    "run",
                    format!(
                        "initial model widths {:?} vs configured {:?}",
                        p.widths(),
                        spec.widths
                    ),
                ));
            }
            p
        }
        None => ModelParams::init(&spec)?,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams<T>)> = None;
    let mut swa = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let lambda = cfg.lambda_at(epoch);
        let attack = cfg.attack_at(epoch);
        let (mut clean_sum, mut adv_sum) = (0.0, 0.0);
        for (b, idx) in batches(train.len(), cfg.batch_size, cfg.seed, epoch)?
            .iter()
            .enumerate()
        {
            let batch = train.batch(idx);
            let settings = StepSettings {
                method: cfg.method,
                attack: attack.with_seed(mix_seed(cfg.seed, &[0xa7, epoch as u64, b as u64])),
                wp: &cfg.wp,
                penalty: &cfg.penalty,
                lambda,
                lr,
            };
            let rep =
                train_step(&mut params, &mut opt, &batch, &settings).map_err(|e| match e {
                    Error::NonFinite { location } => Error::NonFinite {
                        location: format!("epoch {} batch {b}: {location}", epoch + 1),
                    },
                    other => other,
                })?;
            clean_sum += rep.clean_loss * idx.len() as f64;
            adv_sum += rep.adv_loss * idx.len() as f64;
        }
        let eval_attack = cfg
            .eval_attack
            .with_seed(mix_seed(cfg.seed, &[0xe7a1, epoch as u64]));
        let (eval_clean_acc, eval_robust_acc) = evaluate(&params, eval, &eval_attack)?;
        let av_attack = attack.with_seed(mix_seed(cfg.seed, &[0xa5, epoch as u64]));
        let avs = vulnerabilities(&params, train, &av_attack, cfg.av_samples)?;
        let n = train.len() as f64;
        metrics.push(MetricsRecord {
            epoch: epoch + 1,
            train_clean_loss: clean_sum / n,
            train_adv_loss: adv_sum / n,
            eval_clean_acc,
            eval_robust_acc,
            av: av_stats(&avs)?,
            lr,
            lambda,
            epsilon: attack.epsilon,
        });
        if best.as_ref().is_none_or(|(_, r, _)| eval_robust_acc > *r) {
            best = Some((epoch + 1, eval_robust_acc, params.clone()));
        }
        if let Some(s) = &cfg.swa {
            if s.includes(epoch + 1, cfg.epochs) {
                swa = Some(swa_update(swa, &params)?);
            }
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(RunOutput {
        spec,
        metrics,
        final_params: params,
        best_epoch,
        best_params,
        swa: swa.map(|s| s.average()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split, SyntheticKind};
    use crate::trainer::{Method, SwaConfig};

    fn data() -> (Dataset<f64>, Dataset<f64>) {
        let d = gen_synthetic(SyntheticKind::Moons, 120, 0.1, 4).unwrap();
        split(&d, 0.25, 4).unwrap()
    }

    fn cfg(method: Method) -> RunConfig {
        let mut c = RunConfig::desk(method, 0.05);
        c.hidden = vec![8];
        c.epochs = 3;
        c.batch_size = 32;
        c.attack = AttackConfig::pgd(0.05, 3);
        c.eval_attack = AttackConfig::pgd(0.05, 5);
        c
    }

    #[test]
    fn run_is_deterministic_and_complete() {
        let (tr, te) = data();
        let mut c = cfg(Method::Iseat);
        c.swa = Some(SwaConfig {
            start_fraction: 0.3,
            period: 1,
        });
        let a = run(&c, &tr, &te, None).unwrap();
        let b = run(&c, &tr, &te, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.iter().enumerate().all(|(i, m)| m.epoch == i + 1));
        assert!(a.swa.is_some());
        let best = &a.metrics[a.best_epoch - 1];
        assert!(a
            .metrics
            .iter()
            .all(|m| m.eval_robust_acc <= best.eval_robust_acc));
        assert!(a
            .metrics
            .iter()
            .all(|m| (0.0..=1.0).contains(&m.eval_clean_acc)));
    }

    #[test]
    fn csv_has_fixed_columns() {
        let (tr, te) = data();
        let out = run(&cfg(Method::At), &tr, &te, None).unwrap();
        let csv = metrics_csv(&out.metrics);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
        assert!(lines.all(|l| l.split(',').count() == METRICS_COLUMNS.len()));
    }

    #[test]
    fn swa_averages() {
        let (tr, _) = data();
        let spec = ModelSpec::new(vec![tr.dim(), 3, 2], crate::nd::Activation::Relu, 1).unwrap();
        let a = ModelParams::<f64>::init(&spec).unwrap();
        let mut b = a.clone();
        b.values_mut().for_each(|v| *v = 2.0 * *v + 1.0);
        let one = swa_update(None, &a).unwrap();
        assert_eq!(one.average(), a);
        let two = swa_update(Some(one), &b).unwrap();
        for ((m, x), y) in two.average().values().zip(a.values()).zip(b.values()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn init_width_mismatch_rejected() {
        let (tr, te) = data();
        let spec = ModelSpec::new(vec![tr.dim(), 5, 2], crate::nd::Activation::Relu, 1).unwrap();
        let p = ModelParams::<f64>::init(&spec).unwrap();
        assert!(run(&cfg(Method::At), &tr, &te, Some(p)).is_err());
    }
}
