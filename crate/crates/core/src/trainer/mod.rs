//! Training loops: plain adversarial training, adversarial weight
//! perturbation, ISEAT and its ablations.

mod run;
mod step;

use serde::{Deserialize, Serialize};

pub use run::{
    evaluate, metrics_csv, run, swa_update, vulnerabilities, MetricsRecord, RunOutput, SwaState,
    METRICS_COLUMNS,
};
pub use step::{
    build_objective, train_step, Objective, PenaltyTerm, Sgd, StepReport, StepSettings,
};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::nd::{Activation, Precision};
use crate::smoothing::{Distance, PenaltyConfig, Variant};
use crate::vulnerability::WeightScheme;
use crate::weight_perturb::WeightPerturbConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    At,
    AtAwp,
    Iseat,
    Lsi,
    TradeAwp,
    TopnFinetune,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::At => "at",
            Method::AtAwp => "at_awp",
            Method::Iseat => "iseat",
            Method::Lsi => "lsi",
            Method::TradeAwp => "trade_awp",
            Method::TopnFinetune => "topn_finetune",
        }
    }

    pub fn uses_weight_perturbation(self) -> bool {
        matches!(
            self,
            Method::AtAwp | Method::Iseat | Method::Lsi | Method::TradeAwp
        )
    }

    /// The penalty actually applied, or `None` for unregularised methods.
    /// Fine-tuning always uses the input-only squared distance on the top tenth.
    pub fn penalty(self, cfg: &PenaltyConfig) -> Option<PenaltyConfig> {
        let with = |variant| PenaltyConfig {
            variant,
            ..cfg.clone()
        };
        match self {
            Method::At | Method::AtAwp => None,
            Method::Iseat => Some(with(Variant::Lsiw)),
            Method::Lsi => Some(with(Variant::Lsi)),
            Method::TradeAwp => Some(with(Variant::TradeAwp)),
            Method::TopnFinetune => Some(PenaltyConfig {
                variant: Variant::Lsi,
                distance: Distance::SqL2,
                lambda: cfg.lambda,
                scheme: WeightScheme::Top10,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// Fractions of the run after which the rate is multiplied by `factor`.
    #[serde(default = "default_decay_at")]
    pub decay_at: Vec<f64>,
}

fn default_factor() -> f64 {
    0.1
}

fn default_decay_at() -> Vec<f64> {
    vec![0.5, 0.75]
}

impl LrSchedule {
    /// Number of decays that have happened by 0-based `epoch`.
    pub fn decays(&self, epoch: usize, epochs: usize) -> usize {
        self.decay_at
            .iter()
            .filter(|&&f| epoch as f64 >= f * epochs as f64)
            .count()
    }

    pub fn rate(&self, epoch: usize, epochs: usize) -> f64 {
        self.initial * self.factor.powi(self.decays(epoch, epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaConfig {
    /// Epochs after `start_fraction * epochs` are averaged.
    pub start_fraction: f64,
    #[serde(default = "default_period")]
    pub period: usize,
}

fn default_period() -> usize {
    1
}

impl SwaConfig {
    /// Whether 1-based `epoch` enters the average.
    pub fn includes(&self, epoch: usize, epochs: usize) -> bool {
        let start = (self.start_fraction * epochs as f64).floor() as usize + 1;
        epoch >= start && (epoch - start).is_multiple_of(self.period)
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Training attack. Its seed is replaced per batch.
    pub attack: AttackConfig,
    /// Attack used for held-out robust accuracy and checkpoint selection.
    pub eval_attack: AttackConfig,
    #[serde(default = "default_wp")]
    pub wp: WeightPerturbConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lambda_warmup: bool,
    #[serde(default)]
    pub eps_ramp_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub swa: Option<SwaConfig>,
    /// Train samples used for the per-epoch vulnerability statistics (all if absent).
    #[serde(default)]
    pub av_samples: Option<usize>,
}

fn default_wp() -> WeightPerturbConfig {
    WeightPerturbConfig::new(0.007)
}

fn default_precision() -> Precision {
    Precision::F64
}

fn field(path: &str, e: Error) -> Error {
    match e {
        Error::Argument(msg) => Error::Argument(format!("{path}: {msg}")),
        other => other,
    }
}

impl RunConfig {
    /// A small configuration for quick runs; callers adjust fields as needed.
    pub fn desk(method: Method, epsilon: f64) -> Self {
        RunConfig {
            method,
            hidden: vec![16],
            activation: Activation::Relu,
            attack: AttackConfig::pgd(epsilon, 7),
            eval_attack: AttackConfig::pgd(epsilon, 10),
            wp: default_wp(),
            penalty: PenaltyConfig::default(),
            epochs: 10,
            batch_size: 64,
            lr: LrSchedule {
                initial: 0.1,
                factor: default_factor(),
                decay_at: default_decay_at(),
            },
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lambda_warmup: false,
            eps_ramp_epochs: 0,
            seed: 0,
            precision: Precision::F64,
            swa: None,
            av_samples: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Argument("hidden: widths must be >= 1".into()));
        }
        self.attack.validate().map_err(|e| field("attack", e))?;
        self.eval_attack
            .validate()
            .map_err(|e| field("eval_attack", e))?;
        self.wp.validate().map_err(|e| field("wp", e))?;
        self.penalty.validate()?;
        if self.epochs == 0 {
            return Err(Error::Argument("epochs: must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size: must be >= 1".into()));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::Argument(format!(
                "lr.initial: must be > 0, got {}",
                self.lr.initial
            )));
        }
        if !(self.lr.factor > 0.0 && self.lr.factor <= 1.0) {
            return Err(Error::Argument(format!(
                "lr.factor: must lie in (0, 1], got {}",
                self.lr.factor
            )));
        }
        let fr = &self.lr.decay_at;
        if fr.iter().any(|&f| !(f > 0.0 && f < 1.0)) || fr.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!(
                "lr.decay_at: fractions must lie in (0, 1) and increase strictly, got {fr:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!(
                "momentum: must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Argument(format!(
                "weight_decay: must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(swa) = &self.swa {
            if !(0.0..1.0).contains(&swa.start_fraction) {
                return Err(Error::Argument(format!(
                    "swa.start_fraction: must lie in [0, 1), got {}",
                    swa.start_fraction
                )));
            }
            if swa.period == 0 {
                return Err(Error::Argument("swa.period: must be >= 1".into()));
            }
        }
        if self.av_samples == Some(0) {
            return Err(Error::Argument("av_samples: must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr.rate(epoch, self.epochs)
    }

    /// Penalty weight for 0-based `epoch`; zero before the first decay under warm-up.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if self.lambda_warmup && self.lr.decays(epoch, self.epochs) == 0 {
            0.0
        } else {
            self.penalty.lambda
        }
    }

    /// Attack budget for 0-based `epoch`: linear ramp over the first
    /// `eps_ramp_epochs` epochs, reaching the full budget at the last of them.
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        let r = self.eps_ramp_epochs;
        if r == 0 || epoch + 1 >= r {
            self.attack.epsilon
        } else {
            self.attack.epsilon * (epoch + 1) as f64 / r as f64
        }
    }

    /// Training attack for `epoch`, with the step size scaled along with the budget.
    pub fn attack_at(&self, epoch: usize) -> AttackConfig {
        let eps = self.epsilon_at(epoch);
        let scale = if self.attack.epsilon > 0.0 {
            eps / self.attack.epsilon
        } else {
            1.0
        };
        AttackConfig {
            epsilon: eps,
            step_size: if scale > 0.0 {
                self.attack.step_size * scale
            } else {
                self.attack.step_size
            },
            ..self.attack.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_example() {
        let mut cfg = RunConfig::desk(Method::At, 0.1);
        cfg.epochs = 4;
        let lrs: Vec<f64> = (0..4).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[..2], [0.1, 0.1]);
        assert!((lrs[2] - 0.01).abs() < 1e-15 && (lrs[3] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn lambda_warmup() {
        let mut cfg = RunConfig::desk(Method::Iseat, 0.1);
        cfg.epochs = 4;
        cfg.lambda_warmup = true;
        let l: Vec<f64> = (0..4).map(|e| cfg.lambda_at(e)).collect();
        assert_eq!(l, vec![0.0, 0.0, 0.1, 0.1]);
        cfg.lambda_warmup = false;
        assert_eq!(cfg.lambda_at(0), 0.1);
    }

    #[test]
    fn epsilon_ramp_is_monotone_then_flat() {
        let mut cfg = RunConfig::desk(Method::At, 0.08);
        cfg.eps_ramp_epochs = 4;
        let e: Vec<f64> = (0..7).map(|i| cfg.epsilon_at(i)).collect();
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(e[3..], [0.08; 4]);
        assert!((e[0] - 0.02).abs() < 1e-15);
        let a = cfg.attack_at(1);
        assert!((a.step_size - cfg.attack.step_size * 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation_paths() {
        let mut cfg = RunConfig::desk(Method::Iseat, 0.1);
        cfg.penalty.lambda = -1.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("penalty.lambda"));
        let mut cfg = RunConfig::desk(Method::Iseat, 0.1);
        cfg.lr.decay_at = vec![0.75, 0.5];
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("lr.decay_at"));
        let mut cfg = RunConfig::desk(Method::Iseat, 0.1);
        cfg.wp.gamma = -0.1;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("wp: gamma"));
        assert!(RunConfig::desk(Method::At, 0.1).validate().is_ok());
    }

    #[test]
    fn swa_inclusion() {
        let swa = SwaConfig {
            start_fraction: 0.5,
            period: 2,
        };
        let inc: Vec<usize> = (1..=10).filter(|&e| swa.includes(e, 10)).collect();
        assert_eq!(inc, vec![6, 8, 10]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(RunConfig::desk(Method::At, 0.1)).unwrap();
        v["lamda"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
