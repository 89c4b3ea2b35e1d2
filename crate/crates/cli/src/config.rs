//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use iseat_core::attack::MarginConfig;
use iseat_core::data::{gen_synthetic, load_idx, split, Dataset, SyntheticKind};
use iseat_core::nd::Real;
use iseat_core::trainer::RunConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: SyntheticKind,
        n: usize,
        noise: f64,
        seed: u64,
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        /// Keep only these classes, relabelled in list order.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<Vec<usize>>,
        /// Cap on training samples per class.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        per_class: Option<usize>,
        /// Used when no test files are given.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_fraction: Option<f64>,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_alphas() -> Vec<f64> {
    (0..=16).map(|i| -1.0 + 0.25 * i as f64).collect()
}

fn default_betas() -> Vec<f64> {
    (0..=8).map(|i| -1.0 + 0.25 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub margin: MarginConfig,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    /// Index into the held-out split used for the landscape.
    #[serde(default)]
    pub landscape_sample: usize,
    #[serde(default)]
    pub landscape_seed: u64,
    /// Cap on samples used by `margin` and `analyze`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            margin: MarginConfig::default(),
            alphas: default_alphas(),
            betas: default_betas(),
            landscape_sample: 0,
            landscape_seed: 0,
            max_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn invalid(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

impl ExperimentConfig {
    /// Parses, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            invalid(path, format!("at `{at}`: {}", e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate().map_err(|msg| invalid(path, msg))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            fix(train_images);
            fix(train_labels);
            test_images.iter_mut().for_each(fix);
            test_labels.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.label.is_empty() || self.label.contains(['/', '\\']) {
            return Err(format!(
                "label: must be a non-empty name without path separators, got {:?}",
                self.label
            ));
        }
        self.run
            .validate()
            .map_err(|e| format!("run.{}", strip(e.to_string())))?;
        match &self.dataset {
            DatasetConfig::Synthetic {
                n,
                noise,
                test_fraction,
                ..
            } => {
                if *n < 4 {
                    return Err(format!("dataset.n: need at least 4 samples, got {n}"));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(format!("dataset.noise: must be >= 0, got {noise}"));
                }
                check_fraction(*test_fraction)?;
            }
            DatasetConfig::Idx {
                test_images,
                test_labels,
                test_fraction,
                per_class,
                ..
            } => {
                match (test_images, test_labels, test_fraction) {
                    (Some(_), Some(_), None) => {}
                    (None, None, Some(f)) => check_fraction(*f)?,
                    _ => return Err(
                        "dataset: give either both test_images and test_labels or test_fraction"
                            .into(),
                    ),
                }
                if *per_class == Some(0) {
                    return Err("dataset.per_class: must be >= 1".into());
                }
            }
        }
        let a = &self.analysis;
        a.margin
            .validate()
            .map_err(|e| format!("analysis.margin: {}", strip(e.to_string())))?;
        if a.alphas.is_empty()
            || a.betas.is_empty()
            || a.alphas.iter().chain(&a.betas).any(|v| !v.is_finite())
        {
            return Err("analysis.alphas/betas: need finite, non-empty lists".into());
        }
        if a.max_samples == Some(0) {
            return Err("analysis.max_samples: must be >= 1".into());
        }
        Ok(())
    }

    /// `(train, held-out)` splits in the requested precision.
    pub fn datasets<T: Real>(&self) -> Result<(Dataset<T>, Dataset<T>), CliError> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                generator,
                n,
                noise,
                seed,
                test_fraction,
            } => {
                let d = gen_synthetic::<f64>(*generator, *n, *noise, *seed)?;
                let (tr, te) = split(&d, *test_fraction, *seed)?;
                Ok((tr.cast(), te.cast()))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
                per_class,
                test_fraction,
                split_seed,
            } => {
                let narrow = |d: Dataset<f64>| -> Result<Dataset<f64>, CliError> {
                    Ok(match classes {
                        Some(c) => d.select_classes(c)?,
                        None => d,
                    })
                };
                let full = narrow(load_idx(train_images, train_labels)?)?;
                let (train, test) = match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => (full, narrow(load_idx(ti, tl)?)?),
                    _ => split(&full, test_fraction.unwrap_or(0.2), *split_seed)?,
                };
                let train = match per_class {
                    Some(k) => train.take_per_class(*k)?,
                    None => train,
                };
                Ok((train.cast(), test.cast()))
            }
        }
    }
}

fn check_fraction(f: f64) -> Result<(), String> {
    if !(f > 0.0 && f < 1.0) {
        return Err(format!(
            "dataset.test_fraction: must lie in (0, 1), got {f}"
        ));
    }
    Ok(())
}

fn strip(msg: String) -> String {
    msg.strip_prefix("invalid argument: ")
        .map(str::to_string)
        .unwrap_or(msg)
}
