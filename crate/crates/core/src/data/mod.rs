//! Datasets: synthetic 2-D generators, IDX ingestion, splitting and batching.

mod idx;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use idx::{
    dataset_from_idx, load_idx, parse_idx_images, parse_idx_labels, write_idx_images,
    write_idx_labels, IdxError,
};
pub use synthetic::{gen_synthetic, SyntheticKind};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::nd::{Real, Tensor};
use crate::rng::mix_seed;

/// Labelled examples with every input coordinate in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    /// Seed or file digest the data came from.
    pub provenance: String,
    pub num_classes: usize,
    inputs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        name: impl Into<String>,
        provenance: impl Into<String>,
        inputs: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("inputs {:?} with {} labels", inputs.shape(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!(
                "label {y} outside {num_classes} classes"
            )));
        }
        if inputs
            .data()
            .iter()
            .any(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::Argument("dataset inputs must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            name: name.into(),
            provenance: provenance.into(),
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, idx: &[usize]) -> LabeledBatch<T> {
        LabeledBatch {
            inputs: self.inputs.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Argument("empty subset".into()));
        }
        let b = self.batch(idx);
        Dataset::new(
            name,
            self.provenance.clone(),
            b.inputs,
            b.labels,
            self.num_classes,
        )
    }

    /// Keeps only the listed classes and relabels them `0..classes.len()` in list order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        if idx.is_empty() {
            return Err(Error::Argument(format!(
                "no samples of classes {classes:?}"
            )));
        }
        let b = self.batch(&idx);
        let labels = b
            .labels
            .iter()
            .map(|y| classes.iter().position(|c| c == y).expect("filtered"))
            .collect();
        Dataset::new(
            format!("{}{classes:?}", self.name),
            self.provenance.clone(),
            b.inputs,
            labels,
            classes.len(),
        )
    }

    /// First `per_class` samples of each class, in original order.
    pub fn take_per_class(&self, per_class: usize) -> Result<Self> {
        let mut seen = vec![0usize; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                seen[y] += 1;
                seen[y] <= per_class
            })
            .collect();
        self.subset(&idx, self.name.clone())
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            provenance: self.provenance.clone(),
            num_classes: self.num_classes,
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// Seeded disjoint split into `(train, test)`; `test_fraction` must lie in (0, 1).
pub fn split<T: Real>(
    data: &Dataset<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} leaves an empty side for {n} samples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5911])));
    let (test_idx, train_idx) = perm.split_at(n_test);
    Ok((
        data.subset(train_idx, format!("{}-train", data.name))?,
        data.subset(test_idx, format!("{}-test", data.name))?,
    ))
}

/// Batch index lists for one epoch; the order depends only on `(seed, epoch)`.
/// The last batch keeps the remainder when `n` is not a multiple of `m`.
pub fn batches(n: usize, m: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        &[0xba7c4, epoch as u64],
    )));
    Ok(perm.chunks(m).map(<[usize]>::to_vec).collect())
}
