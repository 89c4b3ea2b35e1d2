use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nd::{Real, Tensor};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs,
    Moons,
    Circles,
}

impl SyntheticKind {
    /// Nominal feature box mapped onto `[0.05, 0.95]^2`.
    fn frame(self) -> ([f64; 2], [f64; 2]) {
        match self {
            SyntheticKind::Blobs => ([-2.0, 2.0], [-2.0, 2.0]),
            SyntheticKind::Moons => ([-1.5, 2.5], [-1.25, 1.75]),
            SyntheticKind::Circles => ([-1.5, 1.5], [-1.5, 1.5]),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Moons => "moons",
            SyntheticKind::Circles => "circles",
        }
    }
}

/// Two-class 2-D toy data; class sizes differ by at most one.
pub fn gen_synthetic<T: Real>(
    kind: SyntheticKind,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if n < 2 {
        return Err(Error::Argument(format!(
            "synthetic data needs n >= 2, got {n}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Argument(format!(
            "noise must be a finite value >= 0, got {noise}"
        )));
    }
    let mut rng = rng_for(seed, &[0xda7a, kind as u64]);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let n0 = n.div_ceil(2);
    let mut xs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n0);
        let (k, count) = if class == 0 {
            (i, n0)
        } else {
            (i - n0, n - n0)
        };
        let t = if count > 1 {
            k as f64 / (count - 1) as f64
        } else {
            0.5
        };
        let (x, y) = match kind {
            SyntheticKind::Blobs => {
                let c = if class == 0 { -1.0 } else { 1.0 };
                (c, c)
            }
            SyntheticKind::Moons => {
                let a = PI * t;
                if class == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                }
            }
            SyntheticKind::Circles => {
                let a = 2.0 * PI * rng.gen::<f64>();
                let r = if class == 0 { 1.0 } else { 0.5 };
                (r * a.cos(), r * a.sin())
            }
        };
        xs.push(x + noise * gauss.sample(&mut rng));
        xs.push(y + noise * gauss.sample(&mut rng));
        labels.push(class);
    }
    let (fx, fy) = kind.frame();
    let map = |v: f64, f: [f64; 2]| (0.05 + 0.9 * (v - f[0]) / (f[1] - f[0])).clamp(0.0, 1.0);
    let data: Vec<T> = xs
        .chunks(2)
        .flat_map(|p| [T::lit(map(p[0], fx)), T::lit(map(p[1], fy))])
        .collect();
    Dataset::new(
        kind.name(),
        format!("seed:{seed}"),
        Tensor::new(vec![n, 2], data)?,
        labels,
        2,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_blobs_are_two_points() {
        let d: Dataset<f64> = gen_synthetic(SyntheticKind::Blobs, 10, 0.0, 1).unwrap();
        for i in 0..10 {
            let expected = if d.labels()[i] == 0 {
                [0.275, 0.275]
            } else {
                [0.725, 0.725]
            };
            for (a, b) in d.inputs().row(i).iter().zip(expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let other: Dataset<f64> = gen_synthetic(SyntheticKind::Blobs, 10, 0.0, 99).unwrap();
        assert_eq!(d.inputs(), other.inputs());
    }

    #[test]
    fn same_seed_identical() {
        for kind in [
            SyntheticKind::Blobs,
            SyntheticKind::Moons,
            SyntheticKind::Circles,
        ] {
            let a: Dataset<f64> = gen_synthetic(kind, 101, 0.2, 4).unwrap();
            let b: Dataset<f64> = gen_synthetic(kind, 101, 0.2, 4).unwrap();
            assert_eq!(a, b);
            let ones = a.labels().iter().filter(|&&y| y == 1).count();
            assert_eq!(ones, 50);
            assert!(a.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(gen_synthetic::<f64>(SyntheticKind::Moons, 1, 0.1, 0).is_err());
        assert!(gen_synthetic::<f64>(SyntheticKind::Moons, 10, -0.1, 0).is_err());
    }
}
