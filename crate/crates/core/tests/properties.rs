use proptest::prelude::*;
use rand::Rng;

use iseat_core::attack::{pgd, AttackConfig};
use iseat_core::data::batches;
use iseat_core::model::{LabeledBatch, Layer, ModelParams};
use iseat_core::nd::{finite_diff_gradient, Activation, GradCheckReport, Tensor};
use iseat_core::rng::rng_for;
use iseat_core::smoothing::{penalty, Distance, PenaltyConfig, Variant};
use iseat_core::trainer::{build_objective, train_step, Method, Sgd, StepSettings};
use iseat_core::weight_perturb::{
    awp_direction, from_tensors, project_layerwise, WeightPerturbConfig, WeightPerturbation,
};

fn model(seed: u64, widths: &[usize], act: Activation) -> ModelParams<f64> {
    let mut rng = rng_for(seed, &[1]);
    let layers = widths
        .windows(2)
        .map(|w| Layer {
            weight: Tensor::new(
                vec![w[0], w[1]],
                (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            bias: Tensor::new(
                vec![w[1]],
                (0..w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        })
        .collect();
    ModelParams {
        activation: act,
        layers,
    }
}

fn batch(seed: u64, m: usize, d: usize, classes: usize) -> LabeledBatch<f64> {
    let mut rng = rng_for(seed, &[2]);
    LabeledBatch::new(
        Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        )
        .unwrap(),
        (0..m).map(|_| rng.gen_range(0..classes)).collect(),
    )
    .unwrap()
}

fn act(k: u8) -> Activation {
    [Activation::Relu, Activation::Tanh, Activation::Softplus][k as usize % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgd_stays_in_both_boxes(
        seed in 0u64..10_000,
        a in 0u8..3,
        eps in 0.0f64..0.6,
        steps in 1usize..10,
        random_start: bool,
    ) {
        let p = model(seed, &[5, 6, 3], act(a));
        let b = batch(seed, 4, 5, 3);
        let cfg = AttackConfig { epsilon: eps, steps, step_size: eps / 3.0 + 0.01, random_start, seed };
        let delta = pgd(&p, &b.inputs, &b.labels, &cfg).unwrap().delta;
        for (x, d) in b.inputs.data().iter().zip(delta.data()) {
            prop_assert!(d.abs() <= eps);
            prop_assert!(x + d >= 0.0 && x + d <= 1.0);
        }
    }

    #[test]
    fn layerwise_projection(
        seed in 0u64..10_000,
        gamma in 0.0f64..2.0,
        vscale in 1e-4f64..10.0,
    ) {
        let theta = model(seed, &[3, 4, 2], Activation::Relu);
        let mut rng = rng_for(seed, &[3]);
        let v = from_tensors(
            theta
                .layers
                .iter()
                .map(|l| {
                    let mut draw = |t: &Tensor<f64>| {
                        Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.gen_range(-vscale..vscale)).collect()).unwrap()
                    };
                    (draw(&l.weight), draw(&l.bias))
                })
                .collect(),
        );
        let p = project_layerwise(&v, &theta, gamma).unwrap();
        for (n, l) in p.layer_norms().iter().zip(&theta.layers) {
            prop_assert!(*n <= gamma * l.norm() * (1.0 + 1e-12));
        }
        prop_assert_eq!(project_layerwise(&p, &theta, gamma).unwrap(), p.clone());
    }

    #[test]
    fn awp_direction_respects_the_budget(seed in 0u64..10_000, gamma in 0.0f64..0.5, steps in 1usize..4) {
        let p = model(seed, &[4, 5, 2], Activation::Tanh);
        let b = batch(seed, 6, 4, 2);
        let cfg = WeightPerturbConfig { gamma, steps };
        let v = awp_direction(&p, &b, &cfg).unwrap();
        for (n, l) in v.layer_norms().iter().zip(&p.layers) {
            prop_assert!(*n <= gamma * l.norm() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn penalties_are_non_negative_and_vanish_without_perturbation(
        seed in 0u64..10_000,
        a in 0u8..3,
        kl: bool,
    ) {
        let p = model(seed, &[3, 5, 3], act(a));
        let b = batch(seed, 5, 3, 3);
        let d = if kl { Distance::Kl } else { Distance::SqL2 };
        let delta = pgd(&p, &b.inputs, &b.labels, &AttackConfig::pgd(0.1, 3).with_seed(seed)).unwrap().delta;
        let v = awp_direction(&p, &LabeledBatch::new(b.inputs.add(&delta).unwrap(), b.labels.clone()).unwrap(), &WeightPerturbConfig::new(0.05)).unwrap();
        let zero_v = WeightPerturbation::zeros_like(&p);
        let zero_d = Tensor::zeros(b.inputs.shape());
        for variant in [Variant::Lsiw, Variant::Lsi, Variant::TradeAwp] {
            for o in penalty(&p, &v, &b.inputs, &delta, variant, d).unwrap() {
                prop_assert!(o >= -1e-15);
            }
            for o in penalty(&p, &zero_v, &b.inputs, &zero_d, variant, d).unwrap() {
                prop_assert!(o.abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences(
        seed in 0u64..10_000,
        tanh: bool,
        variant in 0u8..3,
        kl: bool,
        lambda in 0.0f64..2.0,
    ) {
        let a = if tanh { Activation::Tanh } else { Activation::Softplus };
        let p = model(seed, &[3, 4, 2], a);
        let b = batch(seed, 5, 3, 2);
        let method = [Method::Iseat, Method::Lsi, Method::TradeAwp][variant as usize];
        let wp = WeightPerturbConfig::new(0.02);
        let pen = PenaltyConfig { lambda, distance: if kl { Distance::Kl } else { Distance::SqL2 }, ..PenaltyConfig::default() };
        let s = StepSettings { method, attack: AttackConfig::pgd(0.1, 3).with_seed(seed), wp: &wp, penalty: &pen, lambda, lr: 0.1 };
        let obj = build_objective(&p, &b, &s).unwrap();
        let (_, g) = obj.gradient(&p).unwrap();
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
            let r = GradCheckReport::compare(&g.layers[li].weight, &numeric, 1e-5).unwrap();
            prop_assert!(r.max_rel_error < 1e-5, "layer {}: {}", li, r.max_rel_error);
        }
    }

    #[test]
    fn degenerate_methods_share_a_trajectory(seed in 0u64..10_000) {
        let p0 = model(seed, &[4, 6, 3], Activation::Relu);
        let b = batch(seed, 8, 4, 3);
        let wp = WeightPerturbConfig::new(0.0);
        let pen = PenaltyConfig { lambda: 0.0, ..PenaltyConfig::default() };
        let mut finals = Vec::new();
        for method in [Method::At, Method::AtAwp, Method::Iseat, Method::Lsi, Method::TradeAwp] {
            let mut p = p0.clone();
            let mut opt = Sgd::new(0.9, 5e-4);
            for step in 0..3 {
                let s = StepSettings { method, attack: AttackConfig::pgd(0.1, 3).with_seed(seed + step), wp: &wp, penalty: &pen, lambda: 0.0, lr: 0.1 };
                train_step(&mut p, &mut opt, &b, &s).unwrap();
            }
            finals.push(p);
        }
        for f in &finals[1..] {
            prop_assert_eq!(f, &finals[0]);
        }
    }

    #[test]
    fn batches_partition_the_indices(n in 0usize..300, m in 1usize..70, seed: u64, epoch in 0usize..5) {
        let bs = batches(n, m, seed, epoch).unwrap();
        let mut all: Vec<usize> = bs.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(bs.iter().all(|b| !b.is_empty() && b.len() <= m));
        prop_assert_eq!(bs, batches(n, m, seed, epoch).unwrap());
    }
}
