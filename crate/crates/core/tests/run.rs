use iseat_core::checkpoint::Checkpoint;
use iseat_core::data::{gen_synthetic, split, Dataset, SyntheticKind};
use iseat_core::trainer::{metrics_csv, run, Method, RunConfig, SwaConfig, METRICS_COLUMNS};
use iseat_core::Error;

fn data() -> (Dataset<f64>, Dataset<f64>) {
    let d = gen_synthetic::<f64>(SyntheticKind::Blobs, 160, 0.2, 8).unwrap();
    split(&d, 0.25, 8).unwrap()
}

fn config(method: Method) -> RunConfig {
    let mut c = RunConfig::desk(method, 0.05);
    c.hidden = vec![8];
    c.epochs = 4;
    c.batch_size = 32;
    c.seed = 21;
    c
}

#[test]
fn runs_are_reproducible_for_every_method() {
    let (tr, te) = data();
    for method in [
        Method::At,
        Method::AtAwp,
        Method::Iseat,
        Method::Lsi,
        Method::TradeAwp,
        Method::TopnFinetune,
    ] {
        let c = config(method);
        let a = run(&c, &tr, &te, None).unwrap();
        let b = run(&c, &tr, &te, None).unwrap();
        assert_eq!(
            metrics_csv(&a.metrics),
            metrics_csv(&b.metrics),
            "{method:?}"
        );
        assert_eq!(a.final_params, b.final_params, "{method:?}");
        assert_eq!(a.metrics.len(), 4);
    }
}

#[test]
fn metrics_follow_the_schedule() {
    let (tr, te) = data();
    let mut c = config(Method::Iseat);
    c.epochs = 8;
    c.lambda_warmup = true;
    c.eps_ramp_epochs = 4;
    let out = run(&c, &tr, &te, None).unwrap();
    let lr: Vec<f64> = out.metrics.iter().map(|m| m.lr).collect();
    let lambda: Vec<f64> = out.metrics.iter().map(|m| m.lambda).collect();
    let eps: Vec<f64> = out.metrics.iter().map(|m| m.epsilon).collect();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
    assert!(
        close(&lr, &[0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.001, 0.001]),
        "{lr:?}"
    );
    assert_eq!(lambda, [0.0, 0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1]);
    assert!(
        close(&eps, &[0.0125, 0.025, 0.0375, 0.05, 0.05, 0.05, 0.05, 0.05]),
        "{eps:?}"
    );
    let header = metrics_csv(&out.metrics)
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, METRICS_COLUMNS.join(","));
}

#[test]
fn best_epoch_has_the_highest_robust_accuracy() {
    let (tr, te) = data();
    let out = run(&config(Method::AtAwp), &tr, &te, None).unwrap();
    let best = out
        .metrics
        .iter()
        .fold(
            None::<&iseat_core::trainer::MetricsRecord>,
            |acc, m| match acc {
                Some(a) if a.eval_robust_acc >= m.eval_robust_acc => Some(a),
                _ => Some(m),
            },
        )
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
}

#[test]
fn swa_averages_the_included_epochs() {
    let (tr, te) = data();
    let mut c = config(Method::At);
    c.swa = Some(SwaConfig {
        start_fraction: 0.5,
        period: 1,
    });
    let out = run(&c, &tr, &te, None).unwrap();
    let swa = out.swa.expect("swa requested");
    // Epochs 3 and 4 are averaged, so the result differs from the final model.
    assert_ne!(swa, out.final_params);
    assert!(swa.all_finite());
    c.swa = Some(SwaConfig {
        start_fraction: 0.75,
        period: 1,
    });
    let last_only = run(&c, &tr, &te, None).unwrap();
    assert_eq!(last_only.swa.unwrap(), last_only.final_params);
    c.swa = None;
    assert!(run(&c, &tr, &te, None).unwrap().swa.is_none());
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let (tr, te) = data();
    let c = config(Method::Iseat);
    let out = run(&c, &tr, &te, None).unwrap();
    let text = Checkpoint::new(out.spec.clone(), c.seed, 4, out.final_params.clone())
        .to_json()
        .unwrap();
    let back = Checkpoint::<f64>::from_json(&text).unwrap();
    assert_eq!(back.params, out.final_params);
    let a = run(&c, &tr, &te, Some(out.final_params.clone())).unwrap();
    let b = run(&c, &tr, &te, Some(back.params)).unwrap();
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn initial_model_must_match_the_configuration() {
    let (tr, te) = data();
    let out = run(&config(Method::At), &tr, &te, None).unwrap();
    let mut c = config(Method::At);
    c.hidden = vec![9];
    assert!(matches!(
        run(&c, &tr, &te, Some(out.final_params)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn single_precision_tracks_double() {
    let (tr, te) = data();
    let c = config(Method::Iseat);
    let a = run(&c, &tr, &te, None).unwrap();
    let b = run(&c, &tr.cast::<f32>(), &te.cast::<f32>(), None).unwrap();
    let (ma, mb) = (a.metrics.last().unwrap(), b.metrics.last().unwrap());
    assert!((ma.train_clean_loss - mb.train_clean_loss).abs() < 0.05);
    assert!((ma.eval_clean_acc - mb.eval_clean_acc).abs() <= 0.1);
}

#[test]
fn divergence_is_reported_as_numerical() {
    let (tr, te) = data();
    let mut c = config(Method::At);
    c.lr.initial = 1e300;
    let err = run(&c, &tr, &te, None).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}
