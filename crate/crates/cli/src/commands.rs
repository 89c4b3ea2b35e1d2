//! Command implementations, generic over the floating-point type.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;

use iseat_core::attack::{loss_landscape, margin_search, pgd, AttackConfig, Margin};
use iseat_core::checkpoint::Checkpoint;
use iseat_core::data::Dataset;
use iseat_core::fmt::fmt_sig;
use iseat_core::model::ModelParams;
use iseat_core::nd::{Real, Tensor};
use iseat_core::rng::mix_seed;
use iseat_core::trainer::{evaluate, metrics_csv, run, vulnerabilities, MetricsRecord};
use iseat_core::vulnerability::{av_stats, AvStats};

use crate::config::ExperimentConfig;
use crate::output::Staging;
use crate::CliError;

fn load_params<T: Real>(path: &Path, data: &Dataset<T>) -> Result<ModelParams<T>, CliError> {
    let params = Checkpoint::<T>::load(path)?.params;
    if params.input_dim() != data.dim() {
        return Err(CliError::Config(format!(
            "{}: model expects {} inputs, dataset has {}",
            path.display(),
            params.input_dim(),
            data.dim()
        )));
    }
    Ok(params)
}

fn cap<T: Real>(data: &Dataset<T>, max: Option<usize>) -> Result<Dataset<T>, CliError> {
    match max {
        Some(m) if m < data.len() => {
            let idx: Vec<usize> = (0..m).collect();
            Ok(data.subset(&idx, data.name.clone())?)
        }
        _ => Ok(data.clone()),
    }
}

fn checkpoint_json<T: Real>(
    cfg: &ExperimentConfig,
    spec: &iseat_core::model::ModelSpec,
    epoch: usize,
    p: &ModelParams<T>,
) -> Result<String, CliError> {
    Ok(Checkpoint::new(spec.clone(), cfg.run.seed, epoch, p.clone()).to_json()?)
}

/// Configuration as it was actually used, without the output location.
pub fn resolved_json(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = None;
    let mut s = serde_json::to_string_pretty(&c).expect("config serialises");
    s.push('\n');
    s
}

pub fn train<T: Real>(cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let (train, test) = cfg.datasets::<T>()?;
    let init = match &cfg.init_checkpoint {
        Some(p) => Some(load_params(p, &train)?),
        None => None,
    };
    let stage = Staging::begin(out)?;
    let res = run(&cfg.run, &train, &test, init)?;
    stage.write("metrics.csv", metrics_csv(&res.metrics))?;
    stage.write(
        "checkpoint_best.json",
        checkpoint_json(cfg, &res.spec, res.best_epoch, &res.best_params)?,
    )?;
    stage.write(
        "checkpoint_final.json",
        checkpoint_json(cfg, &res.spec, cfg.run.epochs, &res.final_params)?,
    )?;
    if let Some(swa) = &res.swa {
        stage.write(
            "checkpoint_swa.json",
            checkpoint_json(cfg, &res.spec, cfg.run.epochs, swa)?,
        )?;
    }
    stage.write("config.resolved.json", resolved_json(cfg))?;
    let dest = stage.commit()?;
    let last = res.metrics.last().expect("epochs >= 1");
    Ok(format!(
        "{}: {} epochs, final clean {:.4} robust {:.4}, best epoch {}; wrote {}",
        cfg.label,
        last.epoch,
        last.eval_clean_acc,
        last.eval_robust_acc,
        res.best_epoch,
        dest.display()
    ))
}

pub fn attack<T: Real>(cfg: &ExperimentConfig, ck: &Path, out: &Path) -> Result<String, CliError> {
    let (train, test) = cfg.datasets::<T>()?;
    let params = load_params(ck, &test)?;
    let a = &cfg.run.eval_attack;
    let mut csv = String::from("split,samples,epsilon,steps,clean_acc,robust_acc\n");
    let mut summary = Vec::new();
    for (name, data) in [("train", &train), ("held_out", &test)] {
        let (c, r) = evaluate(&params, data, a)?;
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            data.len(),
            fmt_sig(a.epsilon, 9),
            a.steps,
            fmt_sig(c, 9),
            fmt_sig(r, 9)
        ));
        summary.push(format!("{name}: clean {c:.4} robust {r:.4}"));
    }
    let stage = Staging::begin(out)?;
    stage.write("attack.csv", csv)?;
    stage.commit()?;
    Ok(summary.join("; "))
}

/// Per-sample attack directions under the evaluation attack.
fn directions<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    a: &AttackConfig,
) -> Result<Tensor<T>, CliError> {
    let mut rows = Vec::with_capacity(data.len() * data.dim());
    for (c, start) in (0..data.len()).step_by(512).enumerate() {
        let idx: Vec<usize> = (start..(start + 512).min(data.len())).collect();
        let b = data.batch(&idx);
        let d = pgd(
            params,
            &b.inputs,
            &b.labels,
            &a.with_seed(mix_seed(a.seed, &[c as u64])),
        )?
        .delta;
        rows.extend_from_slice(d.data());
    }
    Ok(Tensor::new(vec![data.len(), data.dim()], rows)?)
}

pub fn margin<T: Real>(cfg: &ExperimentConfig, ck: &Path, out: &Path) -> Result<String, CliError> {
    let (_, test) = cfg.datasets::<T>()?;
    let test = cap(&test, cfg.analysis.max_samples)?;
    let params = load_params(ck, &test)?;
    let delta = directions(&params, &test, &cfg.run.eval_attack)?;
    let mcfg = &cfg.analysis.margin;
    let mut rows = String::from("index,label,mu,direction_norm\n");
    let mut found = Vec::new();
    let mut defined = 0usize;
    for i in 0..test.len() {
        let x = Tensor::vector(test.inputs().row(i).to_vec());
        let d = Tensor::vector(delta.row(i).to_vec());
        let y = test.labels()[i];
        if d.norm_l2() == T::zero() {
            rows.push_str(&format!("{i},{y},NA,0\n"));
            continue;
        }
        let r = margin_search(&params, &x, &d, mcfg)?;
        defined += 1;
        let mu = match r.mu {
            Margin::At(v) => {
                found.push(v);
                fmt_sig(v, 9)
            }
            Margin::Max => "MAX".to_string(),
        };
        rows.push_str(&format!("{i},{y},{mu},{}\n", fmt_sig(r.direction_norm, 9)));
    }
    let mut hist = String::from("mu,cumulative_fraction\n");
    if defined > 0 {
        for point in mcfg.lattice() {
            let k = found.iter().filter(|&&v| v <= point).count();
            hist.push_str(&format!(
                "{},{}\n",
                fmt_sig(point, 9),
                fmt_sig(k as f64 / defined as f64, 9)
            ));
        }
        hist.push_str("MAX,1\n");
    }
    let stage = Staging::begin(out)?;
    stage.write("margins.csv", rows)?;
    stage.write("margin_cdf.csv", hist)?;
    stage.commit()?;
    Ok(format!(
        "{} samples, {} flipped within {}, {} at the sentinel",
        defined,
        found.len(),
        mcfg.max,
        defined - found.len()
    ))
}

pub fn landscape<T: Real>(
    cfg: &ExperimentConfig,
    ck: &Path,
    out: &Path,
) -> Result<String, CliError> {
    let (_, test) = cfg.datasets::<T>()?;
    let params = load_params(ck, &test)?;
    let a = &cfg.analysis;
    let i = a.landscape_sample;
    if i >= test.len() {
        return Err(CliError::Config(format!(
            "analysis.landscape_sample: {i} is outside the {} held-out samples",
            test.len()
        )));
    }
    let b = test.batch(&[i]);
    let delta = pgd(&params, &b.inputs, &b.labels, &cfg.run.eval_attack)?.delta;
    let x = Tensor::vector(b.inputs.row(0).to_vec());
    let d = Tensor::vector(delta.row(0).to_vec());
    let eps = cfg.run.eval_attack.epsilon;
    let grid = loss_landscape(
        &params,
        &x,
        b.labels[0],
        &d,
        &a.alphas,
        &a.betas,
        eps,
        a.landscape_seed,
    )?;
    let meta = json!({
        "sample": i,
        "label": b.labels[0],
        "epsilon": eps,
        "seed": a.landscape_seed,
        "budget_alpha": grid.budget_alpha,
        "budget_row_alpha": grid.alphas[grid.budget_row()],
    });
    let stage = Staging::begin(out)?;
    stage.write("landscape.csv", grid.to_csv())?;
    stage.write(
        "landscape_meta.json",
        format!("{}\n", serde_json::to_string_pretty(&meta).expect("json")),
    )?;
    stage.commit()?;
    Ok(format!(
        "{} x {} grid for sample {i}; attack point at alpha {:.4}",
        grid.alphas.len(),
        grid.betas.len(),
        grid.budget_alpha
    ))
}

fn stats_csv(s: &AvStats) -> String {
    let vals: Vec<String> = s.values().iter().map(|&v| fmt_sig(v, 9)).collect();
    format!("{}\n{}\n", AvStats::COLUMNS.join(","), vals.join(","))
}

pub fn analyze<T: Real>(cfg: &ExperimentConfig, ck: &Path, out: &Path) -> Result<String, CliError> {
    let (train, _) = cfg.datasets::<T>()?;
    let train = cap(&train, cfg.analysis.max_samples)?;
    let params = load_params(ck, &train)?;
    let attack = cfg.run.attack.with_seed(mix_seed(cfg.run.seed, &[0xa5a1]));
    let avs = vulnerabilities(&params, &train, &attack, None)?;
    let stats = av_stats(&avs)?;
    let mut values = String::from("index,label,av\n");
    for (i, (v, y)) in avs.iter().zip(train.labels()).enumerate() {
        values.push_str(&format!("{i},{y},{}\n", fmt_sig(*v, 9)));
    }
    let stage = Staging::begin(out)?;
    stage.write("av_stats.csv", stats_csv(&stats))?;
    stage.write("av_values.csv", values)?;
    stage.commit()?;
    Ok(format!(
        "{} samples: av_sd {:.4}, top10 {:.4}, bottom10 {:.4}, >=1 {:.3}, <=0 {:.3}",
        avs.len(),
        stats.av_sd,
        stats.av_top10,
        stats.av_bot10,
        stats.frac_ge_1,
        stats.frac_le_0
    ))
}

pub const COMPARE_COLUMNS: [&str; 9] = [
    "label",
    "method",
    "runs",
    "eval_clean_acc_mean",
    "eval_clean_acc_sd",
    "eval_robust_acc_mean",
    "eval_robust_acc_sd",
    "av_sd_mean",
    "av_sd_sd",
];

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final-epoch metrics of one training run.
pub fn train_metrics(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>, CliError> {
    fn go<T: Real>(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>, CliError> {
        let (train, test) = cfg.datasets::<T>()?;
        let init = match &cfg.init_checkpoint {
            Some(p) => Some(load_params(p, &train)?),
            None => None,
        };
        Ok(run(&cfg.run, &train, &test, init)?.metrics)
    }
    match cfg.run.precision {
        iseat_core::nd::Precision::F32 => go::<f32>(cfg),
        iseat_core::nd::Precision::F64 => go::<f64>(cfg),
    }
}

/// Runs every `(config, seed)` pair on up to `threads` workers; output order follows the input.
pub fn compare(
    configs: &[ExperimentConfig],
    seeds: &[Option<u64>],
    threads: usize,
    out: &Path,
) -> Result<String, CliError> {
    let jobs: Vec<(usize, ExperimentConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            seeds.iter().map(move |s| {
                let mut c = c.clone();
                if let Some(s) = s {
                    c.run.seed = *s;
                }
                (i, c)
            })
        })
        .collect();
    type Slot = Option<Result<Vec<MetricsRecord>, CliError>>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= jobs.len() {
                    break;
                }
                let r = train_metrics(&jobs[k].1);
                results.lock().expect("no panics while holding the lock")[k] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let stage = Staging::begin(out)?;
    let mut finals: Vec<Vec<MetricsRecord>> = vec![Vec::new(); configs.len()];
    for ((ci, cfg), r) in jobs.iter().zip(results) {
        let metrics = r.expect("every job ran")?;
        stage.write(
            &format!("runs/{:02}-{}-seed{}.csv", ci, cfg.label, cfg.run.seed),
            metrics_csv(&metrics),
        )?;
        finals[*ci].push(metrics.last().expect("epochs >= 1").clone());
    }
    let mut csv = COMPARE_COLUMNS.join(",");
    csv.push('\n');
    for (cfg, rows) in configs.iter().zip(&finals) {
        let pick = |f: fn(&MetricsRecord) -> f64| mean_sd(&rows.iter().map(f).collect::<Vec<_>>());
        let (cm, cs) = pick(|m| m.eval_clean_acc);
        let (rm, rs) = pick(|m| m.eval_robust_acc);
        let (am, asd) = pick(|m| m.av.av_sd);
        let cells: Vec<String> = [cm, cs, rm, rs, am, asd]
            .iter()
            .map(|&v| fmt_sig(v, 9))
            .collect();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            cfg.label,
            cfg.run.method.as_str(),
            rows.len(),
            cells.join(",")
        ));
    }
    stage.write("compare.csv", &csv)?;
    let dest = stage.commit()?;
    Ok(format!(
        "{} configs x {} seeds; wrote {}",
        configs.len(),
        seeds.len(),
        dest.display()
    ))
}

pub fn default_out(cfg: &ExperimentConfig, out: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    out.cloned()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))
}
