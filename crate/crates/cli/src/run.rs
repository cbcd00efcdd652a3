//! Training runs and parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use xbar_core::nn::{blobs, load_csv, load_idx, train_epoch, Dataset, EpochMetrics, Model, TrainState};

use crate::config::{DatasetConfig, ExperimentConfig};

/// Train and test split of an experiment.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &DatasetConfig) -> Result<Data> {
    let (train, test) = match cfg {
        DatasetConfig::Blobs { train_per_class, test_per_class, .. } => {
            let spec = cfg.blob_spec().expect("blob dataset");
            (blobs(&spec, *train_per_class, 0)?, blobs(&spec, *test_per_class, 1)?)
        }
        DatasetConfig::Csv { train, test, scale, shape } => {
            let shape = shape.as_deref();
            (load_csv(train, shape, *scale)?, load_csv(test, shape, *scale)?)
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, scale, train_limit, test_limit } => {
            let train = load_idx(train_images, train_labels, *scale)?;
            let test = load_idx(test_images, test_labels, *scale)?;
            (train.head(train_limit.unwrap_or(usize::MAX)), test.head(test_limit.unwrap_or(usize::MAX)))
        }
    };
    if train.sample_shape() != test.sample_shape() {
        bail!("train samples {:?} and test samples {:?} differ in shape", train.sample_shape(), test.sample_shape());
    }
    Ok(Data { train, test })
}

/// Per-epoch metrics and the verdicts derived from them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub diverged: bool,
    pub converged: bool,
}

/// A run has converged when every epoch loss is finite and the last epoch
/// ends no higher than the first.
pub fn converged(epochs: &[EpochMetrics]) -> bool {
    match (epochs.first(), epochs.last()) {
        (Some(first), Some(last)) => {
            epochs.iter().all(|m| m.train_loss.is_finite()) && last.train_loss <= first.train_loss
        }
        _ => false,
    }
}

/// Trains the configured model for `cfg.epochs` epochs. `on_epoch` sees
/// every epoch as it completes.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Data, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    let backend = cfg.backend();
    let model = Model::build(&cfg.model.layers, data.train.sample_shape(), &backend, cfg.seed)?;
    let mut state = TrainState::new(model, cfg.batch_size, cfg.seed)?;
    state.calib_batches = cfg.calib_batches;
    for _ in 0..cfg.epochs {
        let m = train_epoch(&mut state, &data.train, &data.test)?;
        on_epoch(&m);
    }
    let last = state.log.last().expect("at least one epoch");
    Ok(RunOutcome {
        seed: cfg.seed,
        final_accuracy: last.test_accuracy,
        final_loss: last.train_loss,
        diverged: state.diverged,
        converged: converged(&state.log),
        epochs: state.log,
    })
}

/// Zeroes the timing columns so repeated runs produce identical files.
fn without_timing(m: &EpochMetrics) -> EpochMetrics {
    EpochMetrics { wall_time: 0.0, regen_time: 0.0, ..m.clone() }
}

pub fn write_metrics_csv(path: &Path, epochs: &[EpochMetrics], timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for m in epochs {
        if timing {
            w.serialize(m)?;
        } else {
            w.serialize(without_timing(m))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    final_accuracy: f64,
    final_loss: Option<f64>,
    converged: bool,
    diverged: bool,
    epochs: usize,
    config: &'a ExperimentConfig,
}

/// `train`: writes `metrics.csv` and `summary.json` into `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, timing: bool) -> Result<RunOutcome> {
    let data = load_data(&cfg.dataset)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let outcome = run_experiment(cfg, &data, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  {:.2}s  refreshes {}",
            m.epoch, m.train_loss, m.test_accuracy, m.wall_time, m.engine_refreshes
        )
    })?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.epochs, timing)?;
    let summary = TrainSummary {
        final_accuracy: outcome.final_accuracy,
        final_loss: outcome.final_loss.is_finite().then_some(outcome.final_loss),
        converged: outcome.converged,
        diverged: outcome.diverged,
        epochs: outcome.epochs.len(),
        config: cfg,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Dotted config paths that all receive the same value.
    pub paths: Vec<String>,
    pub values: Vec<String>,
    /// Independent repetitions per value; run `k` adds `k` to `seed` and
    /// `update.seed`.
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub runs: Vec<RunOutcome>,
}

impl SweepPoint {
    pub fn mean_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.final_accuracy).sum::<f64>() / self.runs.len() as f64
    }

    /// Every repetition converged.
    pub fn converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }
}

#[derive(Serialize)]
struct SweepRow<'a> {
    param_value: &'a str,
    final_accuracy: f64,
    converged: bool,
    runs: usize,
    min_accuracy: f64,
    max_accuracy: f64,
}

#[derive(Serialize)]
struct SweepRunRow<'a> {
    param_value: &'a str,
    seed: u64,
    final_accuracy: f64,
    final_loss: f64,
    converged: bool,
    metrics: String,
}

/// Name of the per-run metrics file of one sweep value and seed.
pub fn run_name(value: &str, seed: u64) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("v{clean}_s{seed}")
}

/// Config of repetition `k` for one sweep value.
pub fn sweep_configs(cfg: &ExperimentConfig, sweep: &SweepSpec) -> Result<Vec<(String, Vec<ExperimentConfig>)>> {
    if sweep.paths.is_empty() || sweep.values.is_empty() {
        bail!("a sweep needs at least one parameter path and one value");
    }
    if sweep.seeds == 0 {
        bail!("seeds must be >= 1");
    }
    sweep
        .values
        .iter()
        .map(|value| {
            let base = cfg.with_override(&sweep.paths, value)?;
            let runs = (0..sweep.seeds as u64)
                .map(|k| {
                    let mut c = base.clone();
                    c.seed = cfg.seed + k;
                    c.update.seed = cfg.update.seed + k;
                    c
                })
                .collect();
            Ok((value.clone(), runs))
        })
        .collect()
}

/// Runs every value and seed without writing files. Every value is
/// validated before the first run starts.
pub fn sweep_outcomes(cfg: &ExperimentConfig, sweep: &SweepSpec) -> Result<Vec<SweepPoint>> {
    let plan = sweep_configs(cfg, sweep)?;
    let mut data: Vec<(DatasetConfig, Data)> = Vec::new();
    for (_, runs) in &plan {
        let d = &runs[0].dataset;
        if !data.iter().any(|(c, _)| c == d) {
            data.push((d.clone(), load_data(d)?));
        }
    }
    let jobs: Vec<(usize, &ExperimentConfig)> =
        plan.iter().enumerate().flat_map(|(i, (_, runs))| runs.iter().map(move |c| (i, c))).collect();
    let outcomes: Vec<(usize, RunOutcome)> = jobs
        .par_iter()
        .map(|&(i, c)| {
            let d = &data.iter().find(|(dc, _)| *dc == c.dataset).expect("loaded above").1;
            run_experiment(c, d, |_| {}).map(|o| (i, o))
        })
        .collect::<Result<_>>()?;
    let mut points: Vec<SweepPoint> =
        plan.iter().map(|(value, _)| SweepPoint { value: value.clone(), runs: Vec::new() }).collect();
    for (i, o) in outcomes {
        points[i].runs.push(o);
    }
    Ok(points)
}

/// `sweep`: writes `sweep.csv` (one row per value), `sweep_runs.csv` (one row
/// per run) and the per-run metrics under `runs/`.
pub fn run_sweep(cfg: &ExperimentConfig, sweep: &SweepSpec, out: &Path, timing: bool) -> Result<Vec<SweepPoint>> {
    let points = sweep_outcomes(cfg, sweep)?;
    let runs_dir: PathBuf = out.join("runs");
    fs::create_dir_all(&runs_dir).with_context(|| format!("cannot create {}", runs_dir.display()))?;
    let mut summary = csv::Writer::from_path(out.join("sweep.csv"))?;
    let mut detail = csv::Writer::from_path(out.join("sweep_runs.csv"))?;
    for p in &points {
        let accs = p.runs.iter().map(|r| r.final_accuracy);
        summary.serialize(SweepRow {
            param_value: &p.value,
            final_accuracy: p.mean_accuracy(),
            converged: p.converged(),
            runs: p.runs.len(),
            min_accuracy: accs.clone().fold(f64::INFINITY, f64::min),
            max_accuracy: accs.fold(f64::NEG_INFINITY, f64::max),
        })?;
        for r in &p.runs {
            let name = format!("{}.csv", run_name(&p.value, r.seed));
            write_metrics_csv(&runs_dir.join(&name), &r.epochs, timing)?;
            detail.serialize(SweepRunRow {
                param_value: &p.value,
                seed: r.seed,
                final_accuracy: r.final_accuracy,
                final_loss: r.final_loss,
                converged: r.converged,
                metrics: format!("runs/{name}"),
            })?;
        }
    }
    summary.flush()?;
    detail.flush()?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(losses: &[f64]) -> Vec<EpochMetrics> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| EpochMetrics {
                epoch: i + 1,
                train_loss: l,
                test_accuracy: 0.5,
                wall_time: 0.0,
                engine_refreshes: 0,
                regen_time: 0.0,
                diverged: !l.is_finite(),
            })
            .collect()
    }

    #[test]
    fn convergence_verdict() {
        assert!(converged(&metrics(&[1.0, 0.8, 0.9])));
        assert!(converged(&metrics(&[1.0])));
        assert!(!converged(&metrics(&[1.0, 1.2])));
        assert!(!converged(&metrics(&[1.0, f64::NAN])));
        assert!(!converged(&[]));
    }

    #[test]
    fn run_names_are_file_safe() {
        assert_eq!(run_name("0.5", 3), "v0.5_s3");
        assert_eq!(run_name("[1, 2]", 0), "v_1__2__s0");
    }
}
