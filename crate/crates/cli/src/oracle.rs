//! Random-tile comparison of the FCM and AAM engines against the nodal solve.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use xbar_core::circuit::{aam_convert_with, fcm_convert, solve_nodal_oracle, AamPaths, ConductanceTile, CrossbarConfig, FcmOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckOptions {
    pub trials: usize,
    /// Square tile sizes, used in turn. Empty means the configured array size.
    pub sizes: Vec<usize>,
    /// Largest FCM relative column-current error that passes.
    pub tol: f64,
    pub fcm: FcmOptions,
    pub aam: AamPaths,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub size: usize,
    pub fcm_max_rel_error: f64,
    pub fcm_mean_rel_error: f64,
    pub aam_max_rel_error: f64,
    pub aam_mean_rel_error: f64,
    pub oracle_seconds: f64,
    pub fcm_seconds: f64,
    pub aam_seconds: f64,
}

/// The tile and drive of the trial with the largest FCM error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstTile {
    pub trial: usize,
    pub config: CrossbarConfig,
    pub v_in: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub i_oracle: Vec<f64>,
    pub i_fcm: Vec<f64>,
    pub fcm_max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub trials: Vec<TrialResult>,
    pub worst: WorstTile,
    pub tol: f64,
}

impl OracleReport {
    fn fold(&self, f: impl Fn(&TrialResult) -> f64) -> f64 {
        self.trials.iter().map(f).fold(0.0, f64::max)
    }

    fn mean(&self, f: impl Fn(&TrialResult) -> f64) -> f64 {
        self.trials.iter().map(f).sum::<f64>() / self.trials.len() as f64
    }

    fn total(&self, f: impl Fn(&TrialResult) -> f64) -> f64 {
        self.trials.iter().map(f).sum()
    }

    pub fn fcm_max(&self) -> f64 {
        self.fold(|t| t.fcm_max_rel_error)
    }

    pub fn fcm_mean(&self) -> f64 {
        self.mean(|t| t.fcm_mean_rel_error)
    }

    pub fn aam_max(&self) -> f64 {
        self.fold(|t| t.aam_max_rel_error)
    }

    pub fn aam_mean(&self) -> f64 {
        self.mean(|t| t.aam_mean_rel_error)
    }

    /// Oracle time over FCM time, summed over all trials.
    pub fn fcm_speedup(&self) -> f64 {
        self.total(|t| t.oracle_seconds) / self.total(|t| t.fcm_seconds)
    }

    pub fn aam_speedup(&self) -> f64 {
        self.total(|t| t.oracle_seconds) / self.total(|t| t.aam_seconds)
    }

    pub fn passed(&self) -> bool {
        self.fcm_max() <= self.tol
    }
}

fn rel_errors(got: &Array1<f64>, want: &Array1<f64>) -> (f64, f64) {
    let errs: Vec<f64> = got.iter().zip(want).map(|(g, w)| (g - w).abs() / w.abs()).collect();
    let max = errs.iter().fold(0.0f64, |m, &e| m.max(if e.is_nan() { f64::INFINITY } else { e }));
    (max, errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Draws `trials` tiles with conductances uniform in `[g_min, g_max]` and
/// inputs uniform in `[0, v_fs]`. FCM is calibrated with the very drive it
/// is tested on, so its currents should match the oracle up to the
/// relaxation tolerance.
pub fn oracle_check(base: &CrossbarConfig, opts: &OracleCheckOptions) -> Result<OracleReport> {
    if opts.trials == 0 {
        bail!("trials must be >= 1");
    }
    let sizes = if opts.sizes.is_empty() { vec![base.rows.min(base.cols)] } else { opts.sizes.clone() };
    if sizes.contains(&0) {
        bail!("tile sizes must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trials = Vec::with_capacity(opts.trials);
    let mut worst: Option<WorstTile> = None;
    for trial in 0..opts.trials {
        let n = sizes[trial % sizes.len()];
        let cfg = CrossbarConfig { rows: n, cols: n, ..*base };
        let g = Array2::from_shape_fn((n, n), |_| rng.random_range(cfg.g_min..=cfg.g_max));
        let v = Array1::from_shape_fn(n, |_| rng.random_range(0.0..=cfg.v_fs));
        let tile = ConductanceTile::new(cfg, g)?;

        let t = Instant::now();
        let want = solve_nodal_oracle(&tile, v.view())?.i_col;
        let oracle_seconds = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let fcm = fcm_convert(&tile, v.view(), opts.fcm)?;
        let fcm_seconds = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let aam = aam_convert_with(&tile, opts.aam);
        let aam_seconds = t.elapsed().as_secs_f64();

        let i_fcm = fcm.column_currents(v.view())?;
        let (fcm_max, fcm_mean) = rel_errors(&i_fcm, &want);
        let (aam_max, aam_mean) = rel_errors(&aam.column_currents(v.view())?, &want);
        if worst.as_ref().is_none_or(|w| fcm_max > w.fcm_max_rel_error) {
            worst = Some(WorstTile {
                trial,
                config: cfg,
                v_in: v.to_vec(),
                g: tile.g().rows().into_iter().map(|r| r.to_vec()).collect(),
                i_oracle: want.to_vec(),
                i_fcm: i_fcm.to_vec(),
                fcm_max_rel_error: fcm_max,
            });
        }
        trials.push(TrialResult {
            trial,
            size: n,
            fcm_max_rel_error: fcm_max,
            fcm_mean_rel_error: fcm_mean,
            aam_max_rel_error: aam_max,
            aam_mean_rel_error: aam_mean,
            oracle_seconds,
            fcm_seconds,
            aam_seconds,
        });
    }
    Ok(OracleReport { trials, worst: worst.expect("at least one trial"), tol: opts.tol })
}

/// Writes `oracle_check.csv`; on a breach also `oracle_worst_tile.json`,
/// whose path is returned.
pub fn write_report(report: &OracleReport, out: &Path) -> Result<Option<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut w = csv::Writer::from_path(out.join("oracle_check.csv"))?;
    for t in &report.trials {
        w.serialize(t)?;
    }
    w.flush()?;
    if report.passed() {
        return Ok(None);
    }
    let path = out.join("oracle_worst_tile.json");
    fs::write(&path, serde_json::to_string_pretty(&report.worst)? + "\n")?;
    Ok(Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(trials: usize) -> OracleCheckOptions {
        OracleCheckOptions {
            trials,
            sizes: vec![4, 6],
            tol: 1e-3,
            fcm: FcmOptions::default(),
            aam: AamPaths::Shared,
            seed: 1,
        }
    }

    #[test]
    fn small_tiles_pass() {
        let r = oracle_check(&CrossbarConfig::default(), &opts(4)).unwrap();
        assert_eq!(r.trials.iter().map(|t| t.size).collect::<Vec<_>>(), [4, 6, 4, 6]);
        assert!(r.passed(), "fcm max {}", r.fcm_max());
        assert!(r.aam_max() < 0.01);
    }

    #[test]
    fn zero_trials_is_an_error() {
        assert!(oracle_check(&CrossbarConfig::default(), &opts(0)).is_err());
    }

    #[test]
    fn breach_writes_worst_tile() {
        let mut o = opts(2);
        o.tol = 0.0;
        let r = oracle_check(&CrossbarConfig::default(), &o).unwrap();
        assert!(!r.passed());
        let dir = tempfile::tempdir().unwrap();
        let path = write_report(&r, dir.path()).unwrap().unwrap();
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(json["g"].as_array().unwrap().len(), json["config"]["rows"].as_u64().unwrap() as usize);
    }
}
