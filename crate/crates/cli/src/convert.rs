//! Conductance dumps and AAM-versus-FCM error maps for one weight matrix.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{s, Array1, Array2};
use serde::Serialize;
use xbar_core::circuit::{aam_convert_with, fcm_convert, AamPaths, ConductanceTile};
use xbar_core::mapping::map_weights;

use crate::config::{EngineConfig, ExperimentConfig};

/// Reads a numeric CSV matrix (no header) with one row per layer input.
pub fn read_weights(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: malformed CSV", path.display()))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            bail!("{}:{}: expected {} values, got {}", path.display(), line + 1, cols.unwrap_or(0), rec.len());
        }
        for f in rec.iter() {
            let v: f64 = f.parse().with_context(|| format!("{}:{}: bad number {f:?}", path.display(), line + 1))?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = match cols {
        Some(c) if rows > 0 && c > 0 => c,
        _ => bail!("{} holds no weights", path.display()),
    };
    Ok(Array2::from_shape_vec((rows, cols), data)?)
}

/// Stitched conductances of one slice and polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDump {
    pub polarity: &'static str,
    pub slice: usize,
    pub ideal: Array2<f64>,
    pub fcm: Array2<f64>,
    pub aam: Array2<f64>,
    /// `|aam - fcm| / fcm`, elementwise.
    pub error: Array2<f64>,
}

impl SliceDump {
    pub fn max_error(&self) -> f64 {
        self.error.iter().fold(0.0, |m, &e| m.max(e))
    }

    pub fn mean_error(&self) -> f64 {
        self.error.mean().unwrap_or(0.0)
    }
}

fn aam_paths(engine: &EngineConfig) -> AamPaths {
    match *engine {
        EngineConfig::Aam { paths } => paths,
        _ => AamPaths::default(),
    }
}

/// Maps `w` with the config's mapping and converts every tile with FCM
/// (calibrated at full-scale drive) and AAM.
pub fn convert_weights(cfg: &ExperimentConfig, w: &Array2<f64>) -> Result<Vec<SliceDump>> {
    let mapped = map_weights(w.view(), &cfg.mapping, &cfg.crossbar)?;
    let opts = cfg.engine.fcm_options();
    let paths = aam_paths(&cfg.engine);
    let (tr, tc) = (cfg.mapping.tile_rows, cfg.mapping.tile_cols);
    let (gr, gc) = mapped.grid_dims();
    let mut dumps = Vec::new();
    for (polarity, grids) in [("pos", &mapped.tiles().pos), ("neg", &mapped.tiles().neg)] {
        for (slice, grid) in grids.iter().enumerate() {
            let mut ideal = Array2::zeros((gr * tr, gc * tc));
            let mut fcm = ideal.clone();
            let mut aam = ideal.clone();
            for (bi, row) in grid.iter().enumerate() {
                for (bj, tile) in row.iter().enumerate() {
                    let v_cal = Array1::from_elem(tile.rows(), cfg.crossbar.v_fs);
                    let f = fcm_convert(tile, v_cal.view(), opts)?;
                    let a = aam_convert_with(tile, paths);
                    let block = s![bi * tr..(bi + 1) * tr, bj * tc..(bj + 1) * tc];
                    let put = |dst: &mut Array2<f64>, t: &ConductanceTile| dst.slice_mut(block).assign(t.g());
                    put(&mut ideal, tile);
                    put(&mut fcm, &f);
                    put(&mut aam, &a);
                }
            }
            let error = ndarray::Zip::from(&aam).and(&fcm).map_collect(|&a, &f| (a - f).abs() / f);
            dumps.push(SliceDump { polarity, slice, ideal, fcm, aam, error });
        }
    }
    Ok(dumps)
}

pub fn write_grid(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ErrorRow {
    polarity: &'static str,
    slice: usize,
    max_rel_error: f64,
    mean_rel_error: f64,
}

/// `convert`: one CSV grid per quantity, slice and polarity, plus
/// `convert_summary.csv`.
pub fn run_convert(cfg: &ExperimentConfig, weights: &Path, out: &Path) -> Result<Vec<SliceDump>> {
    let w = read_weights(weights)?;
    let dumps = convert_weights(cfg, &w)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut summary = csv::Writer::from_path(out.join("convert_summary.csv"))?;
    for d in &dumps {
        let tag = format!("{}_s{}", d.polarity, d.slice);
        write_grid(&out.join(format!("g_ideal_{tag}.csv")), &d.ideal)?;
        write_grid(&out.join(format!("g_fcm_{tag}.csv")), &d.fcm)?;
        write_grid(&out.join(format!("g_aam_{tag}.csv")), &d.aam)?;
        write_grid(&out.join(format!("error_{tag}.csv")), &d.error)?;
        summary.serialize(ErrorRow {
            polarity: d.polarity,
            slice: d.slice,
            max_rel_error: d.max_error(),
            mean_rel_error: d.mean_error(),
        })?;
    }
    summary.flush()?;
    Ok(dumps)
}
