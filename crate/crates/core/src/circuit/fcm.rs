//! Fast crossbar model: alternating row-ladder / column-ladder relaxation.
//!
//! Each sweep solves every row wire with the column-wire voltages frozen, then
//! every column wire with the fresh row-wire voltages. At the fixed point the
//! node voltages satisfy KCL everywhere, i.e. they equal the exact nodal
//! solution. The per-device effective conductance is the device current
//! divided by the applied row voltage.

use ndarray::{Array2, ArrayView1};

use super::ladder::Ladder;
use super::{check_inputs, ConductanceTile};
use crate::error::{Error, Result};

pub const DEFAULT_FCM_TOL: f64 = 1e-6;
pub const DEFAULT_FCM_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcmOptions {
    /// Relative node-voltage change (w.r.t. the largest input) that ends the sweep.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FcmOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_FCM_TOL, max_iter: DEFAULT_FCM_MAX_ITER }
    }
}

/// Converts an ideal tile into the effective conductances seen under the
/// calibration drive `v_cal`.
///
/// Rows driven at 0 V carry no current, so their effective conductance is
/// taken from a second solve with those rows raised to `v_fs`.
pub fn fcm_convert(tile: &ConductanceTile, v_cal: ArrayView1<f64>, opts: FcmOptions) -> Result<ConductanceTile> {
    check_inputs(tile, v_cal, "v_cal")?;
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::arg(format!("fcm tolerance must be > 0, got {}", opts.tol)));
    }
    if opts.max_iter == 0 {
        return Err(Error::arg("fcm max_iter must be >= 1"));
    }
    let cfg = *tile.config();
    if let Some(bad) = v_cal.iter().find(|&&v| v < 0.0) {
        return Err(Error::arg(format!("calibration voltage {bad} is negative")));
    }
    if !cfg.has_parasitics() {
        return Ok(tile.clone());
    }

    let mut out = effective_conductance(tile, v_cal, opts)?;
    let zero_rows: Vec<usize> = (0..tile.rows()).filter(|&i| v_cal[i] == 0.0).collect();
    if !zero_rows.is_empty() {
        let mut lifted = v_cal.to_owned();
        for &i in &zero_rows {
            lifted[i] = cfg.v_fs;
        }
        let lifted_g = effective_conductance(tile, lifted.view(), opts)?;
        for &i in &zero_rows {
            out.row_mut(i).assign(&lifted_g.row(i));
        }
    }
    Ok(ConductanceTile::from_parts_unchecked(cfg, out))
}

/// Effective conductance for rows with non-zero drive; zero-drive rows are left at 0.
fn effective_conductance(tile: &ConductanceTile, v_cal: ArrayView1<f64>, opts: FcmOptions) -> Result<Array2<f64>> {
    let (v_top, v_bot) = relax(tile, v_cal, opts)?;
    let g = tile.g();
    let mut out = Array2::zeros(g.dim());
    for ((i, j), o) in out.indexed_iter_mut() {
        if v_cal[i] != 0.0 {
            *o = g[[i, j]] * (v_top[[i, j]] - v_bot[[i, j]]) / v_cal[i];
        }
    }
    Ok(out)
}

/// Row/column ladder relaxation to the fixed point. Returns `(v_top, v_bot)`.
pub(crate) fn relax(tile: &ConductanceTile, v_in: ArrayView1<f64>, opts: FcmOptions) -> Result<(Array2<f64>, Array2<f64>)> {
    let cfg = tile.config();
    let g = tile.g();
    let (rows, cols) = g.dim();
    let row_ladder = Ladder::row(cfg);
    let col_ladder = Ladder::column(cfg);

    // Row-major top voltages, column-major (foot first) bottom voltages.
    let mut top = vec![0.0; rows * cols];
    for i in 0..rows {
        top[i * cols..(i + 1) * cols].fill(v_in[i]);
    }
    let mut bot = vec![0.0; rows * cols];
    let g_rows: Vec<f64> = g.iter().copied().collect();
    let mut g_cols = vec![0.0; rows * cols];
    for j in 0..cols {
        for k in 0..rows {
            g_cols[j * rows + k] = g[[rows - 1 - k, j]];
        }
    }

    let scale = v_in.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok((Array2::zeros((rows, cols)), Array2::zeros((rows, cols))));
    }
    let n = rows.max(cols);
    let mut scratch = vec![0.0; 2 * n];
    let mut u = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let mut delta = 0.0f64;
        for i in 0..rows {
            for j in 0..cols {
                u[j] = bot[j * rows + (rows - 1 - i)];
            }
            let gr = &g_rows[i * cols..(i + 1) * cols];
            row_ladder.solve(v_in[i], gr, &u[..cols], &mut next[..cols], &mut scratch);
            let cur = &mut top[i * cols..(i + 1) * cols];
            for j in 0..cols {
                delta = delta.max((next[j] - cur[j]).abs());
            }
            cur.copy_from_slice(&next[..cols]);
        }
        for j in 0..cols {
            for k in 0..rows {
                u[k] = top[(rows - 1 - k) * cols + j];
            }
            let gc = &g_cols[j * rows..(j + 1) * rows];
            col_ladder.solve(0.0, gc, &u[..rows], &mut next[..rows], &mut scratch);
            let cur = &mut bot[j * rows..(j + 1) * rows];
            for k in 0..rows {
                delta = delta.max((next[k] - cur[k]).abs());
            }
            cur.copy_from_slice(&next[..rows]);
        }
        residual = delta / scale;
        if residual <= opts.tol {
            let v_top = Array2::from_shape_vec((rows, cols), top).expect("shape");
            let v_bot = Array2::from_shape_fn((rows, cols), |(i, j)| bot[j * rows + (rows - 1 - i)]);
            return Ok((v_top, v_bot));
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iter, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{solve_nodal_oracle, CrossbarConfig};
    use ndarray::{array, Array1};

    #[test]
    fn zero_parasitics_is_identity() {
        let cfg = CrossbarConfig::default().without_parasitics();
        let t = ConductanceTile::new(cfg, array![[1e-6, 7e-6], [3e-6, 1e-5]]).unwrap();
        let out = fcm_convert(&t, array![1.0, 1.0].view(), FcmOptions::default()).unwrap();
        assert_eq!(out.g(), t.g());
    }

    #[test]
    fn relaxation_matches_oracle_tightly() {
        let cfg = CrossbarConfig { rows: 8, cols: 8, r_source: 10.0, r_sense: 5.0, ..Default::default() };
        let g = Array2::from_shape_fn((8, 8), |(i, j)| 1e-6 + 1e-6 * ((i * 7 + j * 3) % 10) as f64);
        let t = ConductanceTile::new(cfg, g).unwrap();
        let v = Array1::from_shape_fn(8, |i| 0.1 + 0.1 * i as f64);
        let exact = solve_nodal_oracle(&t, v.view()).unwrap();
        let opts = FcmOptions { tol: 1e-13, max_iter: 10_000 };
        let (top, bot) = relax(&t, v.view(), opts).unwrap();
        for (a, b) in top.iter().zip(exact.v_top.iter()).chain(bot.iter().zip(exact.v_bot.iter())) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn zero_calibration_rows_use_full_scale() {
        let cfg = CrossbarConfig { rows: 4, cols: 4, ..Default::default() };
        let t = ConductanceTile::uniform(cfg, 4, 4, 1e-5).unwrap();
        let full = fcm_convert(&t, Array1::from_elem(4, 1.0).view(), FcmOptions::default()).unwrap();
        let part = fcm_convert(&t, array![1.0, 0.0, 1.0, 1.0].view(), FcmOptions::default()).unwrap();
        for j in 0..4 {
            assert!((part.g()[[1, j]] - full.g()[[1, j]]).abs() < 1e-15);
        }
    }

    #[test]
    fn reports_non_convergence_and_bad_args() {
        let cfg = CrossbarConfig { rows: 16, cols: 16, ..Default::default() };
        let t = ConductanceTile::uniform(cfg, 16, 16, 1e-2).unwrap();
        let v = Array1::from_elem(16, 1.0);
        let err = fcm_convert(&t, v.view(), FcmOptions { tol: 1e-12, max_iter: 2 }).unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 2, residual } if residual > 1e-12));
        assert!(fcm_convert(&t, v.view(), FcmOptions { tol: 0.0, max_iter: 10 }).is_err());
        assert!(fcm_convert(&t, v.slice(ndarray::s![..3]), FcmOptions::default()).is_err());
    }
}
