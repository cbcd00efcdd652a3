//! Exact nodal analysis of the full crossbar network.
//!
//! Every cross-point contributes a top (row wire) and a bottom (column wire)
//! node. Unknowns are numbered cell by cell, row-major, top before bottom, so
//! the conductance matrix is banded with half-bandwidth `2 * cols` and a
//! banded Cholesky factorisation solves it directly.

use ndarray::{Array1, Array2, ArrayView1};

use super::{check_inputs, ConductanceTile};
use crate::error::{Error, Result};

/// Node voltages and sensed column currents of a solved tile.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalSolution {
    /// Row-wire voltage at each cross-point.
    pub v_top: Array2<f64>,
    /// Column-wire voltage at each cross-point.
    pub v_bot: Array2<f64>,
    /// Current delivered into each column sense node.
    pub i_col: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Fixed(f64),
    Unknown(usize),
}

/// Solves the complete resistive network of `tile` driven by `v_in`.
pub fn solve_nodal_oracle(tile: &ConductanceTile, v_in: ArrayView1<f64>) -> Result<NodalSolution> {
    check_inputs(tile, v_in, "v_in")?;
    let cfg = tile.config();
    if let Some(bad) = v_in.iter().find(|&&v| v < 0.0 || v > cfg.v_fs) {
        return Err(Error::arg(format!("input voltage {bad} outside [0, {}]", cfg.v_fs)));
    }
    let g = tile.g();
    if g.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateCircuit("every device conductance is zero".into()));
    }
    let (rows, cols) = g.dim();

    // Node numbering, with zero-resistance wires collapsed.
    let mut n = 0usize;
    let mut fresh = || {
        n += 1;
        n - 1
    };
    let mut row_shared: Vec<Option<usize>> = vec![None; rows];
    let mut col_shared: Vec<Option<usize>> = vec![None; cols];
    let mut top = vec![Node::Fixed(0.0); rows * cols];
    let mut bot = vec![Node::Fixed(0.0); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            top[i * cols + j] = if cfg.r_row > 0.0 {
                Node::Unknown(fresh())
            } else if cfg.r_source > 0.0 {
                Node::Unknown(*row_shared[i].get_or_insert_with(&mut fresh))
            } else {
                Node::Fixed(v_in[i])
            };
            bot[i * cols + j] = if cfg.r_col > 0.0 {
                Node::Unknown(fresh())
            } else if cfg.r_sense > 0.0 {
                Node::Unknown(*col_shared[j].get_or_insert_with(&mut fresh))
            } else {
                Node::Fixed(0.0)
            };
        }
    }

    let mut stamps: Vec<(Node, Node, f64)> = Vec::with_capacity(4 * rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            stamps.push((top[i * cols + j], bot[i * cols + j], g[[i, j]]));
        }
    }
    if cfg.r_row > 0.0 {
        for i in 0..rows {
            stamps.push((top[i * cols], Node::Fixed(v_in[i]), 1.0 / (cfg.r_source + cfg.r_row)));
            for j in 0..cols - 1 {
                stamps.push((top[i * cols + j], top[i * cols + j + 1], 1.0 / cfg.r_row));
            }
        }
    } else if cfg.r_source > 0.0 {
        for i in 0..rows {
            stamps.push((top[i * cols], Node::Fixed(v_in[i]), 1.0 / cfg.r_source));
        }
    }
    if cfg.r_col > 0.0 {
        for j in 0..cols {
            stamps.push((bot[(rows - 1) * cols + j], Node::Fixed(0.0), 1.0 / (cfg.r_sense + cfg.r_col)));
            for i in 0..rows - 1 {
                stamps.push((bot[i * cols + j], bot[(i + 1) * cols + j], 1.0 / cfg.r_col));
            }
        }
    } else if cfg.r_sense > 0.0 {
        for j in 0..cols {
            stamps.push((bot[j], Node::Fixed(0.0), 1.0 / cfg.r_sense));
        }
    }

    let bw = stamps
        .iter()
        .filter_map(|s| match (s.0, s.1) {
            (Node::Unknown(a), Node::Unknown(b)) => Some(a.abs_diff(b)),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let mut sys = BandedSpd::zeros(n, bw);
    let mut rhs = vec![0.0; n];
    for &(a, b, gab) in &stamps {
        if gab == 0.0 {
            continue;
        }
        match (a, b) {
            (Node::Unknown(a), Node::Unknown(b)) => {
                if a != b {
                    sys.add(a, a, gab);
                    sys.add(b, b, gab);
                    sys.add(a.max(b), a.min(b), -gab);
                }
            }
            (Node::Unknown(a), Node::Fixed(v)) | (Node::Fixed(v), Node::Unknown(a)) => {
                sys.add(a, a, gab);
                rhs[a] += gab * v;
            }
            (Node::Fixed(_), Node::Fixed(_)) => {}
        }
    }
    let x = sys.solve(rhs)?;

    let value = |node: Node| match node {
        Node::Fixed(v) => v,
        Node::Unknown(k) => x[k],
    };
    let v_top = Array2::from_shape_fn((rows, cols), |(i, j)| value(top[i * cols + j]));
    let v_bot = Array2::from_shape_fn((rows, cols), |(i, j)| value(bot[i * cols + j]));
    let mut i_col = Array1::zeros(cols);
    for i in 0..rows {
        for j in 0..cols {
            i_col[j] += g[[i, j]] * (v_top[[i, j]] - v_bot[[i, j]]);
        }
    }
    Ok(NodalSolution { v_top, v_bot, i_col })
}

/// Lower band of a symmetric positive definite matrix, factorised in place.
struct BandedSpd {
    n: usize,
    bw: usize,
    /// Entry `(i, i - d)` lives at `i * (bw + 1) + d`.
    a: Vec<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, a: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.a[k] += v;
    }

    fn solve(mut self, mut b: Vec<f64>) -> Result<Vec<f64>> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut sum = self.a[self.idx(i, j)];
                for k in lo.max(j.saturating_sub(bw))..j {
                    sum -= self.a[self.idx(i, k)] * self.a[self.idx(j, k)];
                }
                if i == j {
                    let scale = self.a[self.idx(i, i)].abs();
                    if !(sum > 1e-14 * scale) || !sum.is_finite() {
                        return Err(Error::DegenerateCircuit(format!(
                            "nodal matrix is singular at unknown {i}"
                        )));
                    }
                    let k = self.idx(i, i);
                    self.a[k] = sum.sqrt();
                } else {
                    let k = self.idx(i, j);
                    self.a[k] = sum / self.a[self.idx(j, j)];
                }
            }
        }
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.a[self.idx(i, k)] * b[k];
            }
            b[i] = s / self.a[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n.min(i + bw + 1) {
                s -= self.a[self.idx(k, i)] * b[k];
            }
            b[i] = s / self.a[self.idx(i, i)];
        }
        Ok(b)
    }
}
