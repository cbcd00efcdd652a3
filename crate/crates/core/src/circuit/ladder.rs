//! One wire of the crossbar as a resistive ladder.
//!
//! Node 0 is the node nearest the fixed end (driver or sense foot). Node `k`
//! connects to `k + 1` through `seg_r`, to the fixed end (node 0 only) through
//! `end_r`, and to the opposite wire through its device conductance `g[k]`,
//! whose far terminal is held at `u[k]`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ladder {
    pub end_r: f64,
    pub seg_r: f64,
}

impl Ladder {
    pub fn row(cfg: &super::CrossbarConfig) -> Self {
        Self { end_r: cfg.r_source + cfg.r_row, seg_r: cfg.r_row }
    }

    pub fn column(cfg: &super::CrossbarConfig) -> Self {
        Self { end_r: cfg.r_sense + cfg.r_col, seg_r: cfg.r_col }
    }

    /// Solves the node voltages into `out`. `scratch` must hold at least
    /// `2 * g.len()` values.
    pub fn solve(&self, v_end: f64, g: &[f64], u: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let n = g.len();
        debug_assert!(u.len() == n && out.len() == n && scratch.len() >= 2 * n);

        if self.seg_r == 0.0 {
            // All nodes of the wire collapse into one.
            let v = if self.end_r == 0.0 {
                v_end
            } else {
                let g_end = 1.0 / self.end_r;
                let (mut num, mut den) = (g_end * v_end, g_end);
                for k in 0..n {
                    num += g[k] * u[k];
                    den += g[k];
                }
                num / den
            };
            out.fill(v);
            return;
        }

        // Thomas algorithm on the symmetric tridiagonal KCL system.
        let g_seg = 1.0 / self.seg_r;
        let g_end = 1.0 / self.end_r;
        let (c_prime, d_prime) = scratch.split_at_mut(n);
        let off = -g_seg;
        for k in 0..n {
            let left = if k == 0 { g_end } else { g_seg };
            let right = if k + 1 < n { g_seg } else { 0.0 };
            let diag = g[k] + left + right;
            let mut rhs = g[k] * u[k];
            if k == 0 {
                rhs += g_end * v_end;
            }
            if k == 0 {
                c_prime[0] = off / diag;
                d_prime[0] = rhs / diag;
            } else {
                let den = diag - off * c_prime[k - 1];
                c_prime[k] = off / den;
                d_prime[k] = (rhs - off * d_prime[k - 1]) / den;
            }
        }
        out[n - 1] = d_prime[n - 1];
        for k in (0..n - 1).rev() {
            out[k] = d_prime[k] - c_prime[k] * out[k + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_divider() {
        // v_end --1 Ohm-- node --(1 S)-- 0 V  =>  0.5 V
        let l = Ladder { end_r: 1.0, seg_r: 1.0 };
        let mut out = [0.0];
        let mut s = [0.0; 2];
        l.solve(1.0, &[1.0], &[0.0], &mut out, &mut s);
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_load_passes_through() {
        let l = Ladder { end_r: 3.0, seg_r: 1.0 };
        let mut out = [0.0; 5];
        let mut s = [0.0; 10];
        l.solve(0.7, &[0.0; 5], &[0.0; 5], &mut out, &mut s);
        for v in out {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn ladder_satisfies_kcl() {
        let l = Ladder { end_r: 2.0, seg_r: 0.5 };
        let g = [0.1, 0.3, 0.2, 0.05];
        let u = [0.1, -0.2, 0.0, 0.4];
        let mut v = [0.0; 4];
        let mut s = [0.0; 8];
        l.solve(1.0, &g, &u, &mut v, &mut s);
        for k in 0..4 {
            let mut i = g[k] * (v[k] - u[k]);
            i += if k == 0 { (v[0] - 1.0) / 2.0 } else { (v[k] - v[k - 1]) / 0.5 };
            if k < 3 {
                i += (v[k] - v[k + 1]) / 0.5;
            }
            assert!(i.abs() < 1e-12, "node {k} residual {i}");
        }
    }

    #[test]
    fn merged_wire() {
        let l = Ladder { end_r: 1.0, seg_r: 0.0 };
        let mut out = [0.0; 2];
        let mut s = [0.0; 4];
        l.solve(1.0, &[1.0, 2.0], &[0.0, 0.0], &mut out, &mut s);
        // 1 S from source, 3 S to ground in parallel => 0.25 V
        assert!((out[0] - 0.25).abs() < 1e-15 && out[1] == out[0]);
        let pinned = Ladder { end_r: 0.0, seg_r: 0.0 };
        pinned.solve(0.3, &[1.0, 2.0], &[0.0, 0.0], &mut out, &mut s);
        assert_eq!(out, [0.3, 0.3]);
    }
}
