//! Dense Gibbs kernel with absorbed reference potentials.
//!
//! Stores `k_ij = exp((r_i + s_j - c_ij) / eps)` for reference potentials
//! `r`, `s`. Log-domain reductions against potentials `f` then need only
//! `exp((f_i - r_i)/eps)` per row instead of one exponential per entry. When
//! a potential drifts more than [`ABSORB_LIMIT`] (in units of `eps`) from its
//! reference, the kernel is rebuilt around the current potentials. A column
//! whose scaled sum underflows is recomputed exactly in log space, so the
//! results agree with the plain log-sum-exp formulas at any `eps`.
//!
//! Summation runs over rows in increasing index for column reductions and
//! over columns in increasing index for row reductions.

use crate::geometry::{entropic_cost, Domain, Point2};
use crate::numerics::logsumexp;

/// Largest tolerated `|f - r| / eps` before the kernel is re-absorbed.
pub const ABSORB_LIMIT: f64 = 30.0;

/// Scaled sums below this are recomputed in log space.
const UNDERFLOW_GUARD: f64 = 1e-200;

#[derive(Debug, Clone)]
pub struct GibbsKernel {
    rows: usize,
    cols: usize,
    eps: f64,
    cost: Vec<f64>,
    row_ref: Vec<f64>,
    col_ref: Vec<f64>,
    k: Vec<f64>,
    absorptions: usize,
}

impl GibbsKernel {
    /// Builds the kernel for an arbitrary cost, with zero reference potentials.
    pub fn from_cost(rows: usize, cols: usize, eps: f64, cost: impl Fn(usize, usize) -> f64) -> Self {
        let mut c = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                c.push(cost(i, j));
            }
        }
        let mut kern = Self {
            rows,
            cols,
            eps,
            cost: c,
            row_ref: vec![0.0; rows],
            col_ref: vec![0.0; cols],
            k: vec![0.0; rows * cols],
            absorptions: 0,
        };
        kern.rebuild();
        kern.absorptions = 0;
        kern
    }

    /// Kernel of the image-summed periodic cost between two point sets.
    pub fn between(rows: &[Point2], cols: &[Point2], domain: &Domain, eps: f64) -> Self {
        Self::from_cost(rows.len(), cols.len(), eps, |i, j| {
            entropic_cost(rows[i], cols[j], domain, eps)
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Number of rebuilds triggered by potential drift.
    pub fn absorptions(&self) -> usize {
        self.absorptions
    }

    #[inline]
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.cols + j]
    }

    /// Re-centres the kernel on the given potentials.
    pub fn absorb(&mut self, row_pot: &[f64], col_pot: &[f64]) {
        self.row_ref.copy_from_slice(row_pot);
        self.col_ref.copy_from_slice(col_pot);
        self.rebuild();
    }

    fn rebuild(&mut self) {
        let inv = 1.0 / self.eps;
        for i in 0..self.rows {
            let r = self.row_ref[i];
            let base = i * self.cols;
            for j in 0..self.cols {
                self.k[base + j] = ((r + self.col_ref[j] - self.cost[base + j]) * inv).exp();
            }
        }
        self.absorptions += 1;
    }

    fn drift(pot: &[f64], reference: &[f64], eps: f64) -> f64 {
        pot.iter()
            .zip(reference)
            .map(|(p, r)| ((p - r) / eps).abs())
            .fold(0.0, f64::max)
    }

    /// For each column `j`: `log sum_i w_i exp((f_i - c_ij)/eps)`.
    ///
    /// `row_weights` are plain (not log) masses.
    pub fn reduce_over_rows(&mut self, f: &[f64], row_weights: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        if Self::drift(f, &self.row_ref, self.eps) > ABSORB_LIMIT {
            let col_ref = self.col_ref.clone();
            self.absorb(f, &col_ref);
        }
        let inv = 1.0 / self.eps;
        let mut acc = vec![0.0; self.cols];
        for i in 0..self.rows {
            let coef = row_weights[i] * ((f[i] - self.row_ref[i]) * inv).exp();
            if coef == 0.0 {
                continue;
            }
            let row = &self.k[i * self.cols..(i + 1) * self.cols];
            for (a, k) in acc.iter_mut().zip(row) {
                *a += coef * k;
            }
        }
        for j in 0..self.cols {
            let s = acc[j];
            out[j] = if s > UNDERFLOW_GUARD && s.is_finite() {
                s.ln() - self.col_ref[j] * inv
            } else {
                logsumexp(
                    (0..self.rows)
                        .map(|i| row_weights[i].ln() + (f[i] - self.cost(i, j)) * inv)
                        .collect::<Vec<_>>(),
                )
            };
        }
    }

    /// For each row `i`: `log sum_j w_j exp((g_j - c_ij)/eps)`.
    pub fn reduce_over_cols(&mut self, g: &[f64], col_weights: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        if Self::drift(g, &self.col_ref, self.eps) > ABSORB_LIMIT {
            let row_ref = self.row_ref.clone();
            self.absorb(&row_ref, g);
        }
        let inv = 1.0 / self.eps;
        let scale: Vec<f64> = g
            .iter()
            .zip(&self.col_ref)
            .zip(col_weights)
            .map(|((g, r), w)| w * ((g - r) * inv).exp())
            .collect();
        for i in 0..self.rows {
            let row = &self.k[i * self.cols..(i + 1) * self.cols];
            let s: f64 = row.iter().zip(&scale).map(|(k, b)| k * b).sum();
            out[i] = if s > UNDERFLOW_GUARD && s.is_finite() {
                s.ln() - self.row_ref[i] * inv
            } else {
                logsumexp(
                    (0..self.cols)
                        .map(|j| col_weights[j].ln() + (g[j] - self.cost(i, j)) * inv)
                        .collect::<Vec<_>>(),
                )
            };
        }
    }

    /// Normalised coupling weights of column `j` against rows, in increasing row order:
    /// calls `visit(i, w_ij)` with `sum_i w_ij = 1`. Returns `false` if the column is degenerate.
    pub fn for_each_in_column(
        &self,
        j: usize,
        f: &[f64],
        row_weights: &[f64],
        mut visit: impl FnMut(usize, f64),
    ) -> bool {
        let inv = 1.0 / self.eps;
        let logs: Vec<f64> = (0..self.rows)
            .map(|i| row_weights[i].ln() + (f[i] - self.cost(i, j)) * inv)
            .collect();
        let lse = logsumexp(logs.iter().copied());
        if !lse.is_finite() {
            return false;
        }
        for (i, l) in logs.iter().enumerate() {
            let w = (l - lse).exp();
            if w > 0.0 {
                visit(i, w);
            }
        }
        true
    }

    /// `sum_i w_i exp((f_i - c_ij)/eps) * v_i` and the matching normaliser, for every column.
    ///
    /// Used for barycentric averages of row-indexed vectors. Columns whose
    /// normaliser underflows come back as `(0, 0)` and must be handled by the caller.
    pub fn column_averages<const D: usize>(
        &mut self,
        f: &[f64],
        row_weights: &[f64],
        values: impl Fn(usize, usize) -> [f64; D],
    ) -> Vec<([f64; D], f64)> {
        if Self::drift(f, &self.row_ref, self.eps) > ABSORB_LIMIT {
            let col_ref = self.col_ref.clone();
            self.absorb(f, &col_ref);
        }
        let inv = 1.0 / self.eps;
        let mut acc = vec![([0.0; D], 0.0); self.cols];
        for i in 0..self.rows {
            let coef = row_weights[i] * ((f[i] - self.row_ref[i]) * inv).exp();
            if coef == 0.0 {
                continue;
            }
            let row = &self.k[i * self.cols..(i + 1) * self.cols];
            for (j, (a, k)) in acc.iter_mut().zip(row).enumerate() {
                let w = coef * k;
                if w == 0.0 {
                    continue;
                }
                let v = values(i, j);
                for d in 0..D {
                    a.0[d] += w * v[d];
                }
                a.1 += w;
            }
        }
        acc
    }
}
