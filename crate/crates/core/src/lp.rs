//! Dense two-phase simplex for small equality-form linear programs:
//!
//! ```text
//! maximise cᵀx  subject to  A x = b,  x ≥ 0
//! ```
//!
//! Bland's rule picks both the entering and the leaving variable, so the
//! method cannot cycle and its output depends only on the input. Rows are
//! scaled to unit max-norm and linearly dependent rows are removed before
//! phase one; any that survive are dropped after it. The final basic
//! solution and the duals are recomputed from the original data with an LU
//! solve, which keeps equality residuals at rounding level.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
/// Rows whose component outside the span of earlier rows is smaller than
/// this (after scaling to unit max-norm) are treated as dependent.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Dual multipliers y with Aᵀy ≥ c and bᵀy = objective. Rows dropped as
    /// redundant carry a zero multiplier.
    pub duals: DVector<f64>,
    pub basis: Vec<usize>,
    pub pivots: usize,
}

impl LpSolution {
    /// max |A x − b|
    pub fn equality_residual(&self, lp: &LinearProgram) -> f64 {
        (&lp.a * &self.x - &lp.b).abs().max()
    }

    /// Largest violation of dual feasibility, max(c − Aᵀy, 0).
    pub fn dual_infeasibility(&self, lp: &LinearProgram) -> f64 {
        let slack = lp.a.transpose() * &self.duals - &lp.c;
        slack.iter().fold(0.0f64, |m, s| m.max(-s))
    }
}

struct Tableau {
    t: DMatrix<f64>,
    basis: Vec<usize>,
    pivots: usize,
    /// Constraint rows [A | b] the tableau was built from.
    orig: DMatrix<f64>,
    /// Objective coefficients (maximised) of every column but the last.
    cost: DVector<f64>,
}

impl Tableau {
    fn rows(&self) -> usize {
        self.basis.len()
    }

    fn rhs_col(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.t[(r, col)];
        let ncols = self.t.ncols();
        for j in 0..ncols {
            self.t[(r, j)] /= p;
        }
        for i in 0..self.t.nrows() {
            if i == r {
                continue;
            }
            let f = self.t[(i, col)];
            if f != 0.0 {
                for j in 0..ncols {
                    let v = self.t[(r, j)];
                    self.t[(i, j)] -= f * v;
                }
            }
        }
        self.basis[r] = col;
        self.pivots += 1;
    }

    /// Rebuilds the tableau as B⁻¹[A | b] from the original rows, discarding
    /// the rounding error accumulated by elimination, and recomputes the
    /// objective row. Keeps the eliminated rows if B is numerically singular.
    fn refactor(&mut self) {
        let m = self.rows();
        let bmat = DMatrix::from_fn(m, m, |i, k| self.orig[(i, self.basis[k])]);
        let body = match bmat.lu().solve(&self.orig) {
            Some(body) => body,
            None => self.t.rows(0, m).into_owned(),
        };
        let ncols = self.t.ncols();
        for j in 0..ncols {
            let mut z = 0.0;
            for i in 0..m {
                self.t[(i, j)] = body[(i, j)];
                z += self.cost[self.basis[i]] * body[(i, j)];
            }
            self.t[(m, j)] = if j + 1 < ncols { z - self.cost[j] } else { z };
        }
    }

    /// Runs simplex iterations on the objective stored in the last row
    /// (entries are reduced costs of a maximisation, stored negated).
    fn optimise(&mut self, allowed: usize) -> Result<()> {
        let obj = self.rows();
        let rhs = self.rhs_col();
        let cap = self.pivots + 100 * (self.t.ncols() + obj);
        loop {
            if self.pivots > cap {
                return Err(Error::Lp("pivot limit reached (numerical cycling)".into()));
            }
            let Some(enter) = (0..allowed).find(|&j| self.t[(obj, j)] < -COST_TOL && !self.basis.contains(&j)) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows() {
                let a = self.t[(i, enter)];
                if a > PIVOT_TOL {
                    let ratio = self.t[(i, rhs)] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14 || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li]) {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Lp("objective is unbounded".into()));
            };
            self.pivot(r, enter);
            self.refactor();
        }
    }

    fn drop_row(&mut self, r: usize) {
        self.t = self.t.clone().remove_row(r);
        self.orig = self.orig.clone().remove_row(r);
        self.basis.remove(r);
    }
}

impl LinearProgram {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() || a.ncols() != c.len() {
            return Err(Error::Shape(format!(
                "A is {}x{}, b has {}, c has {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn num_vars(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn solve(&self) -> Result<LpSolution> {
        let (rows, scales) = self.independent_rows()?;
        let a = DMatrix::from_fn(rows.len(), self.num_vars(), |i, j| scales[i] * self.a[(rows[i], j)]);
        let b = DVector::from_fn(rows.len(), |i, _| scales[i] * self.b[rows[i]]);
        let reduced = LinearProgram { a, b, c: self.c.clone() };
        let sol = reduced.solve_reduced()?;
        let mut duals = DVector::zeros(self.num_rows());
        for (i, &r) in rows.iter().enumerate() {
            duals[r] = scales[i] * sol.duals[i];
        }
        let sol = LpSolution { duals, ..sol };
        let resid = sol.equality_residual(self);
        if resid > 1e-7 * (1.0 + self.b.abs().max()) {
            return Err(Error::Lp(format!("equality constraints inconsistent (residual {resid:.3e})")));
        }
        Ok(sol)
    }

    /// Rows spanning the row space of A (modified Gram-Schmidt on rows scaled
    /// to unit max-norm), with their scale factors.
    fn independent_rows(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut rows = Vec::new();
        let mut scales = Vec::new();
        for i in 0..self.num_rows() {
            let row: DVector<f64> = self.a.row(i).transpose();
            let max = row.abs().max();
            if max == 0.0 {
                if self.b[i].abs() > FEAS_TOL {
                    return Err(Error::Lp(format!("row {i} reads 0 = {}", self.b[i])));
                }
                continue;
            }
            let scaled = row / max;
            let mut w = scaled.clone();
            for _ in 0..2 {
                for q in &basis {
                    let d = q.dot(&w);
                    w.axpy(-d, q, 1.0);
                }
            }
            let norm = w.norm();
            if norm > RANK_TOL * scaled.norm() {
                basis.push(w / norm);
                rows.push(i);
                scales.push(1.0 / max);
            }
        }
        Ok((rows, scales))
    }

    fn solve_reduced(&self) -> Result<LpSolution> {
        let (m, n) = self.a.shape();
        let width = n + m + 1;
        let mut t = DMatrix::zeros(m + 1, width);
        for i in 0..m {
            let sign = if self.b[i] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..n {
                t[(i, j)] = sign * self.a[(i, j)];
            }
            t[(i, n + i)] = 1.0;
            t[(i, width - 1)] = sign * self.b[i];
        }
        // phase one: maximise −Σ artificials; the objective row holds −(reduced cost)
        for j in 0..width {
            if j >= n && j < n + m {
                continue;
            }
            let s: f64 = (0..m).map(|i| t[(i, j)]).sum();
            t[(m, j)] = -s;
        }
        let orig = t.rows(0, m).into_owned();
        let cost = DVector::from_fn(n + m, |j, _| if j >= n { -1.0 } else { 0.0 });
        let mut tab = Tableau { t, basis: (n..n + m).collect(), pivots: 0, orig, cost };
        tab.optimise(n + m)?;
        let infeas = -tab.t[(tab.rows(), width - 1)];
        if infeas > FEAS_TOL * (1.0 + self.b.abs().max()) {
            return Err(Error::Lp(format!("infeasible (phase-one residual {infeas:.3e})")));
        }

        // move artificials out of the basis; rows where that is impossible are redundant
        let mut kept_rows: Vec<usize> = (0..m).collect();
        let mut r = 0;
        while r < tab.rows() {
            if tab.basis[r] >= n {
                match (0..n).find(|&j| tab.t[(r, j)].abs() > 1e-9) {
                    Some(j) => tab.pivot(r, j),
                    None => {
                        tab.drop_row(r);
                        kept_rows.remove(r);
                        continue;
                    }
                }
            }
            r += 1;
        }

        // phase two
        let rows = tab.rows();
        let rhs = tab.rhs_col();
        let mut t2 = DMatrix::zeros(rows + 1, n + 1);
        for i in 0..rows {
            for j in 0..n {
                t2[(i, j)] = tab.t[(i, j)];
            }
            t2[(i, n)] = tab.t[(i, rhs)];
        }
        let orig = DMatrix::from_fn(rows, n + 1, |i, j| {
            let r = kept_rows[i];
            let sign = if self.b[r] < 0.0 { -1.0 } else { 1.0 };
            sign * if j < n { self.a[(r, j)] } else { self.b[r] }
        });
        let mut tab = Tableau { t: t2, basis: tab.basis, pivots: tab.pivots, orig, cost: self.c.clone() };
        tab.refactor();
        tab.optimise(n)?;

        // polish from the original data
        let bmat = DMatrix::from_fn(rows, rows, |i, k| self.a[(kept_rows[i], tab.basis[k])]);
        let brhs = DVector::from_fn(rows, |i, _| self.b[kept_rows[i]]);
        let cb = DVector::from_fn(rows, |k, _| self.c[tab.basis[k]]);
        let lu = bmat.clone().lu();
        let xb = lu
            .solve(&brhs)
            .ok_or_else(|| Error::Lp("final basis is singular".into()))?;
        let y_kept = bmat
            .transpose()
            .lu()
            .solve(&cb)
            .ok_or_else(|| Error::Lp("final basis is singular".into()))?;
        let mut x = DVector::zeros(n);
        for (k, &j) in tab.basis.iter().enumerate() {
            x[j] = xb[k].max(0.0);
        }
        let mut duals = DVector::zeros(m);
        for (i, &row) in kept_rows.iter().enumerate() {
            duals[row] = y_kept[i];
        }
        let objective = self.c.dot(&x);
        Ok(LpSolution { x, objective, duals, basis: tab.basis, pivots: tab.pivots })
    }

    /// Solves the same program with its variables listed in `order`, which
    /// changes the Bland ordering and therefore the pivot path.
    pub fn solve_permuted(&self, order: &[usize]) -> Result<LpSolution> {
        let n = self.num_vars();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&j| j >= n || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::Domain("order must be a permutation of the variables".into()));
        }
        let a = DMatrix::from_fn(self.num_rows(), n, |i, k| self.a[(i, order[k])]);
        let c = DVector::from_fn(n, |k, _| self.c[order[k]]);
        let sol = LinearProgram { a, b: self.b.clone(), c }.solve()?;
        let mut x = DVector::zeros(n);
        for (k, &j) in order.iter().enumerate() {
            x[j] = sol.x[k];
        }
        let basis = sol.basis.iter().map(|&k| order[k]).collect();
        Ok(LpSolution { x, basis, ..sol })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(a: &[&[f64]], b: &[f64], c: &[f64]) -> LinearProgram {
        let rows = a.len();
        let cols = c.len();
        LinearProgram::new(
            DMatrix::from_fn(rows, cols, |i, j| a[i][j]),
            DVector::from_column_slice(b),
            DVector::from_column_slice(c),
        )
        .unwrap()
    }

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 (slacks appended)
        let p = lp(
            &[&[1., 0., 1., 0., 0.], &[0., 2., 0., 1., 0.], &[3., 2., 0., 0., 1.]],
            &[4., 12., 18.],
            &[3., 5., 0., 0., 0.],
        );
        let s = p.solve().unwrap();
        assert!((s.objective - 36.0).abs() < 1e-12);
        assert!((s.x[0] - 2.0).abs() < 1e-12 && (s.x[1] - 6.0).abs() < 1e-12);
        assert!((p.b.dot(&s.duals) - s.objective).abs() < 1e-10);
        assert!(s.dual_infeasibility(&p) < 1e-10);
    }

    #[test]
    fn redundant_rows_and_negative_rhs() {
        // x + y + z = 1 listed twice, and −x = −0.25
        let p = lp(
            &[&[1., 1., 1.], &[1., 1., 1.], &[-1., 0., 0.]],
            &[1., 1., -0.25],
            &[0., 1., 2.],
        );
        let s = p.solve().unwrap();
        assert!((s.objective - 1.5).abs() < 1e-12);
        assert!(s.equality_residual(&p) < 1e-14);
        assert!((p.b.dot(&s.duals) - s.objective).abs() < 1e-10);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let p = lp(&[&[1., 1.]], &[-1.], &[1., 0.]);
        assert!(matches!(p.solve(), Err(Error::Lp(_))));
        let p = lp(&[&[1., -1.]], &[0.], &[1., 0.]);
        assert!(matches!(p.solve(), Err(Error::Lp(_))));
    }

    #[test]
    fn degenerate_problem_terminates() {
        // classic cycling example (Beale) in equality form with slacks
        let p = lp(
            &[
                &[0.25, -60., -0.04, 9., 1., 0., 0.],
                &[0.5, -90., -0.02, 3., 0., 1., 0.],
                &[0., 0., 1., 0., 0., 0., 1.],
            ],
            &[0., 0., 1.],
            &[0.75, -150., 0.02, -6., 0., 0., 0.],
        );
        let s = p.solve().unwrap();
        assert!((s.objective - 0.05).abs() < 1e-12);
    }

    #[test]
    fn permuted_solve_agrees() {
        let p = lp(
            &[&[1., 1., 1., 0.], &[1., -1., 0., 1.]],
            &[2., 0.5],
            &[1., 1., 0.5, 0.0],
        );
        let a = p.solve().unwrap();
        let b = p.solve_permuted(&[3, 2, 1, 0]).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-12);
        assert!(b.equality_residual(&p) < 1e-12);
        assert!(p.solve_permuted(&[0, 0, 1, 2]).is_err());
    }
}
