//! Linear equality constraints `A z = b` on a K-dimensional output.
//!
//! `A` is `I x K` with one row per constraint and one column per output unit.
//! The right-hand side is normally per instance (`b_n = A y_n`); a shared `b`
//! may be stored alongside `A` for single-instance use.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::tolerances::{RANK_RELATIVE, TARGET_FEASIBILITY};

#[derive(Debug, Clone)]
pub struct ConstraintSet {
    a: DMatrix<f64>,
    rhs: Option<DVector<f64>>,
    gram: DMatrix<f64>,
    gram_factor: Cholesky<f64, Dyn>,
}

/// Equal when `A` and the right-hand side are; the cached factor follows.
impl PartialEq for ConstraintSet {
    fn eq(&self, other: &Self) -> bool {
        self.a == other.a && self.rhs == other.rhs
    }
}

/// `P = I - A^T (A A^T)^-1 A` and `Q = A^T (A A^T)^-1`.
#[derive(Debug, Clone)]
pub struct Projections {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl ConstraintSet {
    /// Validates `A` (full row rank, fewer rows than columns) and caches the
    /// Cholesky factor of `A A^T`.
    pub fn new(a: DMatrix<f64>, rhs: Option<DVector<f64>>) -> Result<Self> {
        let (rows, cols) = a.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::Data("constraint matrix is empty".into()));
        }
        if let Some(b) = &rhs {
            check_dim("constraint right-hand side", rows, b.len())?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite constraint right-hand side".into()));
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite entry in constraint matrix".into()));
        }
        let sv = a.singular_values();
        let largest = sv.max();
        let smallest = if rows > cols { 0.0 } else { sv.min() };
        if largest == 0.0 || smallest < RANK_RELATIVE * largest {
            return Err(Error::RankDeficient {
                smallest,
                largest,
                tolerance: RANK_RELATIVE,
            });
        }
        if rows >= cols {
            return Err(Error::TooManyConstraints { rows, cols });
        }
        let gram = &a * a.transpose();
        let gram_factor = Cholesky::new(gram.clone())
            .ok_or(Error::LinearSolve("A A^T is not positive definite"))?;
        Ok(Self {
            a,
            rhs,
            gram,
            gram_factor,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], rhs: Option<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        for r in rows {
            check_dim("constraint row length", k, r.len())?;
        }
        let a = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
        Self::new(a, rhs.map(DVector::from_vec))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> Option<&DVector<f64>> {
        self.rhs.as_ref()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Number of constraints `I`.
    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    /// Number of constrained outputs `K`.
    pub fn n_outputs(&self) -> usize {
        self.a.ncols()
    }

    /// Solves `A A^T x = r`.
    pub fn solve_gram(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("gram solve", self.n_constraints(), r.len())?;
        Ok(self.gram_factor.solve(r))
    }

    pub fn projections(&self) -> Projections {
        let inv = self.gram_factor.inverse();
        let q = self.a.transpose() * inv;
        let p = DMatrix::identity(self.n_outputs(), self.n_outputs()) - &q * &self.a;
        Projections { p, q }
    }

    /// `A z`.
    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("constraint apply", self.n_outputs(), z.len())?;
        Ok(&self.a * z)
    }

    /// `A^T lambda`, the contribution of the Lagrange units to each output.
    pub fn lift(&self, lam: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("lagrange vector", self.n_constraints(), lam.len())?;
        Ok(self.a.tr_mul(lam))
    }

    /// `||A z - b||_inf`.
    pub fn infeasibility(&self, z: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        check_dim("constraint right-hand side", self.n_constraints(), b.len())?;
        Ok(max_abs((self.apply(z)? - b).iter()))
    }

    /// Closed-form multiplier for the linear (l2) output:
    /// `lambda = (A A^T)^-1 (b - A wx)`, which makes `wx + A^T lambda` feasible.
    pub fn l2_lambda(&self, wx: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("constraint right-hand side", self.n_constraints(), b.len())?;
        let r = b - self.apply(wx)?;
        self.solve_gram(&r)
    }

    /// `G = (-y + Q b + P W^T x) x^T`, the gradient of the l2 objective with
    /// the optimal multiplier eliminated. `w` is `J x K`; `G` is `K x J`.
    pub fn l2_eliminated_gradient(
        &self,
        w: &DMatrix<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let k = self.n_outputs();
        check_dim("weight columns", k, w.ncols())?;
        check_dim("input length", w.nrows(), x.len())?;
        check_dim("target length", k, y.len())?;
        check_dim("constraint right-hand side", self.n_constraints(), b.len())?;
        let proj = self.projections();
        let v = w.tr_mul(x);
        let residual = -y + &proj.q * b + &proj.p * v;
        Ok(residual * x.transpose())
    }

    /// `||A G||_max` with no feasibility precondition. For infeasible targets
    /// this equals `||(b - A y) x^T||_max`.
    pub fn nullspace_gradient_residual(
        &self,
        w: &DMatrix<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
    ) -> Result<f64> {
        let g = self.l2_eliminated_gradient(w, x, y, b)?;
        Ok(max_abs((&self.a * g).iter()))
    }

    /// As [`Self::nullspace_gradient_residual`], but first requires the
    /// target to satisfy `A y = b`. The result should then vanish.
    pub fn nullspace_gradient_check(
        &self,
        w: &DMatrix<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
    ) -> Result<f64> {
        check_dim("target length", self.n_outputs(), y.len())?;
        let residual = self.infeasibility(y, b)?;
        if residual > TARGET_FEASIBILITY {
            return Err(Error::InfeasibleTarget {
                residual,
                tolerance: TARGET_FEASIBILITY,
            });
        }
        self.nullspace_gradient_residual(w, x, y, b)
    }
}

pub(crate) fn max_abs<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.fold(0.0, |m, v| m.max(v.abs()))
}

/// `log sum_k e^{x_k}`, shifted by the maximum so finite input never overflows.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// The sum-to-one multiplier for exponential outputs: `lambda = -log sum_k e^{wx_k}`,
/// after which `e^{wx_k + lambda}` is the softmax of `wx`.
pub fn mclr_lambda(wx: &[f64]) -> f64 {
    -log_sum_exp(wx)
}
