//! The dual objective of the constrained output layer.
//!
//! For one instance with top-layer input `x`, linear part `wx = W^T x + bias`
//! and Lagrange vector `lambda`, the linear predictor is
//! `u = wx + A^T lambda` and the nonlinear predictor is `z = sigma(u)`. The
//! loss
//!
//! ```text
//! E(W, lambda) = -y^T wx - b^T lambda + sum_k phi(u_k)
//! ```
//!
//! is minimized jointly in the weights and in `lambda`. Its `lambda` gradient
//! is `A z - b`, so at a stationary `lambda` the predictor satisfies the
//! constraints, and its weight gradient is the familiar `x (z - y)^T`.
//! `lambda` therefore behaves like a block of extra penultimate-layer units
//! wired to the output through the fixed weights `A`.

use nalgebra::{DMatrix, DVector};

use crate::bregman::SigmoidFamily;
use crate::constraints::ConstraintSet;
use crate::error::{check_dim, Error, Result};

/// The constrained output layer: a sigmoid family and the fixed weights `A`.
/// Everything here is evaluated from the linear part `wx`, so the same layer
/// serves a bare top layer ([`DualModel`]) and a deeper trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeLayer {
    family: SigmoidFamily,
    constraints: ConstraintSet,
}

impl LagrangeLayer {
    pub fn new(family: SigmoidFamily, constraints: ConstraintSet) -> Self {
        Self {
            family,
            constraints,
        }
    }

    pub fn family(&self) -> SigmoidFamily {
        self.family
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn n_outputs(&self) -> usize {
        self.constraints.n_outputs()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.n_constraints()
    }

    fn check_wx(&self, wx: &DVector<f64>) -> Result<()> {
        check_dim("output width", self.n_outputs(), wx.len())
    }

    fn check_b(&self, b: &DVector<f64>) -> Result<()> {
        check_dim("constraint right-hand side", self.n_constraints(), b.len())
    }

    /// Targets must lie in the closure of the family's domain.
    pub fn check_target(&self, y: &DVector<f64>) -> Result<()> {
        check_dim("target length", self.n_outputs(), y.len())?;
        let domain = self.family.domain();
        match y.iter().find(|v| !domain.contains_closure(**v)) {
            Some(&value) => Err(Error::Domain {
                family: self.family.name(),
                value,
                domain: format!("[{}, {}]", domain.lower, domain.upper),
            }),
            None => Ok(()),
        }
    }

    /// `u = wx + A^T lambda`.
    pub fn linear_predictor(&self, wx: &DVector<f64>, lam: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_wx(wx)?;
        Ok(wx + self.constraints.lift(lam)?)
    }

    /// `z = sigma(u)`.
    pub fn predictor(&self, wx: &DVector<f64>, lam: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.linear_predictor(wx, lam)?;
        self.activate(&u)
    }

    pub fn activate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut z = u.clone();
        for v in z.iter_mut() {
            *v = self.family.sigma(*v)?;
        }
        Ok(z)
    }

    /// The `lambda`-dependent part of the loss, `-b^T lambda + sum_k phi(u_k)`.
    pub fn lambda_objective(
        &self,
        wx: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<f64> {
        self.check_b(b)?;
        let u = self.linear_predictor(wx, lam)?;
        let mut total = -b.dot(lam);
        for v in u.iter() {
            total += self.family.phi(*v)?;
        }
        Ok(total)
    }

    /// `-y^T wx - b^T lambda + sum_k phi(u_k)`.
    pub fn loss(
        &self,
        wx: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<f64> {
        self.check_target(y)?;
        Ok(-y.dot(wx) + self.lambda_objective(wx, b, lam)?)
    }

    /// The loss shifted by `sum_k psi(y_k)`, which depends on the target only.
    /// When `A y = b` this equals `sum_k B(y_k || z_k)`: zero exactly when the
    /// predictor reproduces the target.
    pub fn anchored_loss(
        &self,
        wx: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<f64> {
        let mut offset = 0.0;
        for v in y.iter() {
            offset += self.family.negentropy_on_closure(*v)?;
        }
        Ok(self.loss(wx, y, b, lam)? + offset)
    }

    /// `A sigma(u) - b`; its max-norm is the infeasibility of the predictor.
    pub fn grad_lambda(
        &self,
        wx: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_b(b)?;
        let z = self.predictor(wx, lam)?;
        Ok(self.constraints.apply(&z)? - b)
    }

    /// `z - y`, the gradient of the loss with respect to `wx`.
    pub fn output_residual(
        &self,
        wx: &DVector<f64>,
        y: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_target(y)?;
        Ok(self.predictor(wx, lam)? - y)
    }

    /// `A diag(sigma'(u)) A^T`.
    pub fn lambda_hessian(&self, wx: &DVector<f64>, lam: &DVector<f64>) -> Result<DMatrix<f64>> {
        let u = self.linear_predictor(wx, lam)?;
        let a = self.constraints.matrix();
        let mut scaled = a.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.family.sigma_prime(u[k])?;
        }
        Ok(scaled * a.transpose())
    }
}

/// `u = W^T x + bias + A^T lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub u: DVector<f64>,
}

/// A single constrained top layer: weights `W` (`J x K`), an unconstrained
/// bias, and the Lagrange layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
    layer: LagrangeLayer,
}

impl DualModel {
    pub fn new(
        weights: DMatrix<f64>,
        bias: DVector<f64>,
        family: SigmoidFamily,
        constraints: ConstraintSet,
    ) -> Result<Self> {
        check_dim("weight columns", constraints.n_outputs(), weights.ncols())?;
        check_dim("bias length", constraints.n_outputs(), bias.len())?;
        Ok(Self {
            weights,
            bias,
            layer: LagrangeLayer::new(family, constraints),
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn layer(&self) -> &LagrangeLayer {
        &self.layer
    }

    pub fn family(&self) -> SigmoidFamily {
        self.layer.family
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.layer.constraints
    }

    /// Input width `J`.
    pub fn n_inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn set_parameters(&mut self, weights: DMatrix<f64>, bias: DVector<f64>) -> Result<()> {
        check_dim("weight rows", self.n_inputs(), weights.nrows())?;
        check_dim("weight columns", self.layer.n_outputs(), weights.ncols())?;
        check_dim("bias length", self.layer.n_outputs(), bias.len())?;
        self.weights = weights;
        self.bias = bias;
        Ok(())
    }

    /// `W^T x + bias`.
    pub fn wx(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("input length", self.n_inputs(), x.len())?;
        Ok(self.weights.tr_mul(x) + &self.bias)
    }

    pub fn linear_predictor(&self, x: &DVector<f64>, lam: &DVector<f64>) -> Result<LinearPredictor> {
        let u = self.layer.linear_predictor(&self.wx(x)?, lam)?;
        Ok(LinearPredictor { u })
    }

    pub fn predictor_z(&self, x: &DVector<f64>, lam: &DVector<f64>) -> Result<DVector<f64>> {
        self.layer.predictor(&self.wx(x)?, lam)
    }

    pub fn dual_loss_value(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<f64> {
        self.layer.loss(&self.wx(x)?, y, b, lam)
    }

    pub fn grad_lambda(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.layer.check_target(y)?;
        self.layer.grad_lambda(&self.wx(x)?, b, lam)
    }

    /// Returns `(x (z - y)^T, z - y)`: the weight and bias gradients.
    pub fn grad_weights(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        b: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        check_dim("constraint right-hand side", self.layer.n_constraints(), b.len())?;
        let r = self.layer.output_residual(&self.wx(x)?, y, lam)?;
        Ok((x * r.transpose(), r))
    }

    pub fn lambda_hessian(&self, x: &DVector<f64>, lam: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.layer.lambda_hessian(&self.wx(x)?, lam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::mclr_lambda;

    fn sum_to_one(k: usize) -> ConstraintSet {
        ConstraintSet::from_rows(&[vec![1.0; k]], None).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn linear_predictor_examples() {
        let cs = sum_to_one(2);
        let m = DualModel::new(DMatrix::zeros(2, 2), DVector::zeros(2), SigmoidFamily::L2, cs.clone())
            .unwrap();
        let u = m.linear_predictor(&v(&[0.3, -0.2]), &v(&[0.0])).unwrap();
        assert_eq!(u.u, DVector::zeros(2));

        let id = DualModel::new(DMatrix::identity(2, 2), DVector::zeros(2), SigmoidFamily::L2, cs.clone())
            .unwrap();
        let u = id.linear_predictor(&v(&[0.3, -0.2]), &v(&[0.0])).unwrap();
        assert_eq!(u.u, v(&[0.3, -0.2]));

        let u = m.linear_predictor(&v(&[1.0, 1.0]), &v(&[0.5])).unwrap();
        assert_eq!(u.u, v(&[0.5, 0.5]));
    }

    #[test]
    fn dimension_errors() {
        let cs = sum_to_one(3);
        assert!(DualModel::new(DMatrix::zeros(2, 2), DVector::zeros(3), SigmoidFamily::L2, cs.clone()).is_err());
        let m = DualModel::new(DMatrix::zeros(2, 3), DVector::zeros(3), SigmoidFamily::L2, cs).unwrap();
        assert!(matches!(
            m.predictor_z(&v(&[1.0]), &v(&[0.0])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            m.predictor_z(&v(&[1.0, 2.0]), &v(&[0.0, 1.0])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            m.dual_loss_value(&v(&[1.0, 2.0]), &v(&[0.0, 1.0]), &v(&[1.0]), &v(&[0.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn predictor_examples() {
        let cs = sum_to_one(3);
        let m = DualModel::new(DMatrix::zeros(2, 3), DVector::zeros(3), SigmoidFamily::Logistic, cs.clone())
            .unwrap();
        let z = m.predictor_z(&v(&[0.4, 0.1]), &v(&[0.0])).unwrap();
        assert_eq!(z, DVector::from_element(3, 0.5));

        let l2 = DualModel::new(DMatrix::identity(3, 3), v(&[0.1, 0.2, 0.3]), SigmoidFamily::L2, cs)
            .unwrap();
        let x = v(&[1.0, -1.0, 2.0]);
        let u = l2.linear_predictor(&x, &v(&[0.7])).unwrap().u;
        assert_eq!(l2.predictor_z(&x, &v(&[0.7])).unwrap(), u);
    }

    #[test]
    fn exp_predictor_is_softmax_at_closed_form_lambda() {
        let cs = sum_to_one(3);
        let w = DMatrix::identity(3, 3);
        let m = DualModel::new(w, DVector::zeros(3), SigmoidFamily::Exp, cs).unwrap();
        let x = v(&[0.2, -1.3, 2.5]);
        let lam = v(&[mclr_lambda(x.as_slice())]);
        let z = m.predictor_z(&x, &lam).unwrap();
        // softmax computed directly
        let mx = 2.5f64;
        let e: Vec<f64> = x.iter().map(|t| (t - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..3 {
            assert!((z[k] - e[k] / s).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        let cs = sum_to_one(2);
        let m = DualModel::new(DMatrix::zeros(2, 2), DVector::zeros(2), SigmoidFamily::L2, cs.clone())
            .unwrap();
        let zero = DVector::zeros(2);
        let l = m.dual_loss_value(&zero, &zero, &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!(l, 0.0);

        let e = DualModel::new(DMatrix::zeros(2, 2), DVector::zeros(2), SigmoidFamily::Exp, cs).unwrap();
        let lam = v(&[-(2f64.ln())]);
        let l = e.dual_loss_value(&zero, &v(&[1.0, 0.0]), &v(&[1.0]), &lam).unwrap();
        assert!((l - (2f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn target_outside_closure_is_rejected() {
        let cs = sum_to_one(2);
        let m = DualModel::new(DMatrix::zeros(1, 2), DVector::zeros(2), SigmoidFamily::Logistic, cs).unwrap();
        let x = v(&[1.0]);
        let lam = v(&[0.0]);
        assert!(m.dual_loss_value(&x, &v(&[1.0, 0.0]), &v(&[1.0]), &lam).is_ok());
        assert!(matches!(
            m.dual_loss_value(&x, &v(&[1.5, -0.5]), &v(&[1.0]), &lam),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn logistic_target_at_prediction_is_stationary_in_weights() {
        let cs = sum_to_one(2);
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -0.8, 1.1, 0.4]);
        let bias = v(&[0.05, -0.1]);
        let m = DualModel::new(w, bias, SigmoidFamily::Logistic, cs).unwrap();
        let x = v(&[0.9, -0.4]);
        let lam = v(&[0.0]);
        let y = m.predictor_z(&x, &lam).unwrap();
        let b = m.constraints().apply(&y).unwrap();
        let (gw, gb) = m.grad_weights(&x, &y, &b, &lam).unwrap();
        assert!(gw.iter().all(|g| *g == 0.0));
        assert!(gb.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn grad_lambda_examples() {
        let cs = sum_to_one(2);
        let m = DualModel::new(DMatrix::zeros(1, 2), DVector::zeros(2), SigmoidFamily::Exp, cs).unwrap();
        let x = v(&[0.0]);
        let g = m.grad_lambda(&x, &v(&[1.0, 0.0]), &v(&[1.0]), &v(&[0.0])).unwrap();
        assert_eq!(g, v(&[1.0]));
        // feasible by construction
        let lam = v(&[-(2f64.ln())]);
        let g = m.grad_lambda(&x, &v(&[1.0, 0.0]), &v(&[1.0]), &lam).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn grad_weights_with_zero_input() {
        let cs = sum_to_one(2);
        let m = DualModel::new(DMatrix::from_element(2, 2, 0.7), v(&[0.2, -0.3]), SigmoidFamily::Tanh, cs)
            .unwrap();
        let x = DVector::zeros(2);
        let y = v(&[0.1, 0.2]);
        let lam = v(&[0.1]);
        let (gw, gb) = m.grad_weights(&x, &y, &v(&[0.3]), &lam).unwrap();
        assert!(gw.iter().all(|g| *g == 0.0));
        let z = m.predictor_z(&x, &lam).unwrap();
        assert_eq!(gb, z - y);
    }

    #[test]
    fn hessian_examples() {
        let cs = ConstraintSet::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, -1.0]], None).unwrap();
        let gram = cs.gram().clone();
        let l2 = DualModel::new(DMatrix::from_element(2, 3, 0.4), DVector::zeros(3), SigmoidFamily::L2, cs.clone())
            .unwrap();
        let h = l2.lambda_hessian(&v(&[3.0, -2.0]), &v(&[0.5, 1.0])).unwrap();
        assert_eq!(h, gram);
        let lg = DualModel::new(DMatrix::zeros(2, 3), DVector::zeros(3), SigmoidFamily::Logistic, cs).unwrap();
        let h = lg.lambda_hessian(&v(&[3.0, -2.0]), &v(&[0.0, 0.0])).unwrap();
        assert!((h - gram * 0.25).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn anchored_loss_is_divergence_for_feasible_targets() {
        let cs = ConstraintSet::from_rows(&[vec![1.0, -0.5, 0.25]], None).unwrap();
        let layer = LagrangeLayer::new(SigmoidFamily::Logistic, cs.clone());
        let wx = v(&[0.4, -1.2, 0.8]);
        let y = v(&[0.3, 0.9, 0.15]);
        let b = cs.apply(&y).unwrap();
        let lam = v(&[0.37]);
        let z = layer.predictor(&wx, &lam).unwrap();
        let div: f64 = (0..3)
            .map(|k| SigmoidFamily::Logistic.bregman(y[k], z[k]).unwrap())
            .sum();
        let anchored = layer.anchored_loss(&wx, &y, &b, &lam).unwrap();
        assert!((anchored - div).abs() < 1e-12);
    }
}
