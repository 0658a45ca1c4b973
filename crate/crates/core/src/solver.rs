//! Per-instance constraint satisfaction: minimize the dual loss over `lambda`
//! with the weights held fixed.
//!
//! Gradient descent starts every solve at `alpha_init` and halves the step
//! whenever a trial does not lower the loss. The solve has converged once the
//! gradient `A z - b` is within `loss_tol` in max-norm. It gives up,
//! unconverged, when the step falls below `alpha_min` or after `max_iters`
//! accepted steps. Newton mode uses the exact Hessian `A diag(sigma') A^T` and
//! the same halving from a unit step; it is meant for oracle-grade solutions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{DualModel, LagrangeLayer};
use crate::error::{check_dim, Error, Result};
use crate::tolerances::NEWTON_GRADIENT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMode {
    #[serde(rename = "gd")]
    GradientDescent,
    #[serde(rename = "newton")]
    Newton,
}

impl FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gd" | "gradient-descent" => Ok(SolverMode::GradientDescent),
            "newton" => Ok(SolverMode::Newton),
            other => Err(Error::Config(format!(
                "unknown solver mode {other:?} (expected gd or newton)"
            ))),
        }
    }
}

impl fmt::Display for SolverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMode::GradientDescent => "gd",
            SolverMode::Newton => "newton",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Convergence threshold on `||grad_lambda||_inf` in gradient-descent mode.
    pub loss_tol: f64,
    pub alpha_init: f64,
    pub alpha_min: f64,
    pub max_iters: usize,
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            loss_tol: 5e-3,
            alpha_init: 0.1,
            alpha_min: 1e-6,
            max_iters: 1000,
            mode: SolverMode::GradientDescent,
        }
    }
}

impl SolverConfig {
    pub fn newton() -> Self {
        Self {
            mode: SolverMode::Newton,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("solver.{name} must be positive, got {v}")))
            }
        };
        positive("loss_tol", self.loss_tol)?;
        positive("alpha_init", self.alpha_init)?;
        positive("alpha_min", self.alpha_min)?;
        if self.max_iters == 0 {
            return Err(Error::Config("solver.max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    StepTooSmall,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeState {
    pub lam: DVector<f64>,
    /// Accepted steps.
    pub iterations: usize,
    /// `||A z - b||_inf` at `lam`.
    pub final_infeasibility: f64,
    pub converged: bool,
    pub stop: StopReason,
    /// `-b^T lambda + sum_k phi(u_k)` at `lam`.
    pub objective: f64,
}

/// Solves for `lambda` on a single-layer model, starting from `lam0`.
pub fn solve_lambda(
    model: &DualModel,
    x: &DVector<f64>,
    y: &DVector<f64>,
    b: &DVector<f64>,
    lam0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<LagrangeState> {
    model.layer().check_target(y)?;
    let wx = model.wx(x)?;
    solve_layer(model.layer(), &wx, b, lam0, cfg)
}

/// Solves for `lambda` given the linear part `wx` of the constrained layer.
pub fn solve_layer(
    layer: &LagrangeLayer,
    wx: &DVector<f64>,
    b: &DVector<f64>,
    lam0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<LagrangeState> {
    solve_layer_traced(layer, wx, b, lam0, cfg, |_| {})
}

/// As [`solve_layer`], reporting the objective after every accepted step.
pub fn solve_layer_traced(
    layer: &LagrangeLayer,
    wx: &DVector<f64>,
    b: &DVector<f64>,
    lam0: &DVector<f64>,
    cfg: &SolverConfig,
    mut on_accept: impl FnMut(f64),
) -> Result<LagrangeState> {
    cfg.validate()?;
    check_dim("output width", layer.n_outputs(), wx.len())?;
    check_dim("constraint right-hand side", layer.n_constraints(), b.len())?;
    check_dim("lagrange vector", layer.n_constraints(), lam0.len())?;
    if let Some(v) = lam0.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "initial lagrange vector",
            value: *v,
        });
    }
    let mut work = Workspace::new(layer, wx, b);
    match cfg.mode {
        SolverMode::GradientDescent => work.gradient_descent(lam0.clone(), cfg, &mut on_accept),
        SolverMode::Newton => work.newton(lam0.clone(), cfg, &mut on_accept),
    }
}

/// Scratch buffers for one solve.
struct Workspace<'a> {
    layer: &'a LagrangeLayer,
    wx: &'a DVector<f64>,
    b: &'a DVector<f64>,
    u: DVector<f64>,
    z: DVector<f64>,
}

enum Trial {
    Value(f64),
    TooFar,
}

impl<'a> Workspace<'a> {
    fn new(layer: &'a LagrangeLayer, wx: &'a DVector<f64>, b: &'a DVector<f64>) -> Self {
        let k = wx.len();
        Self {
            layer,
            wx,
            b,
            u: DVector::zeros(k),
            z: DVector::zeros(k),
        }
    }

    fn fill_u(&mut self, lam: &DVector<f64>) {
        // Same operation order as `LagrangeLayer::linear_predictor`, so the
        // reported infeasibility equals `grad_lambda` bit for bit.
        self.u.copy_from(self.wx);
        self.u += self.layer.constraints().matrix().tr_mul(lam);
    }

    fn objective(&mut self, lam: &DVector<f64>) -> Result<f64> {
        self.fill_u(lam);
        let family = self.layer.family();
        let mut total = -self.b.dot(lam);
        for u in self.u.iter() {
            total += family.phi(*u)?;
        }
        Ok(total)
    }

    /// Objective at a trial point; overflow means the step went too far.
    fn trial(&mut self, lam: &DVector<f64>, iteration: usize) -> Result<Trial> {
        match self.objective(lam) {
            Ok(v) if v.is_nan() => Err(Error::Diverged { iteration }),
            Ok(v) if v.is_infinite() => Ok(Trial::TooFar),
            Ok(v) => Ok(Trial::Value(v)),
            Err(Error::Range { .. }) => Ok(Trial::TooFar),
            Err(Error::NonFinite { .. }) => Err(Error::Diverged { iteration }),
            Err(e) => Err(e),
        }
    }

    /// `A sigma(u) - b`.
    fn gradient(&mut self, lam: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        self.fill_u(lam);
        let family = self.layer.family();
        for (z, u) in self.z.iter_mut().zip(self.u.iter()) {
            *z = family.sigma(*u)?;
        }
        out.copy_from(&(self.layer.constraints().matrix() * &self.z));
        *out -= self.b;
        Ok(())
    }

    fn initial(&mut self, lam: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let e = self.objective(lam)?;
        if !e.is_finite() {
            return Err(Error::Diverged { iteration: 0 });
        }
        let mut g = DVector::zeros(lam.len());
        self.gradient(lam, &mut g)?;
        Ok((e, g))
    }

    fn gradient_descent(
        &mut self,
        mut lam: DVector<f64>,
        cfg: &SolverConfig,
        on_accept: &mut impl FnMut(f64),
    ) -> Result<LagrangeState> {
        let (mut e, mut g) = self.initial(&lam)?;
        let mut trial = lam.clone();
        let mut alpha = cfg.alpha_init;
        let mut iterations = 0;
        let stop = loop {
            if norm_inf(&g) <= cfg.loss_tol {
                break StopReason::Converged;
            }
            if iterations >= cfg.max_iters {
                break StopReason::MaxIterations;
            }
            trial.copy_from(&lam);
            trial.axpy(-alpha, &g, 1.0);
            match self.trial(&trial, iterations)? {
                Trial::Value(et) if et < e => {
                    std::mem::swap(&mut lam, &mut trial);
                    e = et;
                    iterations += 1;
                    on_accept(e);
                    self.gradient(&lam, &mut g)?;
                }
                _ => {
                    alpha *= 0.5;
                    if alpha < cfg.alpha_min {
                        break StopReason::StepTooSmall;
                    }
                }
            }
        };
        Ok(self.finish(lam, iterations, &g, e, stop))
    }

    fn newton(
        &mut self,
        mut lam: DVector<f64>,
        cfg: &SolverConfig,
        on_accept: &mut impl FnMut(f64),
    ) -> Result<LagrangeState> {
        let (mut e, mut g) = self.initial(&lam)?;
        let mut trial = lam.clone();
        let mut trial_g = g.clone();
        let mut iterations = 0;
        let stop = 'outer: loop {
            let g_norm = norm_inf(&g);
            if g_norm <= NEWTON_GRADIENT {
                break StopReason::Converged;
            }
            if iterations >= cfg.max_iters {
                break StopReason::MaxIterations;
            }
            let h = self.layer.lambda_hessian(self.wx, &lam)?;
            let step = Cholesky::new(h)
                .ok_or(Error::HessianSolve { iteration: iterations })?
                .solve(&g);
            let mut t = 1.0;
            loop {
                trial.copy_from(&lam);
                trial.axpy(-t, &step, 1.0);
                if let Trial::Value(et) = self.trial(&trial, iterations)? {
                    // Near the optimum the loss change drops below rounding;
                    // a smaller gradient then decides.
                    let slack = 1e-12 * (1.0 + e.abs());
                    let accept = et < e || {
                        et <= e + slack && {
                            self.gradient(&trial, &mut trial_g)?;
                            norm_inf(&trial_g) < g_norm
                        }
                    };
                    if accept {
                        std::mem::swap(&mut lam, &mut trial);
                        e = et;
                        iterations += 1;
                        on_accept(e);
                        self.gradient(&lam, &mut g)?;
                        break;
                    }
                }
                t *= 0.5;
                if t < cfg.alpha_min {
                    break 'outer StopReason::StepTooSmall;
                }
            }
        };
        Ok(self.finish(lam, iterations, &g, e, stop))
    }

    fn finish(
        &self,
        lam: DVector<f64>,
        iterations: usize,
        g: &DVector<f64>,
        objective: f64,
        stop: StopReason,
    ) -> LagrangeState {
        LagrangeState {
            lam,
            iterations,
            final_infeasibility: norm_inf(g),
            converged: stop == StopReason::Converged,
            stop,
            objective,
        }
    }
}

fn norm_inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
