//! Shared grids and tolerances used by the invariant checks, the `verify`
//! command and the test suites. Every module reads its thresholds from here.

/// Closed-form agreement for the quintuple (phi, u, psi, B).
pub const CLOSED_FORM: f64 = 1e-10;

/// Round trips `u(sigma(x))` and `sigma(u(z))` for closed-form inverses.
pub const ROUND_TRIP: f64 = 1e-10;

/// Residual target of the numeric SRLU inverse, relative to `max(1, |z|)`.
pub const SRLU_INVERSE_RESIDUAL: f64 = 1e-12;

/// Looser agreement for SRLU quantities that go through the numeric inverse.
pub const SRLU_DERIVED: f64 = 1e-8;

/// Finite-difference step for first derivatives.
pub const FD_STEP: f64 = 1e-6;

/// Step for the monotonicity check on the activation grid.
pub const MONOTONE_STEP: f64 = 1e-5;

/// Agreement between `phi'` (central differences) and `sigma`.
pub const INTEGRAL_CONSISTENCY: f64 = 1e-6;

/// Relative error allowed between analytic gradients and central differences.
pub const GRADIENT_REL: f64 = 1e-5;

/// Lower bound accepted for a Bregman divergence (rounding slack below zero).
pub const BREGMAN_FLOOR: f64 = -1e-12;

/// Two routes to a Bregman difference must agree to this.
pub const BREGMAN_DIFFERENCE: f64 = 1e-9;

/// Projection identities P^2 = P, AP = 0, AQ = I, PQ = 0 (max-abs).
pub const PROJECTION: f64 = 1e-10;

/// Linear-solve precision for closed-form lambda.
pub const LINEAR_SOLVE: f64 = 1e-10;

/// `||A grad_W R||_max` for feasible targets.
pub const NULLSPACE: f64 = 1e-8;

/// Feasibility a target must meet before the nullspace check runs.
pub const TARGET_FEASIBILITY: f64 = 1e-9;

/// Newton-mode stopping threshold on `||grad_lambda||_inf`.
pub const NEWTON_GRADIENT: f64 = 1e-10;

/// Iterative solutions vs closed-form oracles.
pub const ORACLE_AGREEMENT: f64 = 1e-8;

/// Relative cutoff on singular values of A.
pub const RANK_RELATIVE: f64 = 1e-10;

/// Symmetric activation grid `[-GRID_HALF_WIDTH, GRID_HALF_WIDTH]`.
pub const GRID_HALF_WIDTH: f64 = 10.0;

/// Points on every family grid.
pub const GRID_POINTS: usize = 201;

/// Half-width of the grid used for forward/inverse round trips. Beyond it the
/// rounding of `tanh(u)` near 1 alone exceeds [`ROUND_TRIP`].
pub const ROUND_TRIP_HALF_WIDTH: f64 = 5.0;

/// Floor on the denominator of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Newton mode must bring `||A z - b||_inf` below this.
pub const NEWTON_FEASIBILITY: f64 = 1e-8;

/// Gradient-descent mode infeasibility bound for a successful solve.
pub const GD_FEASIBILITY: f64 = 1e-2;

/// Fraction of gradient-descent solves that must meet [`GD_FEASIBILITY`].
pub const GD_SUCCESS_FRACTION: f64 = 0.95;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Evenly spaced grid of `n` points over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
