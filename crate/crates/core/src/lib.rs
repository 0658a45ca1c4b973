//! Linear equality constraints on the nonlinear outputs of feedforward networks.
//!
//! A constrained output layer computes `z = sigma(W^T x + A^T lambda)`, with one
//! Lagrange vector `lambda` per instance and the constraint matrix `A` acting as
//! fixed weights from the Lagrange units into the output nonlinearity. Pairing
//! the activation `sigma` with its integral `phi` in the loss turns the
//! constrained problem into a plain minimization in both the weights and
//! `lambda`, whose stationary points satisfy `A z = b`.
//!
//! Module map:
//!
//! - [`bregman`]: activation families with their integral, inverse, negative
//!   entropy and Bregman divergence.
//! - [`constraints`]: the constraint system, projections and closed-form
//!   multipliers.
//! - [`dual`]: the dual loss and its gradients.
//! - [`solver`]: per-instance `lambda` solves.
//! - [`network`]: the dense feedforward network.
//! - [`experiment`]: the two-stage XOR protocol and run aggregation.
//! - [`config`]: the TOML experiment configuration.
//! - [`io`]: checkpoints, CSV and atomic writes.
//! - [`verify`]: the invariant suite behind `lagrange-units verify`.

pub mod bregman;
pub mod config;
pub mod constraints;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod io;
pub mod network;
pub mod solver;
pub mod tolerances;
pub mod verify;

pub use bregman::{SigmoidFamily, SrluParams};
pub use constraints::{mclr_lambda, ConstraintSet, Projections};
pub use dual::{DualModel, LagrangeLayer, LinearPredictor};
pub use error::{Error, Result};
pub use network::{bce_loss, bce_with_logits, Activation, DenseLayer, Gradients, LayerGradient, Mlp, Tape};
pub use solver::{solve_lambda, solve_layer, LagrangeState, SolverConfig, SolverMode, StopReason};
