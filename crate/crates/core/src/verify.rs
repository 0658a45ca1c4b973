//! Named invariant suite behind the `verify` command.
//!
//! Each check reports its worst violation and passes when that value is at
//! most `tolerance * scale`. The closed forms below are written out directly
//! rather than going through [`SigmoidFamily`].

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bregman::SigmoidFamily;
use crate::constraints::{log_sum_exp, ConstraintSet};
use crate::dual::{DualModel, LagrangeLayer};
use crate::error::Result;
use crate::network::{bce_with_logits, Activation, Mlp};
use crate::solver::{solve_layer, SolverConfig};
use crate::tolerances::*;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub summary: &'static str,
    /// Worst violation found; infinite when the check itself errored.
    pub measured: f64,
    /// Effective threshold after scaling.
    pub tolerance: f64,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub tolerance_scale: f64,
    pub checks: Vec<CheckOutcome>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn n_failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:<6}  {:>12}  {:>12}  summary", "check", "result", "measured", "tolerance")?;
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {:<6}  {:>12.3e}  {:>12.3e}  {}",
                c.name, status, c.measured, c.tolerance, c.summary
            )?;
            if let Some(e) = &c.error {
                writeln!(f, "{:<width$}  error: {e}", "")?;
            }
        }
        write!(
            f,
            "{} of {} checks passed (tolerance scale {})",
            self.checks.len() - self.n_failed(),
            self.checks.len(),
            self.tolerance_scale
        )
    }
}

struct Check {
    name: &'static str,
    summary: &'static str,
    tolerance: f64,
    run: fn() -> Result<f64>,
}

const CHECKS: &[Check] = &[
    Check {
        name: "closed_forms",
        summary: "sigma, phi, u, psi, B match the closed forms on 201-point grids",
        tolerance: CLOSED_FORM,
        run: closed_forms,
    },
    Check {
        name: "phi_antiderivative",
        summary: "central differences of phi reproduce sigma",
        tolerance: INTEGRAL_CONSISTENCY,
        run: phi_antiderivative,
    },
    Check {
        name: "inverse_round_trip",
        summary: "u(sigma(v)) = v for every family",
        tolerance: ROUND_TRIP,
        run: inverse_round_trip,
    },
    Check {
        name: "bregman_nonnegative",
        summary: "B(z || v) >= 0 on random domain pairs",
        tolerance: -BREGMAN_FLOOR,
        run: bregman_nonnegative,
    },
    Check {
        name: "bregman_difference",
        summary: "reduced Bregman difference equals direct subtraction",
        tolerance: BREGMAN_DIFFERENCE,
        run: bregman_difference,
    },
    Check {
        name: "projection_identities",
        summary: "P^2 = P, AP = 0, AQ = I, PQ = 0 over 20 shapes",
        tolerance: PROJECTION,
        run: projection_identities,
    },
    Check {
        name: "l2_closed_form",
        summary: "Newton multipliers match (AA^T)^-1 (b - A wx) for the l2 family",
        tolerance: ORACLE_AGREEMENT,
        run: l2_closed_form,
    },
    Check {
        name: "mclr_equivalence",
        summary: "exponential family with sum-to-one gives softmax NLL + 1",
        tolerance: ORACLE_AGREEMENT,
        run: mclr_equivalence,
    },
    Check {
        name: "nullspace",
        summary: "A annihilates the eliminated l2 weight gradient for feasible targets",
        tolerance: NULLSPACE,
        run: nullspace,
    },
    Check {
        name: "grad_lambda",
        summary: "A sigma(u) - b matches finite differences of the loss",
        tolerance: GRADIENT_REL,
        run: grad_lambda_fd,
    },
    Check {
        name: "grad_weights",
        summary: "x (z - y)^T and z - y match finite differences of the loss",
        tolerance: GRADIENT_REL,
        run: grad_weights_fd,
    },
    Check {
        name: "lambda_hessian",
        summary: "A diag(sigma') A^T matches finite differences of the gradient",
        tolerance: GRADIENT_REL,
        run: lambda_hessian_fd,
    },
    Check {
        name: "backprop",
        summary: "network reverse mode matches finite differences",
        tolerance: GRADIENT_REL,
        run: backprop_fd,
    },
    Check {
        name: "newton_feasibility",
        summary: "Newton mode reaches ||Az - b||_inf <= 1e-8 on logistic instances",
        tolerance: NEWTON_FEASIBILITY,
        run: newton_feasibility,
    },
    Check {
        name: "gd_feasibility",
        summary: "fraction of gradient-descent solves above 1e-2 infeasibility",
        tolerance: 1.0 - GD_SUCCESS_FRACTION,
        run: gd_feasibility,
    },
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Runs every check with thresholds multiplied by `scale`.
pub fn run_suite(scale: f64) -> Report {
    let checks = CHECKS
        .iter()
        .map(|c| {
            let tolerance = c.tolerance * scale;
            match (c.run)() {
                Ok(measured) => CheckOutcome {
                    name: c.name,
                    summary: c.summary,
                    measured,
                    tolerance,
                    passed: measured <= tolerance,
                    error: None,
                },
                Err(e) => CheckOutcome {
                    name: c.name,
                    summary: c.summary,
                    measured: f64::INFINITY,
                    tolerance,
                    passed: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Report {
        tolerance_scale: scale,
        checks,
    }
}

fn scaled(a: f64, reference: f64) -> f64 {
    (a - reference).abs() / reference.abs().max(1.0)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

fn all_families() -> Vec<SigmoidFamily> {
    vec![
        SigmoidFamily::Exp,
        SigmoidFamily::Logistic,
        SigmoidFamily::Tanh,
        SigmoidFamily::srlu(0.5, 2.0).expect("valid parameters"),
        SigmoidFamily::L2,
    ]
}

/// A point well inside the family's domain.
fn domain_sample(family: SigmoidFamily, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        SigmoidFamily::Exp => rng.gen_range(0.1..2.0),
        SigmoidFamily::Logistic => rng.gen_range(0.05..0.95),
        SigmoidFamily::Tanh => rng.gen_range(-0.9..0.9),
        _ => rng.gen_range(-2.0..2.0),
    }
}

fn random_constraints(rng: &mut ChaCha8Rng, i: usize, k: usize) -> Result<ConstraintSet> {
    ConstraintSet::new(normal_matrix(rng, i, k), None)
}

struct ClosedForm {
    family: SigmoidFamily,
    sigma: fn(f64) -> f64,
    phi: fn(f64) -> f64,
    inverse: fn(f64) -> f64,
    psi: fn(f64) -> f64,
    z_grid: (f64, f64),
}

fn closed_form_table() -> [ClosedForm; 4] {
    [
        ClosedForm {
            family: SigmoidFamily::Exp,
            sigma: f64::exp,
            phi: f64::exp,
            inverse: f64::ln,
            psi: |z| z * z.ln() - z,
            z_grid: (1e-3, 20.0),
        },
        ClosedForm {
            family: SigmoidFamily::Logistic,
            sigma: |u| 1.0 / (1.0 + (-u).exp()),
            phi: |u| u.max(0.0) + (-u.abs()).exp().ln_1p(),
            inverse: |z| (z / (1.0 - z)).ln(),
            psi: |z| z * z.ln() + (1.0 - z) * (1.0 - z).ln(),
            z_grid: (1e-3, 1.0 - 1e-3),
        },
        ClosedForm {
            family: SigmoidFamily::Tanh,
            sigma: f64::tanh,
            phi: |u| u.cosh().ln(),
            inverse: f64::atanh,
            psi: |z| 0.5 * ((1.0 + z) * (1.0 + z).ln() + (1.0 - z) * (1.0 - z).ln()),
            z_grid: (-1.0 + 1e-3, 1.0 - 1e-3),
        },
        ClosedForm {
            family: SigmoidFamily::L2,
            sigma: |u| u,
            phi: |u| 0.5 * u * u,
            inverse: |z| z,
            psi: |z| 0.5 * z * z,
            z_grid: (-GRID_HALF_WIDTH, GRID_HALF_WIDTH),
        },
    ]
}

fn closed_forms() -> Result<f64> {
    let mut worst = 0.0f64;
    let us = linspace(-GRID_HALF_WIDTH, GRID_HALF_WIDTH, GRID_POINTS);
    for cf in closed_form_table() {
        let f = cf.family;
        for &u in &us {
            worst = worst.max(scaled(f.sigma(u)?, (cf.sigma)(u)));
            worst = worst.max(scaled(f.phi(u)?, (cf.phi)(u)));
        }
        let zs = linspace(cf.z_grid.0, cf.z_grid.1, GRID_POINTS);
        for (&z, &v) in zs.iter().zip(zs.iter().rev()) {
            worst = worst.max(scaled(f.inverse_sigma(z)?, (cf.inverse)(z)));
            worst = worst.max(scaled(f.negentropy(z)?, (cf.psi)(z)));
            let b = (cf.psi)(z) - (cf.psi)(v) - (cf.inverse)(v) * (z - v);
            worst = worst.max(scaled(f.bregman(z, v)?, b));
        }
    }
    Ok(worst)
}

fn phi_antiderivative() -> Result<f64> {
    let mut worst = 0.0f64;
    for f in all_families() {
        for u in linspace(-ROUND_TRIP_HALF_WIDTH, ROUND_TRIP_HALF_WIDTH, 101) {
            let fd = (f.phi(u + FD_STEP)? - f.phi(u - FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(scaled(fd, f.sigma(u)?));
        }
    }
    Ok(worst)
}

fn inverse_round_trip() -> Result<f64> {
    let mut worst = 0.0f64;
    for f in all_families() {
        for u in linspace(-ROUND_TRIP_HALF_WIDTH, ROUND_TRIP_HALF_WIDTH, GRID_POINTS) {
            worst = worst.max(scaled(f.inverse_sigma(f.sigma(u)?)?, u));
        }
    }
    Ok(worst)
}

fn bregman_nonnegative() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for f in all_families() {
        for _ in 0..500 {
            let (z, v) = (domain_sample(f, &mut rng), domain_sample(f, &mut rng));
            worst = worst.max(-f.bregman(z, v)?);
            worst = worst.max(-f.bregman(z, z)?);
        }
    }
    Ok(if worst > 0.0 { worst } else { 0.0 })
}

fn bregman_difference() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut worst = 0.0f64;
    for f in all_families() {
        for _ in 0..200 {
            let (y, z, v) = (domain_sample(f, &mut rng), domain_sample(f, &mut rng), domain_sample(f, &mut rng));
            let direct = f.bregman(y, v)? - f.bregman(z, v)?;
            worst = worst.max(scaled(f.bregman_difference(y, z, v)?, direct));
        }
    }
    Ok(worst)
}

fn projection_identities() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.gen_range(1..=4);
        let k = rng.gen_range(i + 1..=i + 6);
        let cs = random_constraints(&mut rng, i, k)?;
        let a = cs.matrix();
        let pr = cs.projections();
        let checks = [
            (&pr.p * &pr.p - &pr.p).amax(),
            (a * &pr.p).amax(),
            (a * &pr.q - DMatrix::<f64>::identity(i, i)).amax(),
            (&pr.p * &pr.q).amax(),
        ];
        worst = checks.iter().fold(worst, |m, v| m.max(*v));
    }
    Ok(worst)
}

fn l2_closed_form() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let i = rng.gen_range(2..=4);
        let k = rng.gen_range(5..=10);
        let cs = random_constraints(&mut rng, i, k)?;
        let layer = LagrangeLayer::new(SigmoidFamily::L2, cs);
        let wx = normal_vector(&mut rng, k);
        let b = normal_vector(&mut rng, i);
        let st = solve_layer(&layer, &wx, &b, &DVector::zeros(i), &SolverConfig::newton())?;
        let oracle = layer.constraints().l2_lambda(&wx, &b)?;
        worst = worst.max((&st.lam - oracle).amax());
    }
    Ok(worst)
}

fn mclr_equivalence() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (k, j) = (5, 8);
    let cs = ConstraintSet::new(DMatrix::from_element(1, k, 1.0), None)?;
    let b = DVector::from_element(1, 1.0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let model = DualModel::new(normal_matrix(&mut rng, j, k), normal_vector(&mut rng, k), SigmoidFamily::Exp, cs.clone())?;
        let x = normal_vector(&mut rng, j);
        let class = rng.gen_range(0..k);
        let y = DVector::from_fn(k, |r, _| f64::from(u8::from(r == class)));
        let st = solve_layer(model.layer(), &model.wx(&x)?, &b, &DVector::zeros(1), &SolverConfig::newton())?;
        let wx = model.wx(&x)?;
        let nll = log_sum_exp(wx.as_slice()) - wx[class];
        worst = worst.max(scaled(model.dual_loss_value(&x, &y, &b, &st.lam)?, nll + 1.0));
    }
    Ok(worst)
}

fn nullspace() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let i = rng.gen_range(1..=4);
        let k = rng.gen_range(i + 1..=10);
        let j = rng.gen_range(1..=6);
        let cs = random_constraints(&mut rng, i, k)?;
        let w = normal_matrix(&mut rng, j, k);
        let x = normal_vector(&mut rng, j);
        let y = normal_vector(&mut rng, k);
        let b = cs.apply(&y)?;
        worst = worst.max(cs.nullspace_gradient_check(&w, &x, &y, &b)?);
    }
    Ok(worst)
}

struct Instance {
    model: DualModel,
    x: DVector<f64>,
    y: DVector<f64>,
    b: DVector<f64>,
    lam: DVector<f64>,
}

fn gradient_instances(seed: u64) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for f in all_families() {
        for _ in 0..3 {
            let (i, k, j) = (2, 5, 3);
            let cs = random_constraints(&mut rng, i, k)?;
            let w = normal_matrix(&mut rng, j, k) * 0.5;
            let model = DualModel::new(w, normal_vector(&mut rng, k) * 0.5, f, cs)?;
            let x = DVector::from_fn(j, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(k, |_, _| domain_sample(f, &mut rng));
            let b = model.constraints().apply(&y)?;
            let lam = normal_vector(&mut rng, i) * 0.2;
            out.push(Instance { model, x, y, b, lam });
        }
    }
    Ok(out)
}

fn grad_lambda_fd() -> Result<f64> {
    let mut worst = 0.0f64;
    for t in gradient_instances(59)? {
        let g = t.model.grad_lambda(&t.x, &t.y, &t.b, &t.lam)?;
        for r in 0..t.lam.len() {
            let mut up = t.lam.clone();
            up[r] += FD_STEP;
            let mut dn = t.lam.clone();
            dn[r] -= FD_STEP;
            let fd = (t.model.dual_loss_value(&t.x, &t.y, &t.b, &up)?
                - t.model.dual_loss_value(&t.x, &t.y, &t.b, &dn)?)
                / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g[r], fd));
        }
    }
    Ok(worst)
}

fn grad_weights_fd() -> Result<f64> {
    let mut worst = 0.0f64;
    for t in gradient_instances(61)? {
        let (gw, gb) = t.model.grad_weights(&t.x, &t.y, &t.b, &t.lam)?;
        let loss = |w: DMatrix<f64>, bias: DVector<f64>| -> Result<f64> {
            let mut m = t.model.clone();
            m.set_parameters(w, bias)?;
            m.dual_loss_value(&t.x, &t.y, &t.b, &t.lam)
        };
        let (w, bias) = (t.model.weights().clone(), t.model.bias().clone());
        for idx in 0..w.len() {
            let mut up = w.clone();
            up[idx] += FD_STEP;
            let mut dn = w.clone();
            dn[idx] -= FD_STEP;
            let fd = (loss(up, bias.clone())? - loss(dn, bias.clone())?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(gw[idx], fd));
        }
        for idx in 0..bias.len() {
            let mut up = bias.clone();
            up[idx] += FD_STEP;
            let mut dn = bias.clone();
            dn[idx] -= FD_STEP;
            let fd = (loss(w.clone(), up)? - loss(w.clone(), dn)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(gb[idx], fd));
        }
    }
    Ok(worst)
}

fn lambda_hessian_fd() -> Result<f64> {
    let mut worst = 0.0f64;
    for t in gradient_instances(67)? {
        let h = t.model.lambda_hessian(&t.x, &t.lam)?;
        for c in 0..t.lam.len() {
            let mut up = t.lam.clone();
            up[c] += FD_STEP;
            let mut dn = t.lam.clone();
            dn[c] -= FD_STEP;
            let fd = (t.model.grad_lambda(&t.x, &t.y, &t.b, &up)? - t.model.grad_lambda(&t.x, &t.y, &t.b, &dn)?)
                / (2.0 * FD_STEP);
            for r in 0..t.lam.len() {
                worst = worst.max(relative_error(h[(r, c)], fd[r]));
            }
        }
    }
    Ok(worst)
}

fn backprop_fd() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    use Activation::*;
    let nets = [
        Mlp::glorot(&mut rng, &[2, 5, 10, 4, 1], &[Logistic, Logistic, Logistic, Identity])?,
        Mlp::glorot(&mut rng, &[2, 5, 10], &[Logistic, Identity])?,
    ];
    let mut worst = 0.0f64;
    for net in nets {
        let x = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let k = net.output_dim();
        let target = DVector::from_fn(k, |_, _| rng.gen_range(0.0..1.0));
        let loss = |m: &Mlp| -> Result<f64> { Ok(bce_with_logits(&m.predict(&x)?, &target)?.0) };
        let (out, tape) = net.forward(&x)?;
        let grads = net.backward(&tape, &bce_with_logits(&out, &target)?.1)?;
        for (li, g) in grads.layers.iter().enumerate() {
            for idx in 0..g.weights.len() {
                let perturbed = |delta: f64| -> Result<f64> {
                    let mut layers = net.layers().to_vec();
                    layers[li].weights[idx] += delta;
                    loss(&Mlp::new(layers)?)
                };
                let fd = (perturbed(FD_STEP)? - perturbed(-FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(g.weights[idx], fd));
            }
            for idx in 0..g.bias.len() {
                let perturbed = |delta: f64| -> Result<f64> {
                    let mut layers = net.layers().to_vec();
                    layers[li].bias[idx] += delta;
                    loss(&Mlp::new(layers)?)
                };
                let fd = (perturbed(FD_STEP)? - perturbed(-FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(g.bias[idx], fd));
            }
        }
    }
    Ok(worst)
}

/// A layer with its `wx` and `b`.
type FeasibilityCase = (LagrangeLayer, DVector<f64>, DVector<f64>);

/// Logistic instances with `K = 10`, `I = 4`, unit-normal `A` and `wx`, and
/// targets `y = sigma(N(0,1))` so that `b = A y` is attainable.
fn feasibility_instances(seed: u64, n: usize) -> Result<Vec<FeasibilityCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let cs = random_constraints(&mut rng, 4, 10)?;
            let wx = normal_vector(&mut rng, 10);
            let y = normal_vector(&mut rng, 10).map(|v| 1.0 / (1.0 + (-v).exp()));
            let b = cs.apply(&y)?;
            Ok((LagrangeLayer::new(SigmoidFamily::Logistic, cs), wx, b))
        })
        .collect()
}

fn direct_infeasibility(layer: &LagrangeLayer, wx: &DVector<f64>, b: &DVector<f64>, cfg: &SolverConfig) -> Result<f64> {
    let st = solve_layer(layer, wx, b, &DVector::zeros(b.len()), cfg)?;
    let z = layer.predictor(wx, &st.lam)?;
    layer.constraints().infeasibility(&z, b)
}

fn newton_feasibility() -> Result<f64> {
    let mut worst = 0.0f64;
    for (layer, wx, b) in feasibility_instances(73, 50)? {
        worst = worst.max(direct_infeasibility(&layer, &wx, &b, &SolverConfig::newton())?);
    }
    Ok(worst)
}

fn gd_feasibility() -> Result<f64> {
    let instances = feasibility_instances(79, 200)?;
    let mut failures = 0usize;
    for (layer, wx, b) in &instances {
        if direct_infeasibility(layer, wx, b, &SolverConfig::default())? > GD_FEASIBILITY {
            failures += 1;
        }
    }
    Ok(failures as f64 / instances.len() as f64)
}
