//! Reference implementations shared by the integration tests. Nothing in this
//! module calls the library's numerics; it is written from the closed forms
//! directly so that agreement is evidence rather than tautology.

#![allow(dead_code)]

use lagrange_units::SigmoidFamily;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian `I x K` matrix whose smallest singular value is at least 0.1.
pub fn full_rank_matrix(rng: &mut ChaCha8Rng, i: usize, k: usize) -> DMatrix<f64> {
    loop {
        let a = normal_matrix(rng, i, k, 1.0);
        if a.clone().svd(false, false).singular_values.min() >= 0.1 {
            return a;
        }
    }
}

/// `n` points evenly spaced on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// `n` points evenly spaced strictly inside `(lo, hi)`.
pub fn interior_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| lo + (hi - lo) * i as f64 / (n + 1) as f64).collect()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `|a - b| / max(|a|, |b|, 1e-3)`; the floor keeps vanishing entries from
/// turning rounding noise into large relative errors.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Composite five-point Gauss-Legendre rule on `[a, b]`.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683_1,
        0.0,
        0.538_469_310_105_683_1,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189_1,
        0.478_628_670_499_366_5,
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
    ];
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + width * (p as f64 + 0.5);
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            total += w * f(mid + 0.5 * width * x);
        }
    }
    total * 0.5 * width
}

/// Root of an increasing `f` on `[lo, hi]` by bisection.
pub fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `-log softmax(wx)_c` via a max-shifted log-sum-exp.
pub fn softmax_nll(wx: &DVector<f64>, class: usize) -> f64 {
    let m = wx.max();
    let lse = m + wx.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - wx[class]
}

/// `Q = A^+` and `P = I - A^+ A` from the SVD pseudo-inverse.
pub fn svd_projections(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let pinv = a.clone().pseudo_inverse(1e-12).expect("svd converges");
    let p = DMatrix::identity(a.ncols(), a.ncols()) - &pinv * a;
    (p, pinv)
}

/// `(A A^T)^-1 (b - A wx)` through an LU factorization.
pub fn l2_lambda_lu(a: &DMatrix<f64>, wx: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let gram = a * a.transpose();
    gram.lu().solve(&(b - a * wx)).expect("gram matrix is invertible")
}

/// One row of the closed-form table: activation, integral, inverse,
/// negative entropy and divergence.
#[derive(Clone, Copy)]
pub struct TableRow {
    pub name: &'static str,
    pub family: SigmoidFamily,
    pub sigma: fn(f64) -> f64,
    pub phi: fn(f64) -> f64,
    pub inverse: fn(f64) -> f64,
    pub psi: fn(f64) -> f64,
    pub bregman: fn(f64, f64) -> f64,
    /// 201 admissible predictor values.
    pub z_grid: fn() -> Vec<f64>,
}

pub fn table_rows() -> [TableRow; 4] {
    [
        TableRow {
            name: "exp",
            family: SigmoidFamily::Exp,
            sigma: |u| u.exp(),
            phi: |u| u.exp(),
            inverse: |z| z.ln(),
            psi: |z| z * z.ln() - z,
            bregman: |z, v| z * (z / v).ln() - z + v,
            z_grid: || grid(-10.0, 10.0, 201).into_iter().map(f64::exp).collect(),
        },
        TableRow {
            name: "sig",
            family: SigmoidFamily::Logistic,
            sigma: |u| 1.0 / (1.0 + (-u).exp()),
            phi: |u| (1.0 + u.exp()).ln(),
            inverse: |z| (z / (1.0 - z)).ln(),
            psi: |z| z * z.ln() + (1.0 - z) * (1.0 - z).ln(),
            bregman: |z, v| z * (z / v).ln() + (1.0 - z) * ((1.0 - z) / (1.0 - v)).ln(),
            z_grid: || interior_grid(0.0, 1.0, 201),
        },
        TableRow {
            name: "tanh",
            family: SigmoidFamily::Tanh,
            sigma: |u| u.tanh(),
            phi: |u| u.cosh().ln(),
            inverse: |z| 0.5 * ((1.0 + z) / (1.0 - z)).ln(),
            psi: |z| (1.0 + z) / 2.0 * (1.0 + z).ln() + (1.0 - z) / 2.0 * (1.0 - z).ln(),
            bregman: |z, v| {
                (1.0 + z) / 2.0 * ((1.0 + z) / (1.0 + v)).ln() + (1.0 - z) / 2.0 * ((1.0 - z) / (1.0 - v)).ln()
            },
            z_grid: || interior_grid(-1.0, 1.0, 201),
        },
        TableRow {
            name: "l2",
            family: SigmoidFamily::L2,
            sigma: |u| u,
            phi: |u| u * u / 2.0,
            inverse: |z| z,
            psi: |z| z * z / 2.0,
            bregman: |z, v| 0.5 * (z - v) * (z - v),
            z_grid: || grid(-10.0, 10.0, 201),
        },
    ]
}

/// SRLU activation in its two-branch form.
pub fn srlu_sigma(a: f64, b: f64, u: f64) -> f64 {
    let (ea, eb) = ((a * u * u / 2.0).exp(), (b * u * u / 2.0).exp());
    (a * u * ea + b * u * eb) / (ea + eb)
}

/// The same activation with numerator and denominator divided by the larger
/// exponential, so it stays finite for any `u`.
pub fn srlu_sigma_rescaled(a: f64, b: f64, u: f64) -> f64 {
    let wa = 1.0 / (1.0 + ((b - a) * u * u / 2.0).exp());
    u * (a * wa + b * (1.0 - wa))
}

/// Inverse SRLU by bisection. Since `b <= sigma(u)/u <= a`, the root lies
/// between `z/a` and `z/b`.
pub fn srlu_inverse_bisect(a: f64, b: f64, z: f64) -> f64 {
    let (lo, hi) = if z >= 0.0 { (z / a, z / b) } else { (z / b, z / a) };
    bisect(|u| srlu_sigma_rescaled(a, b, u), z, lo - 1.0, hi + 1.0)
}

pub fn srlu_phi(a: f64, b: f64, u: f64) -> f64 {
    ((a * u * u / 2.0).exp() + (b * u * u / 2.0).exp()).ln()
}

/// Every family exercised by the gradient and solver checks.
pub fn all_families() -> Vec<SigmoidFamily> {
    vec![
        SigmoidFamily::Exp,
        SigmoidFamily::Logistic,
        SigmoidFamily::Tanh,
        SigmoidFamily::srlu(2.0, 0.1).expect("valid parameters"),
        SigmoidFamily::L2,
    ]
}

/// A target inside the family's predictor domain: `sigma` of a Gaussian draw.
pub fn target_in_domain(rng: &mut ChaCha8Rng, family: SigmoidFamily, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| {
        let u: f64 = rng.sample(StandardNormal);
        family.sigma(u).expect("finite activation")
    })
}
