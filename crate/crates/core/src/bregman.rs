//! Generalized sigmoids and the Bregman divergences they induce.
//!
//! A [`SigmoidFamily`] bundles a strictly increasing activation `sigma`, its
//! antiderivative `phi`, the inverse `u = sigma^-1`, the negative entropy
//! `psi(z) = z u(z) - phi(u(z))` and the Bregman divergence built from `psi`.
//! Pairing the activation with `phi` in the loss is what lets the Lagrange
//! parameters act as ordinary hidden units.
//!
//! | name        | sigma(u)                 | phi(u)                    | z domain   |
//! |-------------|--------------------------|---------------------------|------------|
//! | `exp`       | `e^u`                    | `e^u`                     | `(0, inf)` |
//! | `sig`       | `1 / (1 + e^-u)`         | `log(1 + e^u)`            | `(0, 1)`   |
//! | `tanh`      | `tanh u`                 | `log cosh u`              | `(-1, 1)`  |
//! | `srlu(a,b)` | softmax-weighted `a u, b u` | `log(e^{au^2/2} + e^{bu^2/2})` | `R` |
//! | `l2`        | `u`                      | `u^2 / 2`                 | `R`        |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tolerances::SRLU_INVERSE_RESIDUAL;

/// Largest argument for which `e^u` is finite.
pub const EXP_OVERFLOW: f64 = 709.782_712_893_384;

/// Parameters of the soft rectified linear unit. Construction enforces
/// `a > 0`, `b > 0`, `a != b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrluParams {
    a: f64,
    b: f64,
}

impl SrluParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a <= 0.0 || b <= 0.0 || a == b {
            return Err(Error::InvalidFamily(format!(
                "srlu requires finite a > 0, b > 0 with a != b (got a={a}, b={b})"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    fn slope_bounds(&self) -> (f64, f64) {
        (self.a.min(self.b), self.a.max(self.b))
    }

    /// Mixing weight on the `a` branch, `e^{au^2/2} / (e^{au^2/2} + e^{bu^2/2})`.
    fn weight_a(&self, u: f64) -> f64 {
        logistic((self.a - self.b) * u * u / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmoidFamily {
    Exp,
    Logistic,
    Tanh,
    Srlu(SrluParams),
    L2,
}

/// Open interval `(lower, upper)` of admissible predictor values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub lower: f64,
    pub upper: f64,
}

impl Domain {
    pub fn contains(&self, z: f64) -> bool {
        z > self.lower && z < self.upper
    }

    pub fn contains_closure(&self, z: f64) -> bool {
        z >= self.lower && z <= self.upper
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lower, self.upper)
    }
}

/// `1 / (1 + e^-x)` without overflow for either sign.
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl SigmoidFamily {
    pub fn srlu(a: f64, b: f64) -> Result<Self> {
        SrluParams::new(a, b).map(SigmoidFamily::Srlu)
    }

    /// Canonical name used in configs, checkpoints and CLI flags.
    pub fn name(&self) -> String {
        match self {
            SigmoidFamily::Exp => "exp".into(),
            SigmoidFamily::Logistic => "sig".into(),
            SigmoidFamily::Tanh => "tanh".into(),
            SigmoidFamily::Srlu(p) => format!("srlu({},{})", p.a, p.b),
            SigmoidFamily::L2 => "l2".into(),
        }
    }

    pub fn domain(&self) -> Domain {
        let (lower, upper) = match self {
            SigmoidFamily::Exp => (0.0, f64::INFINITY),
            SigmoidFamily::Logistic => (0.0, 1.0),
            SigmoidFamily::Tanh => (-1.0, 1.0),
            // sigma(u) = u m(u) with m between the two slopes, so the range is R.
            SigmoidFamily::Srlu(_) | SigmoidFamily::L2 => (f64::NEG_INFINITY, f64::INFINITY),
        };
        Domain { lower, upper }
    }

    pub fn has_closed_form_inverse(&self) -> bool {
        !matches!(self, SigmoidFamily::Srlu(_))
    }

    fn check_u(&self, u: f64) -> Result<()> {
        if !u.is_finite() {
            return Err(Error::NonFinite {
                context: "activation argument",
                value: u,
            });
        }
        if matches!(self, SigmoidFamily::Exp) && u > EXP_OVERFLOW {
            return Err(self.range_error(u));
        }
        Ok(())
    }

    fn check_z(&self, z: f64) -> Result<()> {
        let domain = self.domain();
        if z.is_nan() || !domain.contains(z) || z.is_infinite() {
            return Err(Error::Domain {
                family: self.name(),
                value: z,
                domain: domain.to_string(),
            });
        }
        Ok(())
    }

    fn range_error(&self, value: f64) -> Error {
        Error::Range {
            family: self.name(),
            value,
        }
    }

    fn finite(&self, value: f64, at: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(self.range_error(at))
        }
    }

    /// The activation `sigma(u)`.
    pub fn sigma(&self, u: f64) -> Result<f64> {
        self.check_u(u)?;
        let z = match self {
            SigmoidFamily::Exp => u.exp(),
            SigmoidFamily::Logistic => logistic(u),
            SigmoidFamily::Tanh => u.tanh(),
            SigmoidFamily::Srlu(p) => {
                let w = p.weight_a(u);
                u * (p.b + (p.a - p.b) * w)
            }
            SigmoidFamily::L2 => u,
        };
        self.finite(z, u)
    }

    /// Derivative `sigma'(u)`, strictly positive for every family.
    pub fn sigma_prime(&self, u: f64) -> Result<f64> {
        self.check_u(u)?;
        let d = match self {
            SigmoidFamily::Exp => u.exp(),
            SigmoidFamily::Logistic => {
                let s = logistic(u);
                s * (1.0 - s)
            }
            SigmoidFamily::Tanh => {
                let c = u.cosh();
                1.0 / (c * c)
            }
            SigmoidFamily::Srlu(p) => {
                let w = p.weight_a(u);
                let diff = p.a - p.b;
                p.b + diff * w + diff * diff * w * (1.0 - w) * u * u
            }
            SigmoidFamily::L2 => 1.0,
        };
        self.finite(d, u)
    }

    /// The sigmoid integral `phi(u)`, with each family's antiderivative
    /// constant as listed in the module table.
    pub fn phi(&self, u: f64) -> Result<f64> {
        self.check_u(u)?;
        let v = match self {
            SigmoidFamily::Exp => u.exp(),
            SigmoidFamily::Logistic => softplus(u),
            SigmoidFamily::Tanh => {
                let x = u.abs();
                x + (-2.0 * x).exp().ln_1p() - std::f64::consts::LN_2
            }
            SigmoidFamily::Srlu(p) => {
                let (ea, eb) = (p.a * u * u / 2.0, p.b * u * u / 2.0);
                ea.max(eb) + (-(ea - eb).abs()).exp().ln_1p()
            }
            SigmoidFamily::L2 => u * u / 2.0,
        };
        self.finite(v, u)
    }

    /// The inverse sigmoid `u(z)`. SRLU has no closed form and is inverted
    /// numerically by safeguarded Newton inside a guaranteed bracket.
    pub fn inverse_sigma(&self, z: f64) -> Result<f64> {
        self.check_z(z)?;
        Ok(match self {
            SigmoidFamily::Exp => z.ln(),
            SigmoidFamily::Logistic => z.ln() - (-z).ln_1p(),
            SigmoidFamily::Tanh => z.atanh(),
            SigmoidFamily::Srlu(p) => srlu_inverse(p, z),
            SigmoidFamily::L2 => z,
        })
    }

    /// Generalized negative entropy `psi(z) = z u(z) - phi(u(z))`.
    pub fn negentropy(&self, z: f64) -> Result<f64> {
        let u = self.inverse_sigma(z)?;
        Ok(z * u - self.phi(u)?)
    }

    /// `psi` extended continuously to the closed domain. Used only to anchor
    /// loss values; the derivative still diverges on the boundary.
    pub fn negentropy_on_closure(&self, z: f64) -> Result<f64> {
        match self {
            SigmoidFamily::Exp if z == 0.0 => Ok(0.0),
            SigmoidFamily::Logistic if z == 0.0 || z == 1.0 => Ok(0.0),
            SigmoidFamily::Tanh if z == 1.0 || z == -1.0 => Ok(std::f64::consts::LN_2),
            _ => self.negentropy(z),
        }
    }

    /// Bregman divergence `B(z || v) = z (u(z) - u(v)) - phi(u(z)) + phi(u(v))`.
    pub fn bregman(&self, z: f64, v: f64) -> Result<f64> {
        let uz = self.inverse_sigma(z)?;
        let uv = self.inverse_sigma(v)?;
        Ok(z * (uz - uv) - self.phi(uz)? + self.phi(uv)?)
    }

    /// `B(y || v) - B(z || v)` in the reduced form `(z - y) u(v) + psi(y) - psi(z)`,
    /// in which `v` enters only through `u(v)`.
    pub fn bregman_difference(&self, y: f64, z: f64, v: f64) -> Result<f64> {
        let uv = self.inverse_sigma(v)?;
        Ok((z - y) * uv + self.negentropy(y)? - self.negentropy(z)?)
    }
}

fn srlu_inverse(p: &SrluParams, z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let family = SigmoidFamily::Srlu(*p);
    let sigma = |u: f64| family.sigma(u).unwrap_or(f64::NAN);
    let (slow, fast) = p.slope_bounds();
    // sigma(u) = u m(u) with slow <= m <= fast, so the root lies in [z/fast, z/slow].
    let (mut lo, mut hi) = if z > 0.0 {
        (z / fast, z / slow)
    } else {
        (z / slow, z / fast)
    };
    let target = SRLU_INVERSE_RESIDUAL * z.abs().max(1.0);
    let mut u = z / ((slow + fast) / 2.0);
    for _ in 0..200 {
        let r = sigma(u) - z;
        if r.abs() <= target {
            return u;
        }
        if r > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let d = family.sigma_prime(u).unwrap_or(f64::NAN);
        let newton = u - r / d;
        u = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * u.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    u
}

impl fmt::Display for SigmoidFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for SigmoidFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "exp" => return Ok(SigmoidFamily::Exp),
            "sig" => return Ok(SigmoidFamily::Logistic),
            "tanh" => return Ok(SigmoidFamily::Tanh),
            "l2" => return Ok(SigmoidFamily::L2),
            _ => {}
        }
        let args = t
            .strip_prefix("srlu(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidFamily(s.to_string()))?;
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::InvalidFamily(s.to_string()));
        }
        let parse = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::InvalidFamily(s.to_string()))
        };
        SigmoidFamily::srlu(parse(parts[0])?, parse(parts[1])?)
    }
}

impl Serialize for SigmoidFamily {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for SigmoidFamily {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
