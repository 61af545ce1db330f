//! Scalar Gaussian kernels: message products, upper-tail probabilities,
//! truncated moments, probit tilts and Gumbel moment matching.
//!
//! Tail quantities never go through `1 - Φ` or a ratio of two underflowing
//! numbers. The inverse Mills ratio `φ(a)/Q(a)` and the derived truncation
//! factors switch to a continued fraction once `a > 4`, which is where the
//! direct quotient starts losing digits.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const MILLS_CF_CUTOVER: f64 = 4.0;

/// A Gaussian message or marginal given by mean and variance.
///
/// A flat (uninformative) message has infinite variance and zero mean. A
/// zero variance is a point mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMsg {
    pub mean: f64,
    pub var: f64,
}

impl GaussianMsg {
    pub const FLAT: GaussianMsg = GaussianMsg {
        mean: 0.0,
        var: f64::INFINITY,
    };

    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn point(mean: f64) -> Self {
        Self { mean, var: 0.0 }
    }

    pub fn is_flat(&self) -> bool {
        self.var.is_infinite()
    }

    pub fn is_point(&self) -> bool {
        self.var == 0.0
    }

    pub fn precision(&self) -> f64 {
        1.0 / self.var
    }

    /// Builds a message from natural parameters `(mean/var, 1/var)`.
    /// Non-positive precision gives the flat message.
    pub fn from_natural(eta: f64, tau: f64) -> Self {
        if tau > 0.0 {
            Self {
                mean: eta / tau,
                var: 1.0 / tau,
            }
        } else {
            Self::FLAT
        }
    }

    /// `(mean/var, 1/var)`; `(0, 0)` for a flat message.
    pub fn natural(&self) -> (f64, f64) {
        if self.is_flat() {
            (0.0, 0.0)
        } else {
            (self.mean / self.var, 1.0 / self.var)
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * d * d / self.var - 0.5 * self.var.ln() - LN_SQRT_2PI
    }

    pub fn second_moment(&self) -> f64 {
        self.var + self.mean * self.mean
    }
}

/// Precision-weighted product of two Gaussian messages (renormalized).
///
/// A flat factor acts as the identity. Two flat inputs give a flat output.
pub fn gauss_product(a: GaussianMsg, b: GaussianMsg) -> GaussianMsg {
    if a.is_flat() {
        return b;
    }
    if b.is_flat() || a.is_point() {
        return a;
    }
    if b.is_point() {
        return b;
    }
    let pa = 1.0 / a.var;
    let pb = 1.0 / b.var;
    let var = 1.0 / (pa + pb);
    GaussianMsg {
        mean: var * (a.mean * pa + b.mean * pb),
        var,
    }
}

/// Divides `num` by `den`. Returns the flat message when the quotient has
/// no positive precision.
pub fn gauss_divide(num: GaussianMsg, den: GaussianMsg) -> GaussianMsg {
    let (en, tn) = num.natural();
    let (ed, td) = den.natural();
    let tau = tn - td;
    if tau <= 1e-300 * tn.max(1.0) {
        GaussianMsg::FLAT
    } else {
        GaussianMsg::from_natural(en - ed, tau)
    }
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Upper-tail probability `Q(x) = 1 - Φ(x)` of the standard normal.
pub fn q_func(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal CDF `Φ(x) = Q(-x)`.
pub fn norm_cdf(x: f64) -> f64 {
    q_func(-x)
}

/// `ln Q(x)`, finite for every finite `x`.
pub fn log_q(x: f64) -> f64 {
    if x < 0.0 {
        (-q_func(-x)).ln_1p()
    } else if x < 5.0 {
        q_func(x).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI - mills(x).ln()
    }
}

/// Scaled complementary error function `exp(x²)·erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        if x < -26.6 {
            return f64::INFINITY;
        }
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    // erfcx(x) = sqrt(2/π) / mills(x·√2)
    (2.0 / PI).sqrt() / mills(x * SQRT_2)
}

/// `k / (a + (k+1) / (a + (k+2) / (a + ...)))`, the tail of the Laplace
/// continued fraction for the Mills ratio. Only used for `a > 4`.
fn mills_cf(a: f64, k: u32) -> f64 {
    let depth = if a > 12.0 {
        40
    } else if a > 7.0 {
        90
    } else {
        240
    };
    let mut tail = 0.0;
    for j in (k..k + depth).rev() {
        tail = j as f64 / (a + tail);
    }
    tail
}

/// Inverse Mills ratio `φ(a)/Q(a)` (hazard of the standard normal).
pub fn mills(a: f64) -> f64 {
    if a > MILLS_CF_CUTOVER {
        a + 1.0 / (a + mills_cf(a, 2))
    } else if a < -38.0 {
        0.0
    } else {
        norm_pdf(a) / q_func(a)
    }
}

/// `mills(a) - a`, the mean excess of a standard normal truncated to `(a, ∞)`.
pub fn mills_excess(a: f64) -> f64 {
    if a > MILLS_CF_CUTOVER {
        1.0 / (a + mills_cf(a, 2))
    } else {
        mills(a) - a
    }
}

/// Variance of a standard normal truncated to `(a, ∞)`:
/// `1 - λ(λ - a)` with `λ = mills(a)`.
pub fn trunc_var_ratio(a: f64) -> f64 {
    if a > MILLS_CF_CUTOVER {
        let s = mills_cf(a, 2);
        let t = 1.0 / (a + s);
        (s - t) / (a + s)
    } else if a < -38.0 {
        1.0
    } else {
        let lam = mills(a);
        (1.0 - lam * (lam - a)).max(0.0)
    }
}

/// Half line kept by a truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

/// Mass and moments of a Gaussian restricted to a half line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncMoments {
    pub mass: f64,
    pub log_mass: f64,
    pub mean: f64,
    pub var: f64,
}

impl TruncMoments {
    /// The half line carries (numerically) no mass.
    pub fn is_degenerate(&self) -> bool {
        self.mass < 1e-300
    }
}

/// `(Q(a), ln Q(a), mills(a), trunc_var_ratio(a))` from a single erfc or
/// continued-fraction evaluation.
fn upper_tail(a: f64) -> (f64, f64, f64, f64) {
    if a > MILLS_CF_CUTOVER {
        let s = mills_cf(a, 2);
        let t = 1.0 / (a + s);
        let lam = a + t;
        let log_q = -0.5 * a * a - LN_SQRT_2PI - lam.ln();
        (log_q.exp(), log_q, lam, (s - t) / (a + s))
    } else if a < -38.0 {
        (1.0, 0.0, 0.0, 1.0)
    } else {
        let q = q_func(a);
        let log_q = if a < 0.0 {
            (-q_func(-a)).ln_1p()
        } else {
            q.ln()
        };
        let lam = norm_pdf(a) / q;
        (q, log_q, lam, (1.0 - lam * (lam - a)).max(0.0))
    }
}

/// Moments of `g` restricted to `z > 0` or `z < 0`.
///
/// `g` must be proper with positive variance. The moments stay accurate
/// when the mass underflows; check [`TruncMoments::is_degenerate`] before
/// using the mass itself.
pub fn trunc_moments(g: GaussianMsg, side: Side) -> TruncMoments {
    let sd = g.var.sqrt();
    let (a, sign) = match side {
        Side::Positive => (-g.mean / sd, 1.0),
        Side::Negative => (g.mean / sd, -1.0),
    };
    let (mass, log_mass, lam, ratio) = upper_tail(a);
    TruncMoments {
        mass,
        log_mass,
        mean: g.mean + sign * sd * lam,
        var: g.var * ratio,
    }
}

/// Direction of a probit tilt relative to its shift `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tilt {
    /// Factor `Q((c - z)/s)`: favors `z > c`.
    Above,
    /// Factor `Q((z - c)/s)`: favors `z < c`.
    Below,
}

/// Gaussian projection of a probit-tilted Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltedMoments {
    pub msg: GaussianMsg,
    /// Log normalizer `ln ∫ N(z; μ, v)·tilt(z) dz`.
    pub log_mass: f64,
}

/// Matches the first two moments of `N(z; prior)·Q((shift - z)/scale)`
/// (or the mirrored tilt) with a Gaussian.
pub fn skew_normal_match(prior: GaussianMsg, shift: f64, scale: f64, tilt: Tilt) -> TiltedMoments {
    debug_assert!(scale > 0.0);
    let (mu, c, sign) = match tilt {
        Tilt::Above => (prior.mean, shift, 1.0),
        Tilt::Below => (-prior.mean, -shift, -1.0),
    };
    let v = prior.var;
    let s2 = scale * scale;
    let total = v + s2;
    let sd = total.sqrt();
    // Normalizer is Φ(κ) = Q(-κ).
    let a = (c - mu) / sd;
    if a == f64::NEG_INFINITY {
        return TiltedMoments {
            msg: prior,
            log_mass: 0.0,
        };
    }
    let lam = mills(a);
    let mean = mu + v * lam / sd;
    let var = v * s2 / total + v * v / total * trunc_var_ratio(a);
    let log_mass = log_q(a);
    if !mean.is_finite() || !(var > 0.0) {
        log::warn!("probit tilt degenerate (a = {a}); keeping the untilted message");
        return TiltedMoments {
            msg: prior,
            log_mass,
        };
    }
    TiltedMoments {
        msg: GaussianMsg {
            mean: sign * mean,
            var,
        },
        log_mass,
    }
}

/// Location/scale of a minimum-type Gumbel density
/// `(1/β)·exp((x-α)/β - exp((x-α)/β))`, whose mean is `α - γβ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelParams {
    pub location: f64,
    pub scale: f64,
}

impl GumbelParams {
    pub fn mean(&self) -> f64 {
        self.location - EULER_GAMMA * self.scale
    }

    pub fn variance(&self) -> f64 {
        PI * PI / 6.0 * self.scale * self.scale
    }

    pub fn second_moment(&self) -> f64 {
        let m = self.mean();
        self.variance() + m * m
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let t = (x - self.location) / self.scale;
        t - t.exp() - self.scale.ln()
    }
}

/// Moment-matched Gumbel for a distribution with mean `mu` and second
/// moment `second_moment`: `β = (√6/π)·sd`, `α = μ + γβ`.
pub fn gumbel_fit(mu: f64, second_moment: f64) -> Result<GumbelParams> {
    let var = second_moment - mu * mu;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::NonPositiveVariance {
            mean: mu,
            second_moment,
        });
    }
    let scale = 6f64.sqrt() / PI * var.sqrt();
    Ok(GumbelParams {
        location: mu + EULER_GAMMA * scale,
        scale,
    })
}
