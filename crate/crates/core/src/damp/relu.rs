//! Posterior moments across a ReLU `u = max(z, 0)` given a Gaussian forward
//! message on `z` and a Gaussian backward message on `u`.
//!
//! With forward `N(μf, vf)` and backward `N(μb, vb)` the joint splits into
//! two branches:
//! - inactive (`z < 0`, `u = 0`), weight `Q(μf/√vf)·N(0; μb, vb)`;
//! - active (`z = u > 0`), weight `N(0; μf - μb, vf + vb)·Q(-m*/√v*)`, with
//!   `(m*, v*)` the product of the two messages.
//!
//! `u` is a point mass at zero plus a positively truncated `N(m*, v*)`; `z`
//! is a negatively truncated `N(μf, vf)` plus the same positive component.

use crate::gaussian::{trunc_moments, GaussianMsg, Side, TruncMoments};
use crate::prior::sigmoid;

/// Gaussian projections of the `u` and `z` posteriors and the branch split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluPosterior {
    pub u: GaussianMsg,
    pub z: GaussianMsg,
    /// Posterior probability of the inactive branch.
    pub inactive: f64,
    /// Posterior probability of the active branch; `inactive + active = 1`.
    pub active: f64,
    /// Both branch weights underflowed; the dominant branch by log weight
    /// was kept.
    pub degenerate: bool,
}

fn mixture(w0: f64, a: (f64, f64), w1: f64, b: (f64, f64)) -> GaussianMsg {
    let mean = w0 * a.0 + w1 * b.0;
    let d = b.0 - a.0;
    GaussianMsg::new(mean, w0 * a.1 + w1 * b.1 + w0 * w1 * d * d)
}

fn moments(t: &TruncMoments) -> (f64, f64) {
    (t.mean, t.var)
}

pub fn relu_coupling(forward: GaussianMsg, backward: GaussianMsg) -> ReluPosterior {
    let (mf, vf) = (forward.mean, forward.var);
    if !(vf > 0.0) {
        let on = mf > 0.0;
        return ReluPosterior {
            u: GaussianMsg::point(mf.max(0.0)),
            z: GaussianMsg::point(mf),
            inactive: if on { 0.0 } else { 1.0 },
            active: if on { 1.0 } else { 0.0 },
            degenerate: false,
        };
    }

    if backward.is_flat() {
        let neg = trunc_moments(forward, Side::Negative);
        let pos = trunc_moments(forward, Side::Positive);
        let (p0, p1) = (neg.mass, pos.mass);
        return ReluPosterior {
            u: mixture(p0, (0.0, 0.0), p1, moments(&pos)),
            z: forward,
            inactive: p0,
            active: p1,
            degenerate: false,
        };
    }

    let (mb, vb) = (backward.mean, backward.var.max(f64::MIN_POSITIVE));
    let vs = vf + vb;
    let star = GaussianMsg::new((mb * vf + mf * vb) / vs, vf * vb / vs);
    let neg = trunc_moments(forward, Side::Negative);
    let pos = trunc_moments(star, Side::Positive);
    // neg.log_mass = ln Q(μf/√vf), pos.log_mass = ln Q(-m*/√v*).
    let log_w0 = neg.log_mass + GaussianMsg::new(mb, vb).log_density(0.0);
    let log_w1 = GaussianMsg::new(mf - mb, vs).log_density(0.0) + pos.log_mass;
    let diff = log_w0 - log_w1;
    let degenerate = !diff.is_finite();
    let (p0, p1) = if degenerate {
        if log_w0 >= log_w1 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        (sigmoid(diff), sigmoid(-diff))
    };
    ReluPosterior {
        u: mixture(p0, (0.0, 0.0), p1, moments(&pos)),
        z: mixture(p0, moments(&neg), p1, moments(&pos)),
        inactive: p0,
        active: p1,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_backward_standard_forward() {
        let r = relu_coupling(GaussianMsg::new(0.0, 1.0), GaussianMsg::FLAT);
        assert!((r.inactive - 0.5).abs() < 1e-15);
        assert!((r.u.mean - 0.398_942_280_401_432_7).abs() < 1e-14);
        assert_eq!(r.z, GaussianMsg::new(0.0, 1.0));
        assert!((r.u.var - (0.5 - 1.0 / (2.0 * std::f64::consts::PI))).abs() < 1e-14);
    }

    #[test]
    fn deep_positive_is_identity() {
        let r = relu_coupling(GaussianMsg::new(10.0, 1.0), GaussianMsg::FLAT);
        assert!((r.u.mean - 10.0).abs() < 1e-12);
        assert!((r.u.var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_forward_is_deterministic() {
        let r = relu_coupling(GaussianMsg::point(-2.0), GaussianMsg::new(1.0, 1.0));
        assert_eq!(r.u, GaussianMsg::point(0.0));
        assert_eq!(r.z, GaussianMsg::point(-2.0));
    }

    #[test]
    fn branch_masses_sum_to_one() {
        for &(mf, vf, mb, vb) in &[
            (0.3, 0.7, -1.0, 0.2),
            (-5.0, 0.1, 4.0, 0.01),
            (2.0, 3.0, 0.0, 1e-6),
        ] {
            let r = relu_coupling(GaussianMsg::new(mf, vf), GaussianMsg::new(mb, vb));
            assert!((r.inactive + r.active - 1.0).abs() < 1e-12);
            assert!(r.u.var >= 0.0 && r.z.var > 0.0);
        }
    }
}
