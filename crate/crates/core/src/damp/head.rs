//! Output likelihood heads: Gaussian regression and the probit-product
//! classification likelihood `∏_{m≠y} Q((z_m - z_y)/√v)`.

use crate::error::{Error, Result};
use crate::gaussian::{gauss_product, skew_normal_match, GaussianMsg, Tilt};

/// Output posterior of one unit with its AMP residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPosterior {
    pub z: GaussianMsg,
    pub s_hat: f64,
    pub v_s: f64,
}

/// `ŝ = (ẑ - p̂)/V`, `v_s = (1 - v_z/V)/V`, with `v_s ≥ 0`. A deterministic
/// pseudo-prior (`V = 0`) has no residual.
pub fn residual(p_hat: f64, v_p: f64, z: GaussianMsg) -> HeadPosterior {
    if !(v_p > 0.0) {
        return HeadPosterior {
            z,
            s_hat: 0.0,
            v_s: 0.0,
        };
    }
    let s_hat = (z.mean - p_hat) / v_p;
    let v_s = ((1.0 - z.var / v_p) / v_p).max(0.0);
    HeadPosterior { z, s_hat, v_s }
}

pub fn head_regression(p_hat: f64, v_p: f64, y: f64, noise_var: f64) -> HeadPosterior {
    let z = gauss_product(GaussianMsg::new(p_hat, v_p), GaussianMsg::new(y, noise_var));
    let total = v_p + noise_var;
    if !(total > 0.0) {
        return HeadPosterior {
            z,
            s_hat: 0.0,
            v_s: 0.0,
        };
    }
    if total.is_infinite() {
        return HeadPosterior {
            z,
            s_hat: 0.0,
            v_s: 0.0,
        };
    }
    HeadPosterior {
        z,
        s_hat: (y - p_hat) / total,
        v_s: 1.0 / total,
    }
}

/// Per-class output posteriors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPosterior {
    pub z: Vec<GaussianMsg>,
    /// Some tilt fell back to its untilted message.
    pub degenerate: bool,
}

fn tilted(prior: GaussianMsg, shift: f64, scale: f64, tilt: Tilt) -> (GaussianMsg, bool) {
    let t = skew_normal_match(prior, shift, scale, tilt);
    let fell_back = t.msg == prior && t.log_mass != 0.0;
    (t.msg, fell_back)
}

/// Moment-matched class posteriors under the probit-product likelihood.
///
/// The label class is tilted towards winning against each rival `m`
/// separately; each tilt's extrinsic part is a Gaussian message on `z_y`.
/// Every rival is then tilted towards losing against `z_y`'s cavity (all
/// label evidence except its own).
pub fn head_classification(
    p_hat: &[f64],
    v_p: &[f64],
    label: usize,
    noise_var: f64,
) -> Result<ClassPosterior> {
    let n = p_hat.len();
    if n < 2 || v_p.len() != n {
        return Err(Error::Shape(format!(
            "classification head needs at least two classes, got {n}"
        )));
    }
    if label >= n {
        return Err(Error::Shape(format!("label {label} outside {n} classes")));
    }
    let pseudo: Vec<GaussianMsg> = (0..n).map(|m| GaussianMsg::new(p_hat[m], v_p[m])).collect();
    if !(noise_var.is_finite()) || v_p.iter().any(|v| !(*v > 0.0)) {
        return Ok(ClassPosterior {
            z: pseudo,
            degenerate: !noise_var.is_infinite(),
        });
    }

    let y_msg = pseudo[label];
    let (eta0, tau0) = y_msg.natural();
    let mut degenerate = false;
    let mut ext = vec![(0.0, 0.0); n];
    let (mut eta_sum, mut tau_sum) = (eta0, tau0);
    for m in (0..n).filter(|&m| m != label) {
        let (t, bad) = tilted(y_msg, p_hat[m], (noise_var + v_p[m]).sqrt(), Tilt::Above);
        degenerate |= bad;
        let (eta, tau) = t.natural();
        let d_tau = (tau - tau0).max(0.0);
        let d_eta = if d_tau > 0.0 { eta - eta0 } else { 0.0 };
        ext[m] = (d_eta, d_tau);
        eta_sum += d_eta;
        tau_sum += d_tau;
    }

    let mut z = pseudo.clone();
    z[label] = GaussianMsg::from_natural(eta_sum, tau_sum);
    for m in (0..n).filter(|&m| m != label) {
        let cavity = GaussianMsg::from_natural(eta_sum - ext[m].0, tau_sum - ext[m].1);
        let (t, bad) = tilted(
            pseudo[m],
            cavity.mean,
            (noise_var + cavity.var).sqrt(),
            Tilt::Below,
        );
        degenerate |= bad;
        z[m] = t;
    }
    Ok(ClassPosterior { z, degenerate })
}
