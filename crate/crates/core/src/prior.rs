//! Bernoulli-Gaussian group priors and the exact sum-product pass over
//! them (the "B" half of the turbo loop).
//!
//! A group is a set of parameters that are all zero together (a neuron's
//! outgoing weights) or all drawn from independent Gaussians. Evidence
//! about each element arrives from the network side as a Gaussian message
//! in natural form; each element contributes a log evidence ratio
//! `ln η = ln N(0; q̂, v_q) - ln N(0; q̂ - μ, v_q + v)` (inactive over active)
//! to the group's activity log-odds.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{gauss_product, GaussianMsg};
use crate::model::LayerParams;

/// Activity probabilities are clamped to `[RHO_EPS, 1 - RHO_EPS]` inside
/// log-odds arithmetic; exact 0 and 1 are handled separately.
pub const RHO_EPS: f64 = 1e-12;

/// Bernoulli-Gaussian group: activity probability plus per-element slab
/// moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BGGroup {
    pub rho: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BGGroup {
    pub fn new(rho: f64, mean: Vec<f64>, var: Vec<f64>) -> Self {
        debug_assert_eq!(mean.len(), var.len());
        Self { rho, mean, var }
    }

    pub fn scalar(rho: f64, mean: f64, var: f64) -> Self {
        Self {
            rho,
            mean: vec![mean],
            var: vec![var],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn element(&self, m: usize) -> GaussianMsg {
        GaussianMsg::new(self.mean[m], self.var[m])
    }

    /// Marginal mean and variance of element `m` under the mixture.
    pub fn marginal(&self, m: usize) -> (f64, f64) {
        mixture_moments(self.rho, self.mean[m], self.var[m])
    }
}

/// Messages from the prior side back to the network side.
///
/// Element `m` carries `ρ_m·N(μ_m, v_m) + (1 - ρ_m)·δ`; the slab moments are
/// copies of the prior's.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtrinsicSet {
    pub rho: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn logit(rho: f64) -> f64 {
    let r = rho.clamp(RHO_EPS, 1.0 - RHO_EPS);
    (r / (1.0 - r)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and variance of `ρ·N(μ, v) + (1 - ρ)·δ`.
pub fn mixture_moments(rho: f64, mean: f64, var: f64) -> (f64, f64) {
    if rho >= 1.0 {
        return (mean, var);
    }
    if rho <= 0.0 {
        return (0.0, 0.0);
    }
    (rho * mean, rho * var + rho * (1.0 - rho) * mean * mean)
}

/// `ln η` for one element with slab `N(mean, var)` and network evidence in
/// natural parameters `(eta, tau)`. Zero for flat evidence.
pub fn log_evidence_ratio(mean: f64, var: f64, eta: f64, tau: f64) -> f64 {
    if !(tau > 0.0) {
        return 0.0;
    }
    let d = 1.0 + var * tau;
    0.5 * d.ln() - (var * eta * eta + 2.0 * eta * mean - mean * mean * tau) / (2.0 * d)
}

fn msg_log_ratio(mean: f64, var: f64, msg: GaussianMsg) -> f64 {
    let (eta, tau) = msg.natural();
    log_evidence_ratio(mean, var, eta, tau)
}

/// Activity of a group with prior activity `rho` after adding `sum_log_eta`.
/// Uncertain priors stay uncertain: the result is kept inside
/// `[RHO_EPS, 1 - RHO_EPS]` so only an exact 0 or 1 prior is absorbing.
pub fn activity(rho: f64, sum_log_eta: f64) -> f64 {
    if rho <= 0.0 {
        0.0
    } else if rho >= 1.0 {
        1.0
    } else {
        sigmoid(logit(rho) - sum_log_eta).clamp(RHO_EPS, 1.0 - RHO_EPS)
    }
}

fn check_len(prior: &BGGroup, a2b: &[GaussianMsg]) -> Result<()> {
    if prior.len() != a2b.len() || prior.var.len() != prior.mean.len() {
        return Err(Error::Shape(format!(
            "group of {} elements with {} incoming messages",
            prior.len(),
            a2b.len()
        )));
    }
    Ok(())
}

/// Leave-one-out activity messages for every element of a group.
pub fn spmp_extrinsic(prior: &BGGroup, a2b: &[GaussianMsg]) -> Result<ExtrinsicSet> {
    check_len(prior, a2b)?;
    let n = prior.len();
    let rho = if prior.rho <= 0.0 || prior.rho >= 1.0 {
        vec![prior.rho.clamp(0.0, 1.0); n]
    } else {
        let log_eta: Vec<f64> = (0..n)
            .map(|m| msg_log_ratio(prior.mean[m], prior.var[m], a2b[m]))
            .collect();
        leave_one_out(&log_eta)
            .into_iter()
            .map(|s| activity(prior.rho, s))
            .collect()
    };
    Ok(ExtrinsicSet {
        rho,
        mean: prior.mean.clone(),
        var: prior.var.clone(),
    })
}

/// Sums of all entries but one, by prefix/suffix accumulation.
pub(crate) fn leave_one_out(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for m in 0..n {
        out[m] = acc;
        acc += xs[m];
    }
    acc = 0.0;
    for m in (0..n).rev() {
        out[m] += acc;
        acc += xs[m];
    }
    out
}

/// Bernoulli-Gaussian posterior of a group given per-element evidence.
pub fn group_posterior(prior: &BGGroup, a2b: &[GaussianMsg]) -> Result<BGGroup> {
    check_len(prior, a2b)?;
    let sum: f64 = if prior.rho <= 0.0 || prior.rho >= 1.0 {
        0.0
    } else {
        (0..prior.len())
            .map(|m| msg_log_ratio(prior.mean[m], prior.var[m], a2b[m]))
            .sum()
    };
    let mut mean = Vec::with_capacity(prior.len());
    let mut var = Vec::with_capacity(prior.len());
    for (m, msg) in a2b.iter().enumerate() {
        let p = gauss_product(prior.element(m), *msg);
        mean.push(p.mean);
        var.push(p.var);
    }
    Ok(BGGroup {
        rho: activity(prior.rho, sum),
        mean,
        var,
    })
}

/// Scalar (bias) posterior.
pub fn bias_posterior(prior: &BGGroup, a2b: GaussianMsg) -> Result<BGGroup> {
    group_posterior(prior, &[a2b])
}

/// Posterior-as-prior. Only `λ = 1` is supported, where the new prior is the
/// posterior itself.
pub fn pasp_update<T: Clone>(posterior: &T, lambda: f64) -> Result<T> {
    check_lambda(lambda)?;
    Ok(posterior.clone())
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if lambda != 1.0 {
        return Err(Error::Config(format!(
            "posterior-as-prior exponent must be 1 (got {lambda}); fractional powers of a spike-and-slab are not closed-form"
        )));
    }
    Ok(())
}

/// Network-side evidence about one layer's parameters, in natural form
/// `(mean/var, 1/var)`; zero precision is flat.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEvidence {
    pub w_eta: Array2<f64>,
    pub w_tau: Array2<f64>,
    pub b_eta: Array1<f64>,
    pub b_tau: Array1<f64>,
}

impl LayerEvidence {
    pub fn flat(n_out: usize, n_in: usize) -> Self {
        Self {
            w_eta: Array2::zeros((n_out, n_in)),
            w_tau: Array2::zeros((n_out, n_in)),
            b_eta: Array1::zeros(n_out),
            b_tau: Array1::zeros(n_out),
        }
    }

    pub fn weight_msg(&self, m: usize, n: usize) -> GaussianMsg {
        GaussianMsg::from_natural(self.w_eta[(m, n)], self.w_tau[(m, n)])
    }

    pub fn bias_msg(&self, m: usize) -> GaussianMsg {
        GaussianMsg::from_natural(self.b_eta[m], self.b_tau[m])
    }
}

fn weight_log_ratios(p: &LayerParams, ev: &LayerEvidence) -> Array2<f64> {
    let mut out = Array2::zeros(p.w_mean.dim());
    Zip::from(&mut out)
        .and(&p.w_mean)
        .and(&p.w_var)
        .and(&ev.w_eta)
        .and(&ev.w_tau)
        .for_each(|o, &mu, &v, &eta, &tau| *o = log_evidence_ratio(mu, v, eta, tau));
    out
}

/// Leave-one-out activities for every weight of a layer, `N_out × N_in`.
/// Biases are singleton groups, so their extrinsic activity is the prior's.
pub fn layer_extrinsic(p: &LayerParams, ev: &LayerEvidence) -> Array2<f64> {
    let mut rho = Array2::zeros(p.w_mean.dim());
    let log_eta = weight_log_ratios(p, ev);
    for n in 0..p.n_in() {
        let r = p.w_rho[n];
        if r <= 0.0 || r >= 1.0 {
            rho.column_mut(n).fill(r.clamp(0.0, 1.0));
            continue;
        }
        let col: Vec<f64> = log_eta.column(n).to_vec();
        for (m, s) in leave_one_out(&col).into_iter().enumerate() {
            rho[(m, n)] = activity(r, s);
        }
    }
    rho
}

/// Group-wise posterior of a whole layer.
pub fn layer_posterior(p: &LayerParams, ev: &LayerEvidence) -> LayerParams {
    let mut post = p.clone();
    let log_eta = weight_log_ratios(p, ev);
    for n in 0..p.n_in() {
        let r = p.w_rho[n];
        if r > 0.0 && r < 1.0 {
            post.w_rho[n] = activity(r, log_eta.column(n).sum());
        }
    }
    for ((m, n), mean) in post.w_mean.indexed_iter_mut() {
        let g = gauss_product(
            GaussianMsg::new(*mean, p.w_var[(m, n)]),
            ev.weight_msg(m, n),
        );
        *mean = g.mean;
        post.w_var[(m, n)] = g.var;
    }
    for m in 0..p.n_out() {
        let (eta, tau) = (ev.b_eta[m], ev.b_tau[m]);
        post.b_rho[m] = activity(
            p.b_rho[m],
            log_evidence_ratio(p.b_mean[m], p.b_var[m], eta, tau),
        );
        let g = gauss_product(GaussianMsg::new(p.b_mean[m], p.b_var[m]), ev.bias_msg(m));
        post.b_mean[m] = g.mean;
        post.b_var[m] = g.var;
    }
    post
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msgs(pairs: &[(f64, f64)]) -> Vec<GaussianMsg> {
        pairs.iter().map(|&(m, v)| GaussianMsg::new(m, v)).collect()
    }

    #[test]
    fn certain_group_stays_active() {
        let g = BGGroup::new(1.0, vec![0.1, -0.2], vec![1.0, 2.0]);
        let e = spmp_extrinsic(&g, &msgs(&[(3.0, 0.1), (-1.0, 0.3)])).unwrap();
        assert_eq!(e.rho, vec![1.0, 1.0]);
        assert_eq!(e.mean, g.mean);
        let p = group_posterior(&g, &msgs(&[(3.0, 0.1), (-1.0, 0.3)])).unwrap();
        assert_eq!(p.rho, 1.0);
        assert_eq!(
            p.element(0),
            gauss_product(g.element(0), GaussianMsg::new(3.0, 0.1))
        );
    }

    #[test]
    fn dead_group_stays_dead() {
        let g = BGGroup::new(0.0, vec![0.1, -0.2], vec![1.0, 2.0]);
        let e = spmp_extrinsic(&g, &msgs(&[(3.0, 0.1), (-1.0, 0.3)])).unwrap();
        assert_eq!(e.rho, vec![0.0, 0.0]);
    }

    #[test]
    fn flat_evidence_is_no_evidence() {
        let g = BGGroup::new(0.37, vec![0.5, 1.0, -2.0], vec![1.0, 0.5, 3.0]);
        let flat = vec![GaussianMsg::FLAT; 3];
        let e = spmp_extrinsic(&g, &flat).unwrap();
        assert!(e.rho.iter().all(|&r| (r - 0.37).abs() < 1e-15));
        assert_eq!(group_posterior(&g, &flat).unwrap().rho, g.rho);
        let p = group_posterior(&g, &flat).unwrap();
        assert!((p.rho - g.rho).abs() < 1e-15);
        assert_eq!(p.mean, g.mean);
        assert_eq!(p.var, g.var);
    }

    #[test]
    fn natural_form_matches_density_ratio() {
        let (mean, var) = (0.4, 0.9);
        let msg = GaussianMsg::new(-0.3, 0.25);
        let direct = GaussianMsg::new(msg.mean, msg.var).log_density(0.0)
            - GaussianMsg::new(msg.mean - mean, msg.var + var).log_density(0.0);
        assert!((msg_log_ratio(mean, var, msg) - direct).abs() < 1e-13);
    }

    #[test]
    fn leave_one_out_sums() {
        assert_eq!(leave_one_out(&[1.0, 2.0, 4.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(leave_one_out(&[5.0]), vec![0.0]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let g = BGGroup::new(0.5, vec![0.0; 2], vec![1.0; 2]);
        assert!(spmp_extrinsic(&g, &[GaussianMsg::FLAT]).is_err());
    }

    #[test]
    fn pasp_requires_unit_exponent() {
        let g = BGGroup::scalar(0.2, 1.0, 1.0);
        assert_eq!(pasp_update(&g, 1.0).unwrap(), g);
        let twice = pasp_update(&pasp_update(&g, 1.0).unwrap(), 1.0).unwrap();
        assert_eq!(twice, g);
        assert!(pasp_update(&g, 0.9).is_err());
    }

    #[test]
    fn layer_ops_agree_with_group_ops() {
        use ndarray::array;
        let p = LayerParams {
            w_rho: array![0.3, 1.0, 0.7],
            w_mean: array![[0.1, -0.4, 0.0], [0.5, 0.2, -1.0]],
            w_var: array![[1.0, 0.5, 0.2], [0.3, 2.0, 0.9]],
            b_rho: array![1.0, 0.6],
            b_mean: array![0.0, 0.3],
            b_var: array![0.1, 0.4],
        };
        let ev = LayerEvidence {
            w_eta: array![[0.3, -1.0, 2.0], [0.0, 0.7, -0.2]],
            w_tau: array![[2.0, 0.5, 4.0], [0.0, 1.5, 0.3]],
            b_eta: array![1.0, -0.5],
            b_tau: array![3.0, 0.8],
        };
        let ext = layer_extrinsic(&p, &ev);
        let post = layer_posterior(&p, &ev);
        for n in 0..3 {
            let msgs: Vec<GaussianMsg> = (0..2).map(|m| ev.weight_msg(m, n)).collect();
            let e = spmp_extrinsic(&p.weight_group(n), &msgs).unwrap();
            let g = group_posterior(&p.weight_group(n), &msgs).unwrap();
            for m in 0..2 {
                assert!((e.rho[m] - ext[(m, n)]).abs() < 1e-15);
            }
            assert!((g.rho - post.w_rho[n]).abs() < 1e-15);
            assert_eq!(g.mean, post.weight_group(n).mean);
        }
        for m in 0..2 {
            let g = bias_posterior(&p.bias_group(m), ev.bias_msg(m)).unwrap();
            assert!((g.rho - post.b_rho[m]).abs() < 1e-15);
            assert_eq!(g.mean[0], post.b_mean[m]);
        }
    }
}
