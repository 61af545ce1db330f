//! Approximate message passing across the layered network (the "A" half
//! of the turbo loop).
//!
//! Each layer `z = W u + b` is handled by a bilinear AMP step with the bias
//! treated as an extra weight column on a constant unit input. Arrays are
//! laid out `units × samples`. Forward:
//!
//! ```text
//! P̄ = Ŵ û + b̂            V̄ = Ŵ² v_u + v_W û² + v_b
//! V = V̄ + v_W v_u         p̂ = P̄ - ŝ ∘ V̄
//! ```
//!
//! Backward, in natural form (`τ = 1/var`, `η = mean/var`):
//!
//! ```text
//! τ_W = v_s (û²)ᵀ          η_W = Ŵ ∘ (τ_W - v_s v_uᵀ) + ŝ ûᵀ
//! τ_u = (Ŵ²)ᵀ v_s          η_u = û ∘ (τ_u - v_Wᵀ v_s) + Ŵᵀ ŝ
//! ```
//!
//! Between layers a ReLU couples `N(p̂, V)` from below with `(η_u, τ_u)`
//! from above; at the top a likelihood head turns `N(p̂, V)` into output
//! posteriors. Residuals are `ŝ = (ẑ - p̂)/V`, `v_s = (1 - v_z/V)/V`.

mod head;
mod relu;

pub use head::{head_classification, head_regression, residual, ClassPosterior, HeadPosterior};
pub use relu::{relu_coupling, ReluPosterior};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{gauss_product, GaussianMsg};
use crate::model::{LayerParams, NetParams};
use crate::prior::{activity, layer_extrinsic, log_evidence_ratio, mixture_moments, LayerEvidence};

/// Labels for the current minibatch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// `N_L × B` real targets.
    Regression(ArrayView2<'a, f64>),
    /// One class index in `0..N_L` per sample.
    Classification(&'a [usize]),
}

#[derive(Clone, Copy, Debug)]
pub struct LikelihoodHead<'a> {
    pub noise_var: f64,
    pub targets: Targets<'a>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampSettings {
    /// Forward/backward sweeps per minibatch.
    pub sweeps: usize,
    /// Weight of the fresh value when blending with the previous sweep.
    pub damping: f64,
}

impl Default for DampSettings {
    fn default() -> Self {
        Self {
            sweeps: 1,
            damping: 0.8,
        }
    }
}

/// Messages and moments of one layer for one minibatch.
#[derive(Clone, Debug)]
pub struct LayerState {
    /// Input activation posterior, `N_in × B`.
    pub u_mean: Array2<f64>,
    pub u_var: Array2<f64>,
    /// Backward evidence about the inputs in natural form, `N_in × B`.
    pub r_eta: Array2<f64>,
    pub r_tau: Array2<f64>,
    /// Prior-side activity messages for the weights, `N_out × N_in`.
    pub rho_b2a: Array2<f64>,
    /// Current parameter estimates used by the network side.
    pub w_mean: Array2<f64>,
    pub w_var: Array2<f64>,
    pub b_mean: Array1<f64>,
    pub b_var: Array1<f64>,
    /// Network-side evidence about the parameters.
    pub evidence: LayerEvidence,
    /// Pseudo-priors on the pre-activations, `N_out × B`.
    pub p_bar: Array2<f64>,
    pub v_bar: Array2<f64>,
    pub p_hat: Array2<f64>,
    pub v_p: Array2<f64>,
    pub s_hat: Array2<f64>,
    pub v_s: Array2<f64>,
    /// Pre-activation posteriors.
    pub z_mean: Array2<f64>,
    pub z_var: Array2<f64>,
    input_is_data: bool,
}

impl LayerState {
    fn new(p: &LayerParams, batch: usize) -> Self {
        let (o, i) = (p.n_out(), p.n_in());
        let zi = || Array2::zeros((i, batch));
        let zo = || Array2::zeros((o, batch));
        Self {
            u_mean: zi(),
            u_var: zi(),
            r_eta: zi(),
            r_tau: zi(),
            rho_b2a: Array2::zeros((o, i)),
            w_mean: Array2::zeros((o, i)),
            w_var: Array2::zeros((o, i)),
            b_mean: Array1::zeros(o),
            b_var: Array1::zeros(o),
            evidence: LayerEvidence::flat(o, i),
            p_bar: zo(),
            v_bar: zo(),
            p_hat: zo(),
            v_p: zo(),
            s_hat: zo(),
            v_s: zo(),
            z_mean: zo(),
            z_var: zo(),
            input_is_data: false,
        }
    }
}

/// Per-minibatch message state. Creation applies the reset convention:
/// zero residuals, flat backward and parameter evidence.
#[derive(Clone, Debug)]
pub struct MinibatchState {
    pub layers: Vec<LayerState>,
    pub batch: usize,
    /// Sweeps completed so far; damping starts from the second.
    pub sweeps_done: usize,
    /// ReLU or head evaluations that fell back to a dominant branch.
    pub degenerate: usize,
}

impl MinibatchState {
    /// `x` is `N_0 × B`.
    pub fn new(params: &NetParams, x: ArrayView2<f64>) -> Result<Self> {
        let n0 = params.layers[0].n_in();
        if x.nrows() != n0 {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {n0}",
                x.nrows()
            )));
        }
        let batch = x.ncols();
        if batch == 0 {
            return Err(Error::Empty("minibatch"));
        }
        let mut layers: Vec<LayerState> = params
            .layers
            .iter()
            .map(|p| LayerState::new(p, batch))
            .collect();
        layers[0].u_mean.assign(&x);
        layers[0].input_is_data = true;
        Ok(Self {
            layers,
            batch,
            sweeps_done: 0,
            degenerate: 0,
        })
    }

    pub fn output_mean(&self) -> &Array2<f64> {
        &self.layers.last().unwrap().z_mean
    }

    pub fn output_var(&self) -> &Array2<f64> {
        &self.layers.last().unwrap().z_var
    }
}

fn blend2(old: &mut Array2<f64>, new: Array2<f64>, a: f64) {
    if a >= 1.0 {
        *old = new;
    } else {
        Zip::from(old)
            .and(&new)
            .for_each(|o, &n| *o = a * n + (1.0 - a) * *o);
    }
}

fn blend1(old: &mut Array1<f64>, new: Array1<f64>, a: f64) {
    if a >= 1.0 {
        *old = new;
    } else {
        Zip::from(old)
            .and(&new)
            .for_each(|o, &n| *o = a * n + (1.0 - a) * *o);
    }
}

/// Moments of one parameter under its prior-side message
/// `ρ·N(μ, v) + (1-ρ)·δ` combined with network evidence `(η, τ)`.
#[inline]
fn param_moments(rho: f64, mean: f64, var: f64, eta: f64, tau: f64) -> (f64, f64) {
    if !(tau > 0.0) {
        return mixture_moments(rho, mean, var);
    }
    let slab = gauss_product(
        GaussianMsg::new(mean, var),
        GaussianMsg::from_natural(eta, tau),
    );
    let pi = if rho <= 0.0 || rho >= 1.0 {
        rho
    } else {
        activity(rho, log_evidence_ratio(mean, var, eta, tau))
    };
    mixture_moments(pi, slab.mean, slab.var)
}

/// Refreshes the prior-side messages and the network side's parameter
/// estimates from the current evidence.
fn parameter_estimates(p: &LayerParams, st: &mut LayerState) {
    st.rho_b2a = layer_extrinsic(p, &st.evidence);
    let ev = &st.evidence;
    let rho = &st.rho_b2a;
    Zip::indexed(&mut st.w_mean)
        .and(&mut st.w_var)
        .for_each(|idx, wm, wv| {
            let (a, b) = param_moments(
                rho[idx],
                p.w_mean[idx],
                p.w_var[idx],
                ev.w_eta[idx],
                ev.w_tau[idx],
            );
            *wm = a;
            *wv = b;
        });
    for m in 0..p.n_out() {
        let (a, b) = param_moments(
            p.b_rho[m],
            p.b_mean[m],
            p.b_var[m],
            ev.b_eta[m],
            ev.b_tau[m],
        );
        st.b_mean[m] = a;
        st.b_var[m] = b;
    }
}

/// Pseudo-priors `(p̂, V)` of one layer from its input and parameter
/// estimates.
pub fn layer_forward(st: &mut LayerState, damping: f64) {
    let u_sq = st.u_mean.mapv(|x| x * x);
    let mut p_bar = st.w_mean.dot(&st.u_mean);
    p_bar += &st.b_mean.view().insert_axis(Axis(1));
    let mut v_bar = st.w_var.dot(&u_sq);
    v_bar += &st.b_var.view().insert_axis(Axis(1));
    let mut v_p;
    if st.input_is_data {
        v_p = v_bar.clone();
    } else {
        let w_sq = st.w_mean.mapv(|x| x * x);
        v_bar += &w_sq.dot(&st.u_var);
        v_p = v_bar.clone();
        v_p += &st.w_var.dot(&st.u_var);
    }
    let mut p_hat = p_bar.clone();
    Zip::from(&mut p_hat)
        .and(&st.s_hat)
        .and(&v_bar)
        .for_each(|p, &s, &v| *p -= s * v);
    st.p_bar = p_bar;
    st.v_bar = v_bar;
    blend2(&mut st.p_hat, p_hat, damping);
    blend2(&mut st.v_p, v_p, damping);
}

/// Parameter evidence of one layer and, if `with_inputs`, backward
/// evidence about its inputs.
pub fn layer_backward(st: &mut LayerState, with_inputs: bool, damping: f64) {
    let u_sq = st.u_mean.mapv(|x| x * x);
    let w_tau = st.v_s.dot(&u_sq.t());
    let mut w_eta = st.s_hat.dot(&st.u_mean.t());
    if st.input_is_data {
        Zip::from(&mut w_eta)
            .and(&st.w_mean)
            .and(&w_tau)
            .for_each(|e, &w, &t| *e += w * t);
    } else {
        let corr = st.v_s.dot(&st.u_var.t());
        Zip::from(&mut w_eta)
            .and(&st.w_mean)
            .and(&w_tau)
            .and(&corr)
            .for_each(|e, &w, &t, &c| *e += w * (t - c));
    }
    let b_tau = st.v_s.sum_axis(Axis(1));
    let mut b_eta = st.s_hat.sum_axis(Axis(1));
    Zip::from(&mut b_eta)
        .and(&st.b_mean)
        .and(&b_tau)
        .for_each(|e, &b, &t| *e += b * t);

    blend2(&mut st.evidence.w_eta, w_eta, damping);
    blend2(&mut st.evidence.w_tau, w_tau, damping);
    blend1(&mut st.evidence.b_eta, b_eta, damping);
    blend1(&mut st.evidence.b_tau, b_tau, damping);

    if with_inputs {
        let w_sq = st.w_mean.mapv(|x| x * x);
        let r_tau = w_sq.t().dot(&st.v_s);
        let corr = st.w_var.t().dot(&st.v_s);
        let mut r_eta = st.w_mean.t().dot(&st.s_hat);
        Zip::from(&mut r_eta)
            .and(&st.u_mean)
            .and(&r_tau)
            .and(&corr)
            .for_each(|e, &u, &t, &c| *e += u * (t - c));
        blend2(&mut st.r_eta, r_eta, damping);
        blend2(&mut st.r_tau, r_tau, damping);
    }
}

fn check_pseudo(l: usize, st: &LayerState) -> Result<()> {
    for ((m, i), p) in st.p_hat.indexed_iter() {
        let v = st.v_p[(m, i)];
        if !p.is_finite() || !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite {
                layer: l,
                unit: m,
                sample: i,
            });
        }
    }
    Ok(())
}

fn check_evidence(l: usize, st: &LayerState) -> Result<()> {
    let ev = &st.evidence;
    for ((m, n), t) in ev.w_tau.indexed_iter() {
        if !t.is_finite() || !ev.w_eta[(m, n)].is_finite() {
            return Err(Error::NonFiniteEvidence {
                layer: l,
                unit: m,
                input: n,
            });
        }
    }
    for m in 0..ev.b_tau.len() {
        if !ev.b_tau[m].is_finite() || !ev.b_eta[m].is_finite() {
            return Err(Error::NonFiniteEvidence {
                layer: l,
                unit: m,
                input: usize::MAX,
            });
        }
    }
    Ok(())
}

/// Posterior of a ReLU input layer's activations from the layer below's
/// pseudo-prior and this layer's backward evidence.
fn relu_inputs(below: &LayerState, st: &mut LayerState) -> usize {
    let mut degenerate = 0;
    let (r_eta, r_tau) = (&st.r_eta, &st.r_tau);
    Zip::indexed(&mut st.u_mean)
        .and(&mut st.u_var)
        .for_each(|idx, um, uv| {
            let fwd = GaussianMsg::new(below.p_hat[idx], below.v_p[idx]);
            let r = relu_coupling(fwd, GaussianMsg::from_natural(r_eta[idx], r_tau[idx]));
            degenerate += r.degenerate as usize;
            *um = r.u.mean;
            *uv = r.u.var.max(0.0);
        });
    degenerate
}

/// Pre-activation posterior and residuals of a hidden layer whose outputs
/// feed a ReLU into `above`.
fn relu_outputs(st: &mut LayerState, above: &LayerState, damping: f64) -> usize {
    let mut degenerate = 0;
    let shape = st.p_hat.dim();
    let mut s_hat = Array2::zeros(shape);
    let mut v_s = Array2::zeros(shape);
    let (p_hat, v_p) = (&st.p_hat, &st.v_p);
    Zip::indexed(&mut s_hat)
        .and(&mut v_s)
        .and(&mut st.z_mean)
        .and(&mut st.z_var)
        .for_each(|idx, s, vs, zm, zv| {
            let (p, v) = (p_hat[idx], v_p[idx]);
            let r = relu_coupling(
                GaussianMsg::new(p, v),
                GaussianMsg::from_natural(above.r_eta[idx], above.r_tau[idx]),
            );
            degenerate += r.degenerate as usize;
            let h = residual(p, v, r.z);
            *s = h.s_hat;
            *vs = h.v_s;
            *zm = r.z.mean;
            *zv = r.z.var;
        });
    blend2(&mut st.s_hat, s_hat, damping);
    blend2(&mut st.v_s, v_s, damping);
    degenerate
}

fn apply_head(st: &mut LayerState, head: &LikelihoodHead, damping: f64) -> Result<usize> {
    let (n_out, batch) = st.p_hat.dim();
    let mut s_hat = Array2::zeros((n_out, batch));
    let mut v_s = Array2::zeros((n_out, batch));
    let mut degenerate = 0;
    match head.targets {
        Targets::Regression(y) => {
            if y.dim() != (n_out, batch) {
                return Err(Error::Shape(format!(
                    "targets {:?}, outputs {:?}",
                    y.dim(),
                    (n_out, batch)
                )));
            }
            for ((m, i), &p) in st.p_hat.indexed_iter() {
                let h = head_regression(p, st.v_p[(m, i)], y[(m, i)], head.noise_var);
                st.z_mean[(m, i)] = h.z.mean;
                st.z_var[(m, i)] = h.z.var;
                s_hat[(m, i)] = h.s_hat;
                v_s[(m, i)] = h.v_s;
            }
        }
        Targets::Classification(labels) => {
            if labels.len() != batch {
                return Err(Error::Shape(format!(
                    "{} labels for {batch} samples",
                    labels.len()
                )));
            }
            for (i, &label) in labels.iter().enumerate() {
                let p = st.p_hat.column(i).to_vec();
                let v = st.v_p.column(i).to_vec();
                let c = head_classification(&p, &v, label, head.noise_var)?;
                degenerate += c.degenerate as usize;
                for (m, z) in c.z.iter().enumerate() {
                    let h = residual(p[m], v[m], *z);
                    st.z_mean[(m, i)] = z.mean;
                    st.z_var[(m, i)] = z.var;
                    s_hat[(m, i)] = h.s_hat;
                    v_s[(m, i)] = h.v_s;
                }
            }
        }
    }
    blend2(&mut st.s_hat, s_hat, damping);
    blend2(&mut st.v_s, v_s, damping);
    Ok(degenerate)
}

/// Runs `settings.sweeps` forward/backward sweeps. On return each layer's
/// `evidence` holds the network-side messages about its parameters.
pub fn damp_minibatch(
    state: &mut MinibatchState,
    params: &NetParams,
    head: &LikelihoodHead,
    settings: &DampSettings,
) -> Result<()> {
    let n_layers = params.layers.len();
    if state.layers.len() != n_layers {
        return Err(Error::Shape(
            "state and parameters have different depths".into(),
        ));
    }
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(Error::Config(format!(
            "damping {} outside (0, 1]",
            settings.damping
        )));
    }
    for _ in 0..settings.sweeps {
        let a = if state.sweeps_done > 0 {
            settings.damping
        } else {
            1.0
        };
        for (p, st) in params.layers.iter().zip(state.layers.iter_mut()) {
            parameter_estimates(p, st);
        }
        for l in 0..n_layers {
            if l > 0 {
                let (below, rest) = state.layers.split_at_mut(l);
                state.degenerate += relu_inputs(&below[l - 1], &mut rest[0]);
            }
            layer_forward(&mut state.layers[l], a);
            check_pseudo(l, &state.layers[l])?;
        }
        state.degenerate += apply_head(&mut state.layers[n_layers - 1], head, a)?;
        for l in (0..n_layers).rev() {
            layer_backward(&mut state.layers[l], l > 0, a);
            check_evidence(l, &state.layers[l])?;
            if l > 0 {
                let (below, rest) = state.layers.split_at_mut(l);
                state.degenerate += relu_outputs(&mut below[l - 1], &rest[0], a);
            }
        }
        state.sweeps_done += 1;
    }
    Ok(())
}

/// Deterministic network output `φ(x; W, b)` for `x` laid out `N_0 × B`.
pub fn forward_deterministic(
    weights: &[(Array2<f64>, Array1<f64>)],
    x: ArrayView2<f64>,
) -> Array2<f64> {
    let mut h = x.to_owned();
    for (l, (w, b)) in weights.iter().enumerate() {
        let mut z = w.dot(&h);
        z += &b.view().insert_axis(Axis(1));
        if l + 1 < weights.len() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        h = z;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, InitConfig, NetHyper};
    use ndarray::array;
    use rand::SeedableRng;

    fn net(widths: Vec<usize>, seed: u64) -> NetParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        NetHyper::init(
            &Architecture::new(widths).unwrap(),
            &InitConfig::default(),
            &mut rng,
        )
        .unwrap()
        .params
    }

    #[test]
    fn zero_sweeps_leave_state_unchanged() {
        let p = net(vec![3, 4, 1], 3);
        let x = array![[1.0, 0.5], [0.0, -1.0], [2.0, 0.3]];
        let y = array![[0.1, 0.2]];
        let mut st = MinibatchState::new(&p, x.view()).unwrap();
        let head = LikelihoodHead {
            noise_var: 1.0,
            targets: Targets::Regression(y.view()),
        };
        damp_minibatch(
            &mut st,
            &p,
            &head,
            &DampSettings {
                sweeps: 0,
                damping: 0.8,
            },
        )
        .unwrap();
        assert_eq!(st.sweeps_done, 0);
        assert!(st
            .layers
            .iter()
            .all(|l| l.evidence.w_tau.iter().all(|&t| t == 0.0)));
    }

    #[test]
    fn point_parameters_reproduce_deterministic_network() {
        let mut p = net(vec![3, 4, 2], 5);
        for l in p.layers.iter_mut() {
            l.w_var.fill(0.0);
            l.b_var.fill(0.0);
            l.b_mean.mapv_inplace(|_| 0.3);
        }
        let x = array![[1.0, 0.5, -0.2], [0.0, -1.0, 0.7], [2.0, 0.3, 0.1]];
        let y = Array2::zeros((2, 3));
        let mut st = MinibatchState::new(&p, x.view()).unwrap();
        let head = LikelihoodHead {
            noise_var: 1.0,
            targets: Targets::Regression(y.view()),
        };
        damp_minibatch(
            &mut st,
            &p,
            &head,
            &DampSettings {
                sweeps: 1,
                damping: 0.8,
            },
        )
        .unwrap();
        let weights: Vec<_> = p
            .layers
            .iter()
            .map(|l| (l.w_mean.clone(), l.b_mean.clone()))
            .collect();
        let direct = forward_deterministic(&weights, x.view());
        let out = &st.layers[1].p_hat;
        for (a, b) in out.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sweeps_keep_messages_finite() {
        let p = net(vec![5, 6, 6, 3], 11);
        let x = Array2::from_shape_fn((5, 7), |(a, b)| ((a * 7 + b) as f64 * 0.37).sin());
        let labels = [0usize, 1, 2, 0, 1, 2, 1];
        let mut st = MinibatchState::new(&p, x.view()).unwrap();
        let head = LikelihoodHead {
            noise_var: 0.5,
            targets: Targets::Classification(&labels),
        };
        damp_minibatch(
            &mut st,
            &p,
            &head,
            &DampSettings {
                sweeps: 4,
                damping: 0.8,
            },
        )
        .unwrap();
        for l in &st.layers {
            assert!(l.v_p.iter().all(|v| *v > 0.0 && v.is_finite()));
            assert!(l.v_s.iter().all(|v| *v >= 0.0 && v.is_finite()));
            assert!(l.evidence.w_tau.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
