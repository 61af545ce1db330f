//! Expectation maximization around the turbo message passer.
//!
//! One iteration is an E-step (one pass over the minibatches, each
//! minibatch's posterior becoming the next one's prior) followed by an
//! M-step that adopts the posterior as the new hyperparameters, applies
//! sparsity control and refits the likelihood noise variance.

use std::ops::ControlFlow;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::damp::{
    damp_minibatch, forward_deterministic, DampSettings, LikelihoodHead, MinibatchState, Targets,
};
use crate::data::{batch_ranges, shuffled_order, Dataset, Labels};
use crate::error::{Error, Result};
use crate::ftable::FTable;
use crate::gaussian::gumbel_fit;
use crate::metrics::Metrics;
use crate::model::{NetHyper, NetParams};
use crate::prior::{check_lambda, layer_posterior, mixture_moments, pasp_update};

/// Neuron-level pruning controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPolicy {
    /// Fraction of weight groups allowed to remain, in `(0, 1]`.
    pub target: f64,
    /// Activity above which a group counts as confidently active.
    pub threshold: f64,
    /// Activity that confidently active groups restart from after a reset.
    pub reset: f64,
}

impl Default for SparsityPolicy {
    fn default() -> Self {
        Self {
            target: 1.0,
            threshold: 0.99,
            reset: 0.5,
        }
    }
}

impl SparsityPolicy {
    pub fn dense() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.target > 0.0
            && self.target <= 1.0
            && self.reset > 0.0
            && self.reset < self.threshold
            && self.threshold < 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid sparsity policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Outer EM iterations.
    pub iterations: usize,
    pub batch_size: usize,
    pub damp: DampSettings,
    pub seed: u64,
    /// Reshuffle minibatches every iteration instead of fixing them once.
    pub reshuffle: bool,
    /// Refit the noise variance in the M-step.
    pub learn_noise: bool,
    /// Posterior-as-prior exponent; must be 1.
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            batch_size: 100,
            damp: DampSettings::default(),
            seed: 0,
            reshuffle: false,
            learn_noise: true,
            lambda: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.batch_size == 0 || self.damp.sweeps == 0 {
            return Err(Error::Config(
                "batch size and sweep count must be positive".into(),
            ));
        }
        if !(self.damp.damping > 0.0 && self.damp.damping <= 1.0) {
            return Err(Error::Config(format!(
                "damping {} outside (0, 1]",
                self.damp.damping
            )));
        }
        Ok(())
    }

    /// Minibatch order for `iteration` (1-based) over `base`.
    pub fn order_for(&self, base: &[usize], iteration: usize) -> Vec<usize> {
        if !self.reshuffle || iteration <= 1 {
            return base.to_vec();
        }
        let perm = shuffled_order(base.len(), self.seed.wrapping_add(iteration as u64));
        perm.into_iter().map(|k| base[k]).collect()
    }
}

/// Output posterior moments per sample, `I × N_L`, in dataset row order.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPosterior {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
    /// Rows whose minibatch completed.
    pub valid: Vec<bool>,
}

/// Sufficient statistics for the noise-variance update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseStats {
    /// `σ = mean((y - ẑ)² + v_z)` over samples and outputs.
    Regression { sigma: f64 },
    /// Mean `μ` and second moment `E` of the margins `ξ = z_m - z_y`.
    Classification { mu: f64, second: f64 },
}

#[derive(Clone, Debug)]
pub struct EStep {
    pub posterior: NetParams,
    pub outputs: OutputPosterior,
    pub failed_batches: usize,
    pub degenerate: usize,
}

/// One pass of turbo message passing over `order`, chaining minibatch
/// posteriors as priors. Failed minibatches are logged and skipped.
pub fn e_step(
    data: &Dataset,
    order: &[usize],
    prior: &NetParams,
    noise_var: f64,
    cfg: &TrainConfig,
) -> Result<EStep> {
    let n_out = prior
        .layers
        .last()
        .ok_or(Error::Empty("network layers"))?
        .n_out();
    if data.n_outputs() != n_out || data.n_features() != prior.layers[0].n_in() {
        return Err(Error::Shape("dataset and network dimensions differ".into()));
    }
    let mut params = prior.clone();
    let mut outputs = OutputPosterior {
        mean: Array2::zeros((data.len(), n_out)),
        var: Array2::zeros((data.len(), n_out)),
        valid: vec![false; data.len()],
    };
    let mut failed = 0;
    let mut degenerate = 0;
    for (r, range) in batch_ranges(order.len(), cfg.batch_size)?
        .into_iter()
        .enumerate()
    {
        let idx = &order[range];
        let x = data.inputs_t(idx);
        let y = data.targets_t(idx);
        let classes = data.classes(idx);
        let targets = match (&y, &classes) {
            (Some(y), _) => Targets::Regression(y.view()),
            (None, Some(c)) => Targets::Classification(c),
            _ => unreachable!("dataset labels are regression or classification"),
        };
        let head = LikelihoodHead { noise_var, targets };
        let mut state = MinibatchState::new(&params, x.view())?;
        if let Err(e) = damp_minibatch(&mut state, &params, &head, &cfg.damp) {
            log::warn!("minibatch {r} skipped: {e}");
            failed += 1;
            continue;
        }
        degenerate += state.degenerate;
        let posterior = NetParams {
            layers: params
                .layers
                .iter()
                .zip(&state.layers)
                .map(|(p, st)| layer_posterior(p, &st.evidence))
                .collect(),
        };
        params = pasp_update(&posterior, cfg.lambda)?;
        for (k, &i) in idx.iter().enumerate() {
            outputs
                .mean
                .row_mut(i)
                .assign(&state.output_mean().column(k));
            outputs.var.row_mut(i).assign(&state.output_var().column(k));
            outputs.valid[i] = true;
        }
    }
    Ok(EStep {
        posterior: params,
        outputs,
        failed_batches: failed,
        degenerate,
    })
}

/// Noise statistics over the rows of `data` with valid outputs, and the
/// number of rows used.
pub fn noise_stats(data: &Dataset, out: &OutputPosterior) -> Result<(NoiseStats, usize)> {
    let rows: Vec<usize> = (0..data.len()).filter(|&i| out.valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::Empty("output posteriors"));
    }
    match &data.labels {
        Labels::Regression(y) => {
            let mut acc = 0.0;
            for &i in &rows {
                for m in 0..y.ncols() {
                    acc += (y[(i, m)] - out.mean[(i, m)]).powi(2) + out.var[(i, m)];
                }
            }
            Ok((
                NoiseStats::Regression {
                    sigma: acc / (rows.len() * y.ncols()) as f64,
                },
                rows.len(),
            ))
        }
        Labels::Classification { classes, n_classes } => {
            let (mut s1, mut s2) = (0.0, 0.0);
            for &i in &rows {
                let c = classes[i];
                for m in (0..*n_classes).filter(|&m| m != c) {
                    let mu = out.mean[(i, m)] - out.mean[(i, c)];
                    let v = out.var[(i, m)] + out.var[(i, c)];
                    s1 += mu;
                    s2 += v + mu * mu;
                }
            }
            let pairs = (rows.len() * (n_classes - 1)) as f64;
            Ok((
                NoiseStats::Classification {
                    mu: s1 / pairs,
                    second: s2 / pairs,
                },
                rows.len(),
            ))
        }
    }
}

/// `v* = Σ((y - μ_z)² + v_z)/(N_L·I)` for `I × N_L` arrays.
pub fn noise_update_regression(
    z_mean: ArrayView2<f64>,
    z_var: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("regression outputs"));
    }
    if z_mean.dim() != y.dim() || z_var.dim() != y.dim() {
        return Err(Error::Shape(
            "posterior and target arrays differ in shape".into(),
        ));
    }
    let acc: f64 = y
        .iter()
        .zip(z_mean.iter())
        .zip(z_var.iter())
        .map(|((t, m), v)| (t - m).powi(2) + v)
        .sum();
    Ok(acc / y.len() as f64)
}

/// Gumbel fit of the margin moments, tabulated optimum, then an even blend
/// with the current value.
pub fn noise_update_classification(
    mu: f64,
    second: f64,
    current: f64,
    table: &FTable,
) -> Result<f64> {
    let g = gumbel_fit(mu, second)?;
    let v0 = g.scale * g.scale * table.lookup(g.location / g.scale);
    Ok(0.5 * v0 + 0.5 * current)
}

/// New noise variance from aggregated statistics; keeps `current` (and
/// logs) when the statistics admit no update.
pub fn noise_update(stats: NoiseStats, current: f64) -> f64 {
    match stats {
        NoiseStats::Regression { sigma } => {
            if sigma > 0.0 && sigma.is_finite() {
                sigma
            } else {
                log::warn!("regression noise statistic {sigma} unusable; keeping v = {current}");
                current
            }
        }
        NoiseStats::Classification { mu, second } => {
            match noise_update_classification(mu, second, current, FTable::shared()) {
                Ok(v) if v > 0.0 && v.is_finite() => v,
                Ok(v) => {
                    log::warn!("classification noise update gave {v}; keeping v = {current}");
                    current
                }
                Err(e) => {
                    log::warn!("classification noise update skipped: {e}");
                    current
                }
            }
        }
    }
}

/// Prior hyperparameters that maximize the expected log prior: the
/// posterior's own parameters.
pub fn m_step_prior(posterior: &NetParams) -> NetParams {
    posterior.clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Groups with activity above the threshold before control.
    pub confident: usize,
    pub reset: bool,
    /// Groups with non-zero activity after control.
    pub nonzero: usize,
}

/// Resets activities when more than `target·Q_W` groups are confidently
/// active: those restart at `policy.reset`, all others are pruned (0).
pub fn sparsity_control(psi: &mut NetParams, policy: &SparsityPolicy) -> SparsityReport {
    let q_w = psi.group_activities().count();
    let confident = psi
        .group_activities()
        .filter(|&r| r > policy.threshold)
        .count();
    let reset = (confident as f64) > policy.target * q_w as f64;
    if reset {
        for r in psi.group_activities_mut() {
            *r = if *r >= policy.threshold {
                policy.reset
            } else {
                0.0
            };
        }
    }
    let nonzero = psi.group_activities().filter(|&r| r > 0.0).count();
    SparsityReport {
        confident,
        reset,
        nonzero,
    }
}

/// Full M-step shared by the centralized and federated drivers.
pub fn m_step(
    posterior: &NetParams,
    stats: Option<NoiseStats>,
    current_noise: f64,
    cfg: &TrainConfig,
    policy: &SparsityPolicy,
) -> (NetHyper, SparsityReport) {
    let mut psi = m_step_prior(posterior);
    let report = sparsity_control(&mut psi, policy);
    let noise_var = match (cfg.learn_noise, stats) {
        (true, Some(s)) => noise_update(s, current_noise),
        _ => current_noise,
    };
    (
        NetHyper {
            params: psi,
            noise_var,
        },
        report,
    )
}

/// Deterministic network with posterior-mean parameters. A weight group
/// contributes only if its posterior activity reaches the threshold and
/// sparsity control has not pruned it.
#[derive(Clone, Debug, PartialEq)]
pub struct PointModel {
    pub weights: Vec<(Array2<f64>, Array1<f64>)>,
    pub active_groups: usize,
    pub total_groups: usize,
}

impl PointModel {
    pub fn from_posterior(posterior: &NetParams, hyper: &NetParams, threshold: f64) -> Self {
        let mut active = 0;
        let mut total = 0;
        let weights = posterior
            .layers
            .iter()
            .zip(&hyper.layers)
            .map(|(post, psi)| {
                let mut w = post.w_mean.clone();
                for n in 0..post.n_in() {
                    total += 1;
                    if post.w_rho[n] >= threshold && psi.w_rho[n] > 0.0 {
                        active += 1;
                    } else {
                        w.column_mut(n).fill(0.0);
                    }
                }
                let b = Array1::from_shape_fn(post.n_out(), |m| {
                    mixture_moments(post.b_rho[m], post.b_mean[m], post.b_var[m]).0
                });
                (w, b)
            })
            .collect();
        Self {
            weights,
            active_groups: active,
            total_groups: total,
        }
    }

    /// Outputs for `x` given as `I × N_0`; returns `I × N_L`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        forward_deterministic(&self.weights, x.t()).reversed_axes()
    }

    pub fn predict_classes(&self, x: ArrayView2<f64>) -> Vec<usize> {
        crate::data::argmax_rows(self.predict(x).view())
    }

    pub fn active_fraction(&self) -> f64 {
        self.active_groups as f64 / self.total_groups.max(1) as f64
    }
}

/// State visible to per-iteration observers.
pub struct IterationReport<'a> {
    pub iteration: usize,
    pub posterior: &'a NetParams,
    pub hyper: &'a NetHyper,
    pub sparsity: SparsityReport,
    pub policy: &'a SparsityPolicy,
}

impl IterationReport<'_> {
    pub fn point_model(&self) -> PointModel {
        PointModel::from_posterior(self.posterior, &self.hyper.params, self.policy.threshold)
    }
}

#[derive(Clone, Debug)]
pub struct EmOutput {
    /// Posterior after the last E-step (the initial prior if none ran).
    pub posterior: NetParams,
    /// Hyperparameters after the last M-step.
    pub hyper: NetHyper,
    pub outputs: Option<OutputPosterior>,
    /// Iterations (or rounds) completed.
    pub iterations: usize,
}

impl EmOutput {
    pub fn point_model(&self, policy: &SparsityPolicy) -> PointModel {
        PointModel::from_posterior(&self.posterior, &self.hyper.params, policy.threshold)
    }
}

pub(crate) fn record_iteration(
    metrics: &mut Metrics,
    it: usize,
    hyper: &NetHyper,
    rep: &SparsityReport,
    e: &EStep,
) {
    metrics.push(it, "e_step", "failed_batches", e.failed_batches as f64);
    metrics.push(it, "e_step", "degenerate", e.degenerate as f64);
    metrics.push(it, "m_step", "noise_var", hyper.noise_var);
    metrics.push(it, "m_step", "confident_groups", rep.confident as f64);
    metrics.push(it, "m_step", "sparsity_reset", rep.reset as u8 as f64);
    metrics.push(it, "m_step", "nonzero_groups", rep.nonzero as f64);
}

/// Runs up to `cfg.iterations` EM iterations from `init`. `observer` runs
/// after every M-step and may end the run early.
pub fn run_em<F>(
    train: &Dataset,
    init: &NetHyper,
    cfg: &TrainConfig,
    policy: &SparsityPolicy,
    metrics: &mut Metrics,
    mut observer: F,
) -> Result<EmOutput>
where
    F: FnMut(&IterationReport, &mut Metrics) -> ControlFlow<()>,
{
    cfg.validate()?;
    policy.validate()?;
    init.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let base = shuffled_order(train.len(), cfg.seed);
    let mut hyper = init.clone();
    let mut posterior = init.params.clone();
    let mut outputs = None;
    let mut done = 0;
    for it in 1..=cfg.iterations {
        let order = cfg.order_for(&base, it);
        let e = e_step(train, &order, &hyper.params, hyper.noise_var, cfg)?;
        let stats = noise_stats(train, &e.outputs).ok().map(|s| s.0);
        let (next, rep) = m_step(&e.posterior, stats, hyper.noise_var, cfg, policy);
        hyper = next;
        record_iteration(metrics, it, &hyper, &rep, &e);
        posterior = e.posterior;
        outputs = Some(e.outputs);
        done = it;
        let report = IterationReport {
            iteration: it,
            posterior: &posterior,
            hyper: &hyper,
            sparsity: rep,
            policy,
        };
        if observer(&report, metrics).is_break() {
            break;
        }
    }
    Ok(EmOutput {
        posterior,
        hyper,
        outputs,
        iterations: done,
    })
}
