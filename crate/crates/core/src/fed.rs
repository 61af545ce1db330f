//! In-process federated simulation.
//!
//! Each round the server broadcasts `(ψ, v)`; every client runs
//! `inner_iterations` E-step passes over its shard with posterior-as-prior
//! chaining and uploads its posterior plus noise statistics. The server
//! fuses the posteriors by a weighted geometric average, pools the noise
//! statistics, and runs the same M-step as the centralized driver.
//!
//! Summaries cross the simulated uplink as encoded records, the same format
//! checkpoints use.

use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode, encode};
use crate::data::{partition_clients, shuffled_order, Dataset};
use crate::em::{
    e_step, m_step, noise_stats, noise_update, EmOutput, IterationReport, NoiseStats,
    SparsityPolicy, TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{LayerParams, NetHyper, NetParams};
use crate::prior::{logit, sigmoid};

/// What a client uploads after local training. Its size depends only on
/// the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub posterior: NetParams,
    pub noise: NoiseStats,
    /// Samples behind `noise`; the aggregation weight.
    pub count: usize,
}

impl ClientSummary {
    pub const KIND: &'static str = "client-summary";
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    /// Communication rounds.
    pub rounds: usize,
    /// Local E-step passes per round.
    pub inner_iterations: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            rounds: 50,
            inner_iterations: 10,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.inner_iterations == 0 {
            return Err(Error::Config(
                "client count and inner iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A client's private data. Rows keep their training-set order; `order` is
/// the client's share of the run's shuffled order in local row indices.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub client: usize,
    pub data: Dataset,
    pub order: Vec<usize>,
}

/// Equal-size shards of the seeded training order.
pub fn partition(train: &Dataset, clients: usize, seed: u64) -> Result<Vec<ClientData>> {
    let shards = partition_clients(&shuffled_order(train.len(), seed), clients)?;
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client, shard)| {
            let mut rows = shard.clone();
            rows.sort_unstable();
            let order = shard
                .iter()
                .map(|i| rows.binary_search(i).expect("row is in its own shard"))
                .collect();
            ClientData {
                client,
                data: train.subset(&rows),
                order,
            }
        })
        .collect())
}

/// `inner_iterations` chained E-step passes from the broadcast
/// hyperparameters. Noise statistics come from the last pass.
pub fn client_local_train(
    local: &ClientData,
    broadcast: &NetHyper,
    fed: &FedConfig,
    cfg: &TrainConfig,
    round: usize,
) -> Result<ClientSummary> {
    if local.data.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    broadcast.validate()?;
    let mut params = broadcast.params.clone();
    let mut outputs = None;
    for t in 1..=fed.inner_iterations {
        let schedule = (round - 1) * fed.inner_iterations + t;
        let order = cfg.order_for(&local.order, schedule);
        let e = e_step(&local.data, &order, &params, broadcast.noise_var, cfg)?;
        params = e.posterior;
        outputs = Some(e.outputs);
    }
    let outputs = outputs.expect("at least one inner iteration");
    let (noise, count) = noise_stats(&local.data, &outputs)?;
    Ok(ClientSummary {
        client: local.client,
        posterior: params,
        noise,
        count,
    })
}

fn weights(summaries: &[&ClientSummary]) -> Result<Vec<f64>> {
    let total: usize = summaries.iter().map(|s| s.count).sum();
    if total == 0 {
        return Err(Error::NoClients);
    }
    Ok(summaries
        .iter()
        .map(|s| s.count as f64 / total as f64)
        .collect())
}

fn sorted(summaries: &[ClientSummary]) -> Result<Vec<&ClientSummary>> {
    if summaries.is_empty() {
        return Err(Error::NoClients);
    }
    let mut v: Vec<&ClientSummary> = summaries.iter().collect();
    v.sort_by_key(|s| s.client);
    Ok(v)
}

/// Normalized `∏ ρ_k^{w_k}` against `∏ (1 - ρ_k)^{w_k}`.
fn fuse_activity(rhos: impl Iterator<Item = f64> + Clone, w: &[f64]) -> f64 {
    if rhos.clone().any(|r| r == 0.0) {
        0.0
    } else if rhos.clone().any(|r| r == 1.0) {
        1.0
    } else {
        sigmoid(rhos.zip(w).map(|(r, wk)| wk * logit(r)).sum())
    }
}

/// Precision-weighted `(mean, var)`: `τ = Σ w_k/v_k`, `μ = Σ w_k μ_k/v_k / τ`.
fn fuse_gaussian(parts: impl Iterator<Item = (f64, f64)>, w: &[f64]) -> (f64, f64) {
    let (mut tau, mut eta) = (0.0, 0.0);
    for ((m, v), wk) in parts.zip(w) {
        tau += wk / v;
        eta += wk * m / v;
    }
    (eta / tau, 1.0 / tau)
}

fn fuse_layer(ls: &[&LayerParams], w: &[f64]) -> LayerParams {
    let mut out = ls[0].clone();
    for n in 0..out.n_in() {
        out.w_rho[n] = fuse_activity(ls.iter().map(|l| l.w_rho[n]), w);
    }
    for ((m, n), mean) in out.w_mean.indexed_iter_mut() {
        let (mu, v) = fuse_gaussian(ls.iter().map(|l| (l.w_mean[(m, n)], l.w_var[(m, n)])), w);
        *mean = mu;
        out.w_var[(m, n)] = v;
    }
    for m in 0..out.n_out() {
        out.b_rho[m] = fuse_activity(ls.iter().map(|l| l.b_rho[m]), w);
        let (mu, v) = fuse_gaussian(ls.iter().map(|l| (l.b_mean[m], l.b_var[m])), w);
        out.b_mean[m] = mu;
        out.b_var[m] = v;
    }
    out
}

/// Weighted geometric average of client posteriors, weights `I_k / I`.
/// A single summary passes through unchanged.
pub fn aggregate_posteriors(summaries: &[ClientSummary]) -> Result<NetParams> {
    let s = sorted(summaries)?;
    if s.len() == 1 {
        return Ok(s[0].posterior.clone());
    }
    if let Some(bad) = s.iter().find(|c| !c.posterior.same_shape(&s[0].posterior)) {
        return Err(Error::Shape(format!(
            "client {} posterior shape differs",
            bad.client
        )));
    }
    let w = weights(&s)?;
    let layers = (0..s[0].posterior.layers.len())
        .map(|k| {
            let ls: Vec<&LayerParams> = s.iter().map(|c| &c.posterior.layers[k]).collect();
            fuse_layer(&ls, &w)
        })
        .collect();
    Ok(NetParams { layers })
}

/// Sample-weighted pooling of the clients' noise statistics; equals the
/// statistics computed on the union of the shards.
pub fn aggregate_noise_stats(summaries: &[ClientSummary]) -> Result<NoiseStats> {
    let s = sorted(summaries)?;
    let w = weights(&s)?;
    let mut acc = s[0].noise;
    match &mut acc {
        NoiseStats::Regression { sigma } => *sigma *= w[0],
        NoiseStats::Classification { mu, second } => {
            *mu *= w[0];
            *second *= w[0];
        }
    }
    for (c, wk) in s.iter().zip(&w).skip(1) {
        match (&mut acc, c.noise) {
            (NoiseStats::Regression { sigma }, NoiseStats::Regression { sigma: sk }) => {
                *sigma += wk * sk
            }
            (
                NoiseStats::Classification { mu, second },
                NoiseStats::Classification { mu: mk, second: ek },
            ) => {
                *mu += wk * mk;
                *second += wk * ek;
            }
            _ => {
                return Err(Error::Shape(format!(
                    "client {} reports a different likelihood",
                    c.client
                )))
            }
        }
    }
    Ok(acc)
}

/// Server noise update from pooled statistics.
pub fn aggregate_noise(summaries: &[ClientSummary], current: f64) -> Result<f64> {
    Ok(noise_update(aggregate_noise_stats(summaries)?, current))
}

/// `fed.rounds` rounds from `init`. Clients that fail are dropped for the
/// round and the rest are reweighted; a round with no survivors ends the
/// run with [`Error::NoClients`]. `observer` runs after every server
/// update and may end the run early.
pub fn run_federated<F>(
    train: &Dataset,
    init: &NetHyper,
    fed: &FedConfig,
    cfg: &TrainConfig,
    policy: &SparsityPolicy,
    metrics: &mut Metrics,
    mut observer: F,
) -> Result<EmOutput>
where
    F: FnMut(&IterationReport, &mut Metrics) -> ControlFlow<()>,
{
    fed.validate()?;
    cfg.validate()?;
    policy.validate()?;
    init.validate()?;
    let clients = partition(train, fed.clients, cfg.seed)?;
    let mut hyper = init.clone();
    let mut posterior = init.params.clone();
    let mut done = 0;
    for round in 1..=fed.rounds {
        let uplink: Vec<Result<String>> = clients
            .par_iter()
            .map(|c| {
                client_local_train(c, &hyper, fed, cfg, round)
                    .and_then(|s| encode(ClientSummary::KIND, &s))
            })
            .collect();
        let mut summaries = Vec::with_capacity(uplink.len());
        for (c, msg) in clients.iter().zip(uplink) {
            match msg.and_then(|text| decode::<ClientSummary>(ClientSummary::KIND, &text)) {
                Ok(s) => {
                    metrics.push_client(round, s.client, "count", s.count as f64);
                    summaries.push(s);
                }
                Err(e) => {
                    log::warn!("round {round}: client {} dropped: {e}", c.client);
                    metrics.push_client(round, c.client, "dropped", 1.0);
                }
            }
        }
        posterior = aggregate_posteriors(&summaries)?;
        let stats = aggregate_noise_stats(&summaries)?;
        let (next, rep) = m_step(&posterior, Some(stats), hyper.noise_var, cfg, policy);
        hyper = next;
        metrics.push(round, "server", "clients", summaries.len() as f64);
        metrics.push(round, "m_step", "noise_var", hyper.noise_var);
        metrics.push(round, "m_step", "confident_groups", rep.confident as f64);
        metrics.push(round, "m_step", "sparsity_reset", rep.reset as u8 as f64);
        metrics.push(round, "m_step", "nonzero_groups", rep.nonzero as f64);
        done = round;
        let report = IterationReport {
            iteration: round,
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
        outputs: None,
        iterations: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, Split};
    use crate::model::{Architecture, InitConfig};
    use ndarray::{array, Array1};
    use rand::SeedableRng;

    fn params(mean: f64, var: f64, rho: f64) -> NetParams {
        let arch = Architecture::new(vec![1, 1]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = NetHyper::init(&arch, &InitConfig::default(), &mut rng)
            .unwrap()
            .params;
        let l = &mut p.layers[0];
        l.w_mean.fill(mean);
        l.w_var.fill(var);
        l.w_rho = Array1::from_elem(1, rho);
        p
    }

    fn summary(client: usize, p: NetParams, count: usize) -> ClientSummary {
        ClientSummary {
            client,
            posterior: p,
            noise: NoiseStats::Regression {
                sigma: 1.0 + client as f64,
            },
            count,
        }
    }

    #[test]
    fn two_client_gaussian_example() {
        let s = [
            summary(0, params(0.0, 1.0, 0.5), 10),
            summary(1, params(2.0, 1.0, 0.5), 10),
        ];
        let g = aggregate_posteriors(&s).unwrap();
        assert_eq!(g.layers[0].w_mean[(0, 0)], 1.0);
        assert_eq!(g.layers[0].w_var[(0, 0)], 1.0);
        assert!((g.layers[0].w_rho[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn activity_extremes_are_absorbing() {
        let w = [0.5, 0.5];
        assert_eq!(fuse_activity([0.0, 0.9].into_iter(), &w), 0.0);
        assert_eq!(fuse_activity([1.0, 0.2].into_iter(), &w), 1.0);
        let r = fuse_activity([0.2, 0.8].into_iter(), &w);
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn order_independent_and_weighted() {
        let a = summary(0, params(0.0, 1.0, 0.5), 30);
        let b = summary(1, params(4.0, 2.0, 0.5), 10);
        let ab = aggregate_posteriors(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab, aggregate_posteriors(&[b.clone(), a.clone()]).unwrap());
        let v = 1.0 / (0.75 / 1.0 + 0.25 / 2.0);
        assert!((ab.layers[0].w_var[(0, 0)] - v).abs() < 1e-15);
        assert!((ab.layers[0].w_mean[(0, 0)] - v * 0.25 * 4.0 / 2.0).abs() < 1e-15);
        let noise = aggregate_noise_stats(&[b, a]).unwrap();
        assert_eq!(
            noise,
            NoiseStats::Regression {
                sigma: 0.75 * 1.0 + 0.25 * 2.0
            }
        );
    }

    #[test]
    fn empty_and_mixed_summaries_rejected() {
        assert!(matches!(aggregate_posteriors(&[]), Err(Error::NoClients)));
        let mut b = summary(1, params(0.0, 1.0, 0.5), 1);
        b.noise = NoiseStats::Classification {
            mu: -1.0,
            second: 2.0,
        };
        assert!(aggregate_noise_stats(&[summary(0, params(0.0, 1.0, 0.5), 1), b]).is_err());
    }

    #[test]
    fn partition_keeps_row_order_and_covers() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let y = x.clone();
        let d = Dataset::new(x, Labels::Regression(y), Split::Train).unwrap();
        let parts = partition(&d, 2, 5).unwrap();
        let base = shuffled_order(5, 5);
        let mut seen = Vec::new();
        let mut offset = 0;
        for p in &parts {
            let rows: Vec<f64> = p.data.features.column(0).to_vec();
            assert!(rows.windows(2).all(|w| w[0] < w[1]));
            for (k, &local) in p.order.iter().enumerate() {
                assert_eq!(p.data.features[(local, 0)] as usize, base[offset + k]);
            }
            offset += p.order.len();
            seen.extend(rows);
        }
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(partition(&d, 6, 0).is_err());
    }
}
