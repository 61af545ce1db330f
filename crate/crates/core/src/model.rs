//! Network shape and the per-layer Bernoulli-Gaussian parameter arrays.
//!
//! Layer `l` maps `N_in` inputs to `N_out` outputs. Weight group `n` of a
//! layer is column `n` of the weight matrix: the outgoing weights of input
//! neuron `n`, sharing the activity probability `w_rho[n]`. Every bias is its
//! own scalar group.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{mixture_moments, BGGroup};

/// Layer widths `[N_0, N_1, ..., N_L]`; ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "architecture needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of weight groups `Q_W = Σ_l N_{l-1}`.
    pub fn weight_groups(&self) -> usize {
        self.widths[..self.widths.len() - 1].iter().sum()
    }

    /// Number of bias groups `Q_b = Σ_l N_l`.
    pub fn bias_groups(&self) -> usize {
        self.widths[1..].iter().sum()
    }
}

/// Bernoulli-Gaussian parameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Activity of each input neuron's outgoing weights, length `N_in`.
    pub w_rho: Array1<f64>,
    /// Slab moments, `N_out × N_in`.
    pub w_mean: Array2<f64>,
    pub w_var: Array2<f64>,
    /// Scalar bias groups, length `N_out`.
    pub b_rho: Array1<f64>,
    pub b_mean: Array1<f64>,
    pub b_var: Array1<f64>,
}

impl LayerParams {
    pub fn n_in(&self) -> usize {
        self.w_mean.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w_mean.nrows()
    }

    pub fn weight_group(&self, n: usize) -> BGGroup {
        BGGroup::new(
            self.w_rho[n],
            self.w_mean.column(n).to_vec(),
            self.w_var.column(n).to_vec(),
        )
    }

    pub fn set_weight_group(&mut self, n: usize, g: &BGGroup) {
        self.w_rho[n] = g.rho;
        self.w_mean
            .column_mut(n)
            .assign(&Array1::from(g.mean.clone()));
        self.w_var
            .column_mut(n)
            .assign(&Array1::from(g.var.clone()));
    }

    pub fn bias_group(&self, m: usize) -> BGGroup {
        BGGroup::scalar(self.b_rho[m], self.b_mean[m], self.b_var[m])
    }

    pub fn set_bias_group(&mut self, m: usize, g: &BGGroup) {
        self.b_rho[m] = g.rho;
        self.b_mean[m] = g.mean[0];
        self.b_var[m] = g.var[0];
    }

    /// Prior marginal moments of the weights and biases (evidence-free).
    pub fn marginal_moments(&self) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>) {
        let mut wm = self.w_mean.clone();
        let mut wv = self.w_var.clone();
        for ((m, n), x) in wm.indexed_iter_mut() {
            let (a, b) = mixture_moments(self.w_rho[n], *x, self.w_var[(m, n)]);
            *x = a;
            wv[(m, n)] = b;
        }
        let mut bm = self.b_mean.clone();
        let mut bv = self.b_var.clone();
        for m in 0..bm.len() {
            let (a, b) = mixture_moments(self.b_rho[m], self.b_mean[m], self.b_var[m]);
            bm[m] = a;
            bv[m] = b;
        }
        (wm, wv, bm, bv)
    }

    fn validate(&self, l: usize) -> Result<()> {
        let (o, i) = (self.n_out(), self.n_in());
        let shapes_ok = self.w_var.dim() == (o, i)
            && self.w_rho.len() == i
            && self.b_rho.len() == o
            && self.b_mean.len() == o
            && self.b_var.len() == o;
        if !shapes_ok {
            return Err(Error::Shape(format!(
                "layer {l}: inconsistent parameter shapes"
            )));
        }
        let rho_ok = self
            .w_rho
            .iter()
            .chain(self.b_rho.iter())
            .all(|r| (0.0..=1.0).contains(r));
        let var_ok = self
            .w_var
            .iter()
            .chain(self.b_var.iter())
            .all(|v| *v >= 0.0 && v.is_finite());
        let mean_ok = self
            .w_mean
            .iter()
            .chain(self.b_mean.iter())
            .all(|x| x.is_finite());
        if !(rho_ok && var_ok && mean_ok) {
            return Err(Error::Config(format!(
                "layer {l}: activity outside [0, 1] or non-finite moments"
            )));
        }
        Ok(())
    }
}

/// A full parameter set: priors, posteriors and client summaries all share
/// this shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

impl NetParams {
    pub fn architecture(&self) -> Architecture {
        let mut widths = vec![self.layers[0].n_in()];
        widths.extend(self.layers.iter().map(|l| l.n_out()));
        Architecture { widths }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate(l)?;
            if l > 0 && layer.n_in() != self.layers[l - 1].n_out() {
                return Err(Error::Shape(format!(
                    "layer {l} input width does not match layer {} output",
                    l - 1
                )));
            }
        }
        Ok(())
    }

    /// Weight-group activities in global order (layer by layer).
    pub fn group_activities(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.w_rho.iter().copied())
    }

    pub fn group_activities_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.w_rho.iter_mut())
    }

    pub fn same_shape(&self, other: &NetParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w_mean.dim() == b.w_mean.dim())
    }
}

/// Prior initialization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Slab variance is `weight_var_scale / N_in`.
    pub weight_var_scale: f64,
    /// Slab means are drawn `N(0, weight_mean_scale / N_in)`; zero gives
    /// symmetric hidden units.
    pub weight_mean_scale: f64,
    pub bias_var: f64,
    /// Initial weight-group activity (1 for the dense model).
    pub rho: f64,
    pub noise_var: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weight_var_scale: 0.5,
            weight_mean_scale: 1.0,
            bias_var: 0.1,
            rho: 1.0,
            noise_var: 1.0,
        }
    }
}

/// Hyperparameters `ψ` (a prior-shaped parameter set) and the likelihood
/// noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetHyper {
    pub params: NetParams,
    pub noise_var: f64,
}

impl NetHyper {
    pub fn init<R: Rng + ?Sized>(
        arch: &Architecture,
        init: &InitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init.weight_var_scale > 0.0 && init.bias_var > 0.0 && init.noise_var > 0.0) {
            return Err(Error::Config("initial variances must be positive".into()));
        }
        if !(init.rho > 0.0 && init.rho <= 1.0) || init.weight_mean_scale < 0.0 {
            return Err(Error::Config(format!(
                "initial activity {} outside (0, 1]",
                init.rho
            )));
        }
        let layers = arch
            .widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let sd = (init.weight_mean_scale / n_in as f64).sqrt();
                let w_mean = Array2::from_shape_fn((n_out, n_in), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sd * z
                });
                LayerParams {
                    w_rho: Array1::from_elem(n_in, init.rho),
                    w_mean,
                    w_var: Array2::from_elem((n_out, n_in), init.weight_var_scale / n_in as f64),
                    b_rho: Array1::ones(n_out),
                    b_mean: Array1::zeros(n_out),
                    b_var: Array1::from_elem(n_out, init.bias_var),
                }
            })
            .collect();
        Ok(Self {
            params: NetParams { layers },
            noise_var: init.noise_var,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group_counts() {
        let a = Architecture::new(vec![13, 64, 64, 1]).unwrap();
        assert_eq!(a.weight_groups(), 13 + 64 + 64);
        assert_eq!(a.bias_groups(), 64 + 64 + 1);
        assert!(Architecture::new(vec![3]).is_err());
    }

    #[test]
    fn init_shapes_and_validity() {
        let a = Architecture::new(vec![4, 3, 2]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let h = NetHyper::init(&a, &InitConfig::default(), &mut rng).unwrap();
        h.validate().unwrap();
        assert_eq!(h.params.architecture(), a);
        assert_eq!(h.params.layers[0].w_mean.dim(), (3, 4));
        assert_eq!(h.params.group_activities().count(), a.weight_groups());
    }

    #[test]
    fn group_accessors_round_trip() {
        let a = Architecture::new(vec![3, 2]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut h = NetHyper::init(&a, &InitConfig::default(), &mut rng).unwrap();
        let g = BGGroup::new(0.3, vec![1.0, -1.0], vec![0.5, 0.25]);
        h.params.layers[0].set_weight_group(1, &g);
        assert_eq!(h.params.layers[0].weight_group(1), g);
    }
}
