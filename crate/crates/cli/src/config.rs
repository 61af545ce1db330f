//! Flat run configuration.
//!
//! Resolution order, later layers winning: built-in defaults, a named
//! preset, a TOML file, then `--set key=value` overrides. Every layer is a
//! flat table; unknown keys are rejected when the merged table is decoded.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tdamp_core::damp::DampSettings;
use tdamp_core::em::{SparsityPolicy, TrainConfig};
use tdamp_core::fed::FedConfig;
use tdamp_core::model::InitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// CSV with a header row; the last column is the target.
    Regression,
    /// IDX image and label files, optionally gzipped.
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    /// Regression data.
    pub train_csv: String,
    pub test_csv: String,
    /// Classification data.
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Use only the first `train_limit` training rows; 0 keeps all.
    pub train_limit: usize,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    /// EM iterations, or communication rounds for federated runs.
    pub iterations: usize,
    /// Local E-step passes per federated round.
    pub inner_iterations: usize,
    /// Federated client count.
    pub clients: usize,
    /// Message damping factor in `(0, 1]`.
    pub damping: f64,
    /// Message-passing sweeps per minibatch.
    pub sweeps: usize,
    /// Posterior-as-prior exponent; only 1 is accepted.
    pub lambda: f64,
    /// Reshuffle minibatches every iteration.
    pub reshuffle: bool,
    /// Refit the noise variance in each M-step.
    pub learn_noise: bool,
    /// Initial likelihood noise variance.
    pub noise_var: f64,
    /// Initial weight-group activity.
    pub rho_init: f64,
    /// Fraction of weight groups allowed to remain.
    pub sparsity_target: f64,
    /// Activity that counts as confidently active.
    pub sparsity_threshold: f64,
    /// Activity confident groups restart from after a reset.
    pub sparsity_reset: f64,
    pub weight_mean_scale: f64,
    pub weight_var_scale: f64,
    pub bias_var: f64,
    pub seed: u64,
    /// Stop once the test metric is at or below this value; 0 disables.
    pub stop_below: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let init = InitConfig::default();
        let policy = SparsityPolicy::default();
        let damp = DampSettings::default();
        Self {
            task: Task::Regression,
            train_csv: "data/boston/train.csv".into(),
            test_csv: "data/boston/test.csv".into(),
            train_images: "data/mnist/train-images-idx3-ubyte.gz".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte.gz".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte.gz".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte.gz".into(),
            train_limit: 0,
            hidden: vec![64, 64],
            batch_size: 101,
            iterations: 100,
            inner_iterations: 10,
            clients: 1,
            damping: damp.damping,
            sweeps: damp.sweeps,
            lambda: 1.0,
            reshuffle: false,
            learn_noise: true,
            noise_var: init.noise_var,
            rho_init: init.rho,
            sparsity_target: policy.target,
            sparsity_threshold: policy.threshold,
            sparsity_reset: policy.reset,
            weight_mean_scale: init.weight_mean_scale,
            weight_var_scale: init.weight_var_scale,
            bias_var: init.bias_var,
            seed: 0,
            stop_below: 0.0,
        }
    }
}

pub const PRESETS: [&str; 4] = ["boston", "mnist", "boston-fed", "mnist-fed"];

/// Overrides applied on top of the defaults for a named preset.
fn preset_table(name: &str) -> Result<toml::Table> {
    let text = match name {
        "boston" => "task = \"regression\"\nhidden = [64, 64]\nbatch_size = 101\niterations = 100\n",
        "mnist" => "task = \"classification\"\nhidden = [128]\nbatch_size = 100\niterations = 20\n",
        "boston-fed" => {
            "task = \"regression\"\nhidden = [64, 64]\nbatch_size = 101\niterations = 50\nclients = 4\ninner_iterations = 10\n"
        }
        "mnist-fed" => {
            "task = \"classification\"\nhidden = [128]\nbatch_size = 100\niterations = 50\nclients = 10\ninner_iterations = 10\n"
        }
        _ => bail!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")),
    };
    Ok(text.parse()?)
}

/// Parses `key=value`. The value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(kv: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = kv
        .split_once('=')
        .with_context(|| format!("override {kv:?} is not key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table holds v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = parse_override(kv)?;
        table.insert(k, v);
    }
    Ok(())
}

impl RunConfig {
    /// Merges the layers and validates the result.
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())?;
        if let Some(p) = preset {
            table.extend(preset_table(p)?);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let t: toml::Table = text
                .parse()
                .with_context(|| format!("parsing {}", path.display()))?;
            table.extend(t);
        }
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    /// `self` with `--set` style overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self)?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            bail!("hidden widths must be positive");
        }
        if self.clients == 0 {
            bail!("clients must be at least 1");
        }
        if self.stop_below < 0.0 {
            bail!("stop_below must be non-negative");
        }
        self.train_config().validate()?;
        self.policy().validate()?;
        self.fed_config().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            damp: DampSettings {
                sweeps: self.sweeps,
                damping: self.damping,
            },
            seed: self.seed,
            reshuffle: self.reshuffle,
            learn_noise: self.learn_noise,
            lambda: self.lambda,
        }
    }

    pub fn policy(&self) -> SparsityPolicy {
        SparsityPolicy {
            target: self.sparsity_target,
            threshold: self.sparsity_threshold,
            reset: self.sparsity_reset,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            clients: self.clients,
            rounds: self.iterations,
            inner_iterations: self.inner_iterations,
        }
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            weight_var_scale: self.weight_var_scale,
            weight_mean_scale: self.weight_mean_scale,
            bias_var: self.bias_var,
            rho: self.rho_init,
            noise_var: self.noise_var,
        }
    }
}
