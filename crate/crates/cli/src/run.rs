//! Command implementations shared by the binary and the test suites.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tdamp_core::checkpoint::Checkpoint;
use tdamp_core::data::{load_idx, load_regression_csv, Dataset, Labels, Normalizer, Split};
use tdamp_core::em::{run_em, EmOutput, IterationReport, PointModel};
use tdamp_core::fed::run_federated;
use tdamp_core::metrics::{error_rate, nmse, Metrics};
use tdamp_core::model::{Architecture, NetHyper};

use crate::config::{RunConfig, Task};

/// Normalized train and test splits with the fitted normalizer.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub normalizer: Normalizer,
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let d = match (cfg.task, split) {
        (Task::Regression, Split::Train) => load_regression_csv(Path::new(&cfg.train_csv), split)?,
        (Task::Regression, Split::Test) => load_regression_csv(Path::new(&cfg.test_csv), split)?,
        (Task::Classification, Split::Train) => load_idx(
            Path::new(&cfg.train_images),
            Path::new(&cfg.train_labels),
            split,
        )?,
        (Task::Classification, Split::Test) => load_idx(
            Path::new(&cfg.test_images),
            Path::new(&cfg.test_labels),
            split,
        )?,
    };
    if split == Split::Train && cfg.train_limit > 0 && cfg.train_limit < d.len() {
        return Ok(d.subset(&(0..cfg.train_limit).collect::<Vec<_>>()));
    }
    Ok(d)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let normalizer = Normalizer::fit(&train);
    Ok(Prepared {
        train: normalizer.apply(&train),
        test: normalizer.apply(&test),
        normalizer,
    })
}

pub fn architecture(cfg: &RunConfig, train: &Dataset) -> Result<Architecture> {
    let mut widths = vec![train.n_features()];
    widths.extend(&cfg.hidden);
    widths.push(train.n_outputs());
    Ok(Architecture::new(widths)?)
}

pub fn init_hyper(cfg: &RunConfig, arch: &Architecture) -> Result<NetHyper> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(NetHyper::init(arch, &cfg.init_config(), &mut rng)?)
}

/// Test metric: NMSE for regression, error rate for classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Score {
    pub name: &'static str,
    pub value: f64,
}

pub fn score(model: &PointModel, test: &Dataset) -> Score {
    match &test.labels {
        Labels::Regression(y) => Score {
            name: "test_nmse",
            value: nmse(model.predict(test.features.view()).view(), y.view()),
        },
        Labels::Classification { classes, .. } => Score {
            name: "test_error",
            value: error_rate(&model.predict_classes(test.features.view()), classes),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Centralized,
    Federated,
}

/// Per-iteration evaluation row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub noise_var: f64,
    pub metric: f64,
    pub active_groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub score: Score,
    pub active_groups: usize,
    pub total_groups: usize,
    pub noise_var: f64,
    pub curve: Vec<CurvePoint>,
}

impl RunSummary {
    pub fn active_ratio(&self) -> f64 {
        self.active_groups as f64 / self.total_groups.max(1) as f64
    }

    /// First iteration whose metric is at or below `threshold`.
    pub fn first_at_or_below(&self, threshold: f64) -> Option<usize> {
        self.curve
            .iter()
            .find(|p| p.metric <= threshold)
            .map(|p| p.iteration)
    }
}

/// Trains per `cfg`. With `out`, writes `config.toml`, `metrics.jsonl`,
/// `curve.csv` and `checkpoint.json` there.
pub fn train(cfg: &RunConfig, mode: Mode, out: Option<&Path>) -> Result<RunSummary> {
    let data = prepare(cfg)?;
    train_prepared(cfg, mode, &data, out)
}

pub fn train_prepared(
    cfg: &RunConfig,
    mode: Mode,
    data: &Prepared,
    out: Option<&Path>,
) -> Result<RunSummary> {
    let arch = architecture(cfg, &data.train)?;
    let init = init_hyper(cfg, &arch)?;
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            Metrics::with_file(&dir.join("metrics.jsonl"))?
        }
        None => Metrics::new(),
    };
    let policy = cfg.policy();
    let mut curve = Vec::new();
    let observer = |r: &IterationReport, m: &mut Metrics| {
        let pm = r.point_model();
        let s = score(&pm, &data.test);
        m.push(r.iteration, "eval", s.name, s.value);
        m.push(
            r.iteration,
            "eval",
            "active_groups",
            pm.active_groups as f64,
        );
        log::info!(
            "iteration {:>3}: {} {:.4}, noise variance {:.4}, active groups {}/{}",
            r.iteration,
            s.name,
            s.value,
            r.hyper.noise_var,
            pm.active_groups,
            pm.total_groups
        );
        curve.push(CurvePoint {
            iteration: r.iteration,
            noise_var: r.hyper.noise_var,
            metric: s.value,
            active_groups: pm.active_groups,
        });
        if cfg.stop_below > 0.0 && s.value <= cfg.stop_below {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let result: EmOutput = match mode {
        Mode::Centralized => run_em(
            &data.train,
            &init,
            &cfg.train_config(),
            &policy,
            &mut metrics,
            observer,
        )?,
        Mode::Federated => run_federated(
            &data.train,
            &init,
            &cfg.fed_config(),
            &cfg.train_config(),
            &policy,
            &mut metrics,
            observer,
        )?,
    };
    let pm = result.point_model(&policy);
    let summary = RunSummary {
        iterations: result.iterations,
        score: score(&pm, &data.test),
        active_groups: pm.active_groups,
        total_groups: pm.total_groups,
        noise_var: result.hyper.noise_var,
        curve,
    };
    if let Some(dir) = out {
        let ck = Checkpoint {
            iteration: result.iterations,
            hyper: result.hyper,
            posterior: result.posterior,
            policy,
            normalizer: Some(data.normalizer.clone()),
            run: serde_json::to_value(cfg)?,
        };
        ck.save(&dir.join("checkpoint.json"))?;
        write_curve(&dir.join("curve.csv"), &summary.curve)?;
    }
    Ok(summary)
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("iteration,noise_var,metric,active_groups\n");
    for p in curve {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.iteration, p.noise_var, p.metric, p.active_groups
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Scores a checkpoint on the test split named by its configuration echo,
/// after applying `overrides`.
pub fn eval(checkpoint: &Path, overrides: &[String]) -> Result<Score> {
    let ck = Checkpoint::load(checkpoint)?;
    let base: RunConfig =
        serde_json::from_value(ck.run.clone()).context("checkpoint configuration echo")?;
    let cfg = base.with_overrides(overrides)?;
    let raw = load_split(&cfg, Split::Test)?;
    let test = match &ck.normalizer {
        Some(n) => n.apply(&raw),
        None => raw,
    };
    let pm = PointModel::from_posterior(&ck.posterior, &ck.hyper.params, ck.policy.threshold);
    if pm.weights[0].0.ncols() != test.n_features() {
        anyhow::bail!(
            "checkpoint expects {} features, test data has {}",
            pm.weights[0].0.ncols(),
            test.n_features()
        );
    }
    Ok(score(&pm, &test))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub sparsity: f64,
    /// Mean final test metric over repeats.
    pub metric: f64,
    pub metric_sd: f64,
    /// Largest achieved active-group ratio over repeats.
    pub active_ratio: f64,
    pub repeats: usize,
}

/// One training run per target sparsity and repeat (seeds `seed..seed+repeats`).
/// Rows come back sorted by sparsity. Sparse targets start from the reset
/// activity so pruning can act from the first M-step.
pub fn sweep(
    cfg: &RunConfig,
    targets: &[f64],
    repeats: usize,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    anyhow::ensure!(repeats > 0, "repeats must be positive");
    anyhow::ensure!(!targets.is_empty(), "no sparsity targets given");
    let mut targets = targets.to_vec();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    let data = prepare(cfg)?;
    let mut rows = Vec::new();
    for &t in &targets {
        let mut scores = Vec::new();
        let mut ratio: f64 = 0.0;
        for r in 0..repeats {
            let mut c = cfg.clone();
            c.sparsity_target = t;
            c.seed = cfg.seed + r as u64;
            if t < 1.0 {
                c.rho_init = c.rho_init.min(c.sparsity_reset);
            }
            c.validate()?;
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("sparsity_{t}_seed_{}", c.seed)));
            let s = train_prepared(&c, Mode::Centralized, &data, dir.as_deref())?;
            if let Some(d) = &dir {
                let ck = Checkpoint::load(&d.join("checkpoint.json"))?;
                let pm = PointModel::from_posterior(
                    &ck.posterior,
                    &ck.hyper.params,
                    ck.policy.threshold,
                );
                ratio = ratio.max(pm.active_fraction());
            } else {
                ratio = ratio.max(s.active_ratio());
            }
            scores.push(s.score.value);
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        rows.push(SweepRow {
            sparsity: t,
            metric: mean,
            metric_sd: sd,
            active_ratio: ratio,
            repeats,
        });
    }
    if let Some(o) = out {
        let mut text = String::from("sparsity,metric,metric_sd,active_ratio,repeats\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sparsity, r.metric, r.metric_sd, r.active_ratio, r.repeats
            ));
        }
        fs::write(o.join("sweep.csv"), text)?;
    }
    Ok(rows)
}
