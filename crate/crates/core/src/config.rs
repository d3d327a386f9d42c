//! JSON configuration: single experiments and sweep matrices.
//!
//! A document with a top-level `"sweep"` key is a [`SweepSpec`]; anything else
//! is an [`ExperimentConfig`]. Unknown keys are rejected everywhere and every
//! error names the offending field path.
//!
//! Defaults: `rounds = 200`, `sample_fraction = 1`, `eval_every = 1`,
//! `min_client_samples = 64`, `seed = 0`, strategy `fedavg`, model
//! `linear-softmax`, partition `beta = 0.5` over 10 clients, and local SGD with
//! `epochs = 10`, `lr = 0.01`, `batch_size = 64`, `momentum = 0.9`,
//! `weight_decay = 1e-5`, `prox_mu = 0`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelFamily;
use crate::orchestrator::{Beta, DatasetSpec, ExperimentConfig};
use crate::server::StrategyConfig;

pub const DEFAULT_MAX_CELLS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigDocument {
    Experiment(ExperimentConfig),
    Sweep(SweepSpec),
}

fn default_max_cells() -> usize {
    DEFAULT_MAX_CELLS
}

/// Value lists to expand around a base experiment. Empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub strategies: Vec<StrategyConfig>,
    /// Skip periods applied to every `fedskip` entry.
    #[serde(default)]
    pub deltas: Vec<usize>,
    #[serde(default)]
    pub betas: Vec<Beta>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub sweep: SweepAxes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub strategy: StrategyConfig,
    pub beta: f64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl SweepCell {
    /// File-name friendly identifier, e.g. `fedskip-3_beta-0.5_seed-1`.
    pub fn name(&self) -> String {
        format!("{}_beta-{}_seed-{}", self.strategy.label(), crate::orchestrator::format_beta(self.beta), self.seed)
    }
}

impl SweepSpec {
    /// Cartesian product ordered by beta, then seed, then strategy.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        let axes = &self.sweep;
        let base_strategies =
            if axes.strategies.is_empty() { vec![self.base.strategy] } else { axes.strategies.clone() };
        let mut strategies = Vec::new();
        for s in base_strategies {
            match s {
                StrategyConfig::FedSkip { .. } if !axes.deltas.is_empty() => {
                    strategies.extend(axes.deltas.iter().map(|&delta| StrategyConfig::FedSkip { delta }))
                }
                other => strategies.push(other),
            }
        }
        let betas: Vec<f64> = if axes.betas.is_empty() {
            vec![self.base.partition.beta]
        } else {
            axes.betas.iter().map(|b| b.0).collect()
        };
        let seeds = if axes.seeds.is_empty() { vec![self.base.seed] } else { axes.seeds.clone() };

        let total = strategies.len() * betas.len() * seeds.len();
        if total > axes.max_cells {
            return Err(Error::config(
                "sweep.max_cells",
                format!("{total} cells exceed the limit of {}", axes.max_cells),
            ));
        }
        let mut cells = Vec::with_capacity(total);
        for &beta in &betas {
            for &seed in &seeds {
                for &strategy in &strategies {
                    let mut config = self.base.clone();
                    config.strategy = strategy;
                    config.partition.beta = beta;
                    config.seed = seed;
                    cells.push(SweepCell { strategy, beta, seed, config });
                }
            }
        }
        for (i, cell) in cells.iter().enumerate() {
            cell.config.validate().map_err(|e| match e {
                Error::Config { path, message } => Error::config(format!("sweep.cells[{i}].{path}"), message),
                other => other,
            })?;
        }
        Ok(cells)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("base.{path}"), message),
            other => other,
        })?;
        if self.sweep.deltas.contains(&0) {
            return Err(Error::config("sweep.deltas", "skip periods must be at least 1"));
        }
        if self.sweep.betas.iter().any(|b| b.0.is_nan() || b.0 <= 0.0) {
            return Err(Error::config("sweep.betas", "beta must be positive"));
        }
        self.cells().map(|_| ())
    }
}

fn check(ok: bool, path: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message))
    }
}

impl ExperimentConfig {
    /// Checks every invariant, naming the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Blobs { num_classes, input_dim, n_total, class_sep } => {
                check(*num_classes > 0, "dataset.num_classes", "must be positive")?;
                check(*input_dim > 0, "dataset.input_dim", "must be positive")?;
                check(*n_total >= 10 * num_classes, "dataset.n_total", "must be at least 10 x num_classes")?;
                check(class_sep.is_finite() && *class_sep >= 0.0, "dataset.class_sep", "must be finite and >= 0")?;
            }
            DatasetSpec::LeafSynthetic(s) => {
                check(s.num_clients > 0, "dataset.num_clients", "must be positive")?;
                check(s.num_classes > 0, "dataset.num_classes", "must be positive")?;
                check(s.num_features > 0, "dataset.num_features", "must be positive")?;
                check(s.alpha >= 0.0, "dataset.alpha", "must be >= 0")?;
                check(s.beta_gen >= 0.0, "dataset.beta_gen", "must be >= 0")?;
                check(s.size_sigma >= 0.0 && s.size_mu.is_finite(), "dataset.size_sigma", "must be >= 0")?;
                check(s.test_fraction > 0.0, "dataset.test_fraction", "must be positive")?;
            }
            DatasetSpec::Tsv { .. } => {}
        }
        check(self.partition.beta > 0.0, "partition.beta", "must be positive (use \"inf\" for IID)")?;
        check(self.partition.num_clients > 0, "partition.num_clients", "must be positive")?;
        if let ModelFamily::Mlp { hidden_dim, .. } = self.model {
            check(hidden_dim > 0, "model.hidden_dim", "must be positive")?;
        }
        match self.strategy {
            StrategyConfig::FedProx { mu } => check(mu >= 0.0 && mu.is_finite(), "strategy.mu", "must be >= 0")?,
            StrategyConfig::FedSkip { delta } => check(delta >= 1, "strategy.delta", "must be at least 1")?,
            _ => {}
        }
        let l = &self.local;
        check(l.lr > 0.0 && l.lr.is_finite(), "local.lr", "must be positive")?;
        check(l.batch_size >= 1, "local.batch_size", "must be at least 1")?;
        check((0.0..1.0).contains(&l.momentum), "local.momentum", "must be in [0, 1)")?;
        check(l.weight_decay >= 0.0 && l.weight_decay.is_finite(), "local.weight_decay", "must be >= 0")?;
        check(l.prox_mu >= 0.0 && l.prox_mu.is_finite(), "local.prox_mu", "must be >= 0")?;
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0, "sample_fraction", "must be in (0, 1]")?;
        if let DatasetSpec::Blobs { .. } = self.dataset {
            check(
                self.sample_fraction * self.partition.num_clients as f64 + 1e-9 >= 1.0,
                "sample_fraction",
                "sample_fraction x num_clients must be at least 1",
            )?;
        }
        check(self.eval_every >= 1, "eval_every", "must be at least 1")?;
        if let Some(t) = self.target_accuracy {
            check((0.0..=1.0).contains(&t), "target_accuracy", "must be in [0, 1]")?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

pub fn parse_config_str(text: &str) -> Result<ConfigDocument> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if !value.is_object() {
        return Err(Error::config("<root>", "expected a JSON object"));
    }
    if value.get("sweep").is_some() {
        let spec: SweepSpec = from_value(value)?;
        spec.validate()?;
        Ok(ConfigDocument::Sweep(spec))
    } else {
        let cfg: ExperimentConfig = from_value(value)?;
        cfg.validate()?;
        Ok(ConfigDocument::Experiment(cfg))
    }
}

pub fn parse_config(path: &Path) -> Result<ConfigDocument> {
    parse_config_str(&std::fs::read_to_string(path)?)
}
