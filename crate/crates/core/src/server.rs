//! Server-side steps: skip schedule, aggregation weights, shuffle-scatter,
//! FedNova normalization and the SCAFFOLD control update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::local::LocalResult;
use crate::params::ParamVector;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipSchedule {
    delta: usize,
    total_rounds: usize,
}

impl SkipSchedule {
    pub fn new(delta: usize, total_rounds: usize) -> Result<Self> {
        if delta == 0 {
            return Err(Error::InvalidArgument("skip period must be at least 1".into()));
        }
        Ok(Self { delta, total_rounds })
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn total_rounds(&self) -> usize {
        self.total_rounds
    }

    /// Rounds in `0..T` on which the server shuffles instead of averaging.
    pub fn skip_rounds(&self) -> Vec<usize> {
        (0..self.total_rounds).filter(|&t| is_skip_round(t, self)).collect()
    }

    /// Rounds in `0..T` that start from a single broadcast model (round 0 included).
    pub fn broadcast_count(&self) -> usize {
        self.total_rounds - self.skip_rounds().len()
    }
}

/// `1 < t < T` and `t mod Δ ≠ 0`.
pub fn is_skip_round(t: usize, schedule: &SkipSchedule) -> bool {
    t > 1 && t < schedule.total_rounds && t % schedule.delta != 0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategyConfig {
    FedAvg {},
    FedProx { mu: f64 },
    Scaffold {},
    FedNova {},
    FedSkip { delta: usize },
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::FedAvg {}
    }
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::FedAvg {} => "fedavg",
            StrategyConfig::FedProx { .. } => "fedprox",
            StrategyConfig::Scaffold {} => "scaffold",
            StrategyConfig::FedNova {} => "fednova",
            StrategyConfig::FedSkip { .. } => "fedskip",
        }
    }

    /// Skip period; every non-skipping strategy behaves like `Δ = 1`.
    pub fn delta(&self) -> usize {
        match self {
            StrategyConfig::FedSkip { delta } => *delta,
            _ => 1,
        }
    }

    /// Short label such as `fedskip-3` or `fedprox-0.01`.
    pub fn label(&self) -> String {
        match self {
            StrategyConfig::FedSkip { delta } => format!("fedskip-{delta}"),
            StrategyConfig::FedProx { mu } => format!("fedprox-{mu}"),
            other => other.name().to_string(),
        }
    }
}

/// Sample counts consumed by each model slot since the last aggregation.
///
/// Rows are slots and travel with their model when models are shuffled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLedger {
    rows: Vec<Vec<usize>>,
}

impl SampleLedger {
    pub fn new(slots: usize) -> Self {
        Self { rows: vec![Vec::new(); slots] }
    }

    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::InvalidArgument("ledger rows must have equal length".into()));
        }
        if rows.iter().flatten().any(|&c| c == 0) {
            return Err(Error::InvalidArgument("ledger counts must be positive".into()));
        }
        Ok(Self { rows })
    }

    pub fn slots(&self) -> usize {
        self.rows.len()
    }

    /// Rounds recorded since the last reset.
    pub fn period_len(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn record_round(&mut self, counts: &[usize]) -> Result<()> {
        if counts.len() != self.rows.len() {
            return Err(Error::DimensionMismatch { expected: self.rows.len(), found: counts.len() });
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("ledger counts must be positive".into()));
        }
        for (row, &c) in self.rows.iter_mut().zip(counts) {
            row.push(c);
        }
        Ok(())
    }

    /// Reorders slots so that new slot `i` holds old slot `permutation[i]`.
    pub fn permute(&mut self, permutation: &[usize]) {
        let old = std::mem::take(&mut self.rows);
        self.rows = permutation.iter().map(|&i| old[i].clone()).collect();
    }

    pub fn reset(&mut self) {
        self.rows.iter_mut().for_each(Vec::clear);
    }

    pub fn slot_totals(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.iter().map(|&c| c as u64).sum()).collect()
    }
}

fn proportional(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `p_k = N_k / Σ N_k'`.
pub fn fedavg_weights(clients: &[&ClientDataset]) -> Result<Vec<f64>> {
    if clients.is_empty() || clients.iter().any(|c| c.n_samples() == 0) {
        return Err(Error::EmptyDataset);
    }
    Ok(proportional(&clients.iter().map(|c| c.n_samples() as u64).collect::<Vec<_>>()))
}

/// Each slot's share of all samples consumed during the current period.
pub fn cumulative_weights(ledger: &SampleLedger) -> Result<Vec<f64>> {
    if ledger.slots() == 0 || ledger.period_len() == 0 {
        return Err(Error::EmptyLedger);
    }
    Ok(proportional(&ledger.slot_totals()))
}

/// `Σ p_k w_k`, accumulated in slot order.
pub fn weighted_average(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights { sum });
    }
    ParamVector::weighted_sum(models, weights)
}

/// Uniform random permutation of `0..n` (Fisher–Yates).
pub fn shuffle_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Applies a permutation: output slot `i` receives `items[permutation[i]]`.
pub fn apply_permutation<T: Clone>(items: &[T], permutation: &[usize]) -> Vec<T> {
    permutation.iter().map(|&i| items[i].clone()).collect()
}

/// Scatters models to slots in a uniformly random order.
pub fn shuffle_scatter(models: &[ParamVector], rng: &mut impl Rng) -> Result<Vec<ParamVector>> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("nothing to shuffle".into()));
    }
    Ok(apply_permutation(models, &shuffle_permutation(models.len(), rng)))
}

/// Normalized averaging of client updates.
///
/// With `d_k = (global − w_k)/τ_k` and `τ_eff = Σ p_k τ_k` the result is
/// `global − τ_eff Σ p_k d_k`. It is evaluated in the algebraically equal form
/// `(1 − Σ c_k)·global + Σ c_k w_k` with `c_k = p_k τ_eff / τ_k`, so a single
/// client reproduces its own parameters exactly.
pub fn fednova_aggregate(global: &ParamVector, results: &[LocalResult], weights: &[f64]) -> Result<ParamVector> {
    if results.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: results.len(), found: weights.len() });
    }
    if results.iter().any(|r| r.steps_taken == 0) {
        return Err(Error::ZeroSteps);
    }
    let tau_eff: f64 = results.iter().zip(weights).map(|(r, p)| p * r.steps_taken as f64).sum();
    let coeffs: Vec<f64> = results.iter().zip(weights).map(|(r, p)| p * (tau_eff / r.steps_taken as f64)).collect();
    let global_coeff = 1.0 - coeffs.iter().sum::<f64>();
    let mut models: Vec<ParamVector> = results.iter().map(|r| r.params.clone()).collect();
    let mut all = coeffs;
    if global_coeff != 0.0 {
        models.push(global.clone());
        all.push(global_coeff);
    }
    for m in &models {
        global.ensure_same_layout(m)?;
    }
    ParamVector::weighted_sum(&models, &all)
}

/// `c ← c + fraction · mean(Δc_k)`.
pub fn scaffold_server_update(
    c_global: &ParamVector,
    control_deltas: &[ParamVector],
    participation_fraction: f64,
) -> Result<ParamVector> {
    if control_deltas.is_empty() {
        return Ok(c_global.clone());
    }
    let n = control_deltas.len() as f64;
    let mut values = c_global.values().to_vec();
    let mut mean = vec![0.0; values.len()];
    for delta in control_deltas {
        c_global.ensure_same_layout(delta)?;
        for (m, d) in mean.iter_mut().zip(delta.values()) {
            *m += d;
        }
    }
    for (v, m) in values.iter_mut().zip(&mean) {
        *v += participation_fraction * (m / n);
    }
    ParamVector::new(*c_global.spec(), values)
}
