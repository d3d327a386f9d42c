//! Diagnostics over client models and recorded runs.

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::local::make_batches;
use crate::model::{self, Batch, Example, ModelFamily, ModelSpec};
use crate::orchestrator::{format_beta, ExperimentConfig, Phase, RoundRecord, Snapshot};
use crate::params::ParamVector;
use crate::server::{is_skip_round, weighted_average, SkipSchedule};

/// `Σ p_k ‖w_k − w̄‖²` with `w̄ = Σ p_k w_k`.
pub fn client_drift_variance(models: &[ParamVector], weights: &[f64]) -> Result<f64> {
    let mean = weighted_average(models, weights)?;
    let mut total = 0.0;
    for (m, p) in models.iter().zip(weights) {
        total += p * m.distance_sq(&mean)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaBudget {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for GammaBudget {
    fn default() -> Self {
        Self { max_iters: 2000, grad_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub params: ParamVector,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    /// `max(0, raw)`.
    pub gamma: f64,
    /// `F* − Σ p_k F_k*` before clamping.
    pub raw: f64,
    pub clamped: bool,
    pub global_min: f64,
    pub client_mins: Vec<f64>,
    /// Every inner minimization reached the gradient tolerance.
    pub converged: bool,
}

/// Minimizes `Σ weights[i] · mean-loss(parts[i])` by full-batch gradient
/// descent with Armijo backtracking, starting from zero.
pub fn minimize_weighted_loss(
    spec: &ModelSpec,
    parts: &[&[Example]],
    weights: &[f64],
    budget: GammaBudget,
) -> Result<Minimum> {
    if parts.len() != weights.len() || parts.is_empty() {
        return Err(Error::DimensionMismatch { expected: parts.len(), found: weights.len() });
    }
    let batches: Vec<Batch<'_>> = parts.iter().map(|p| Batch::from_examples(p)).collect::<Result<_>>()?;
    let objective = |w: &ParamVector, with_grad: bool| -> Result<(f64, Option<ParamVector>)> {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batches.len());
        for (b, p) in batches.iter().zip(weights) {
            if with_grad {
                let (l, g) = model::loss_and_gradient(w, b)?;
                loss += p * l;
                grads.push(g);
            } else {
                loss += p * model::loss(w, b)?;
            }
        }
        let grad = if with_grad { Some(ParamVector::weighted_sum(&grads, weights)?) } else { None };
        Ok((loss, grad))
    };

    let mut w = ParamVector::zeros(*spec);
    let (mut f, g) = objective(&w, true)?;
    let mut g = g.expect("gradient requested");
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < budget.max_iters {
        let gn_sq = g.norm_sq();
        if gn_sq.sqrt() < budget.grad_tol {
            converged = true;
            break;
        }
        let mut accepted = None;
        while step > 1e-14 {
            let trial = w.sub(&g.scale(step)?)?;
            let (ft, _) = objective(&trial, false)?;
            if ft <= f - 0.5 * step * gn_sq {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };
        w = next;
        let (fn_, gn) = objective(&w, true)?;
        f = fn_;
        g = gn.expect("gradient requested");
        step = (step * 2.0).min(1e3);
        iterations += 1;
    }
    if !converged && g.norm() < budget.grad_tol {
        converged = true;
    }
    Ok(Minimum { grad_norm: g.norm(), params: w, loss: f, iterations, converged })
}

/// Estimates the non-IID degree `Γ = F* − Σ p_k F_k*` on a convex model.
pub fn estimate_gamma(
    clients: &[ClientDataset],
    weights: &[f64],
    spec: &ModelSpec,
    budget: GammaBudget,
) -> Result<GammaEstimate> {
    if spec.family != (ModelFamily::LinearSoftmax {}) {
        return Err(Error::InvalidArgument("Γ estimation needs the convex linear-softmax model".into()));
    }
    if clients.len() != weights.len() || clients.is_empty() {
        return Err(Error::DimensionMismatch { expected: clients.len(), found: weights.len() });
    }
    let parts: Vec<&[Example]> = clients.iter().map(|c| c.train.as_slice()).collect();
    let global = minimize_weighted_loss(spec, &parts, weights, budget)?;
    let mut converged = global.converged;
    let mut client_mins = Vec::with_capacity(clients.len());
    for part in &parts {
        let m = minimize_weighted_loss(spec, &[part], &[1.0], budget)?;
        converged &= m.converged;
        client_mins.push(m.loss);
    }
    let weighted_mins: f64 = client_mins.iter().zip(weights).map(|(f, p)| p * f).sum();
    let raw = global.loss - weighted_mins;
    Ok(GammaEstimate { gamma: raw.max(0.0), raw, clamped: raw < 0.0, global_min: global.loss, client_mins, converged })
}

/// `4 Δ η² E² G²`.
pub fn divergence_bound(delta: usize, lr: f64, local_steps: usize, grad_bound: f64) -> f64 {
    let e = local_steps as f64;
    4.0 * delta as f64 * lr * lr * e * e * grad_bound * grad_bound
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub round: usize,
    pub phase: Phase,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub points: Vec<BoundPoint>,
    /// Estimated `G` (largest observed stochastic-gradient norm).
    pub grad_bound: f64,
    pub delta: usize,
    pub lr: f64,
    pub local_steps: usize,
    pub rhs: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.points.iter().all(|p| p.margin >= 0.0)
    }

    pub fn min_margin(&self) -> Option<f64> {
        self.points.iter().map(|p| p.margin).reduce(f64::min)
    }
}

/// Builds a report from precomputed divergence values.
pub fn bound_report_from_drift(
    drift: impl IntoIterator<Item = (usize, Phase, f64)>,
    delta: usize,
    lr: f64,
    local_steps: usize,
    grad_bound: f64,
) -> BoundReport {
    let rhs = divergence_bound(delta, lr, local_steps, grad_bound);
    let points =
        drift.into_iter().map(|(round, phase, lhs)| BoundPoint { round, phase, lhs, rhs, margin: rhs - lhs }).collect();
    BoundReport { points, grad_bound, delta, lr, local_steps, rhs }
}

/// Checks the client-divergence bound at every recorded snapshot.
///
/// `local_steps` is the number of optimizer steps in one local call (use the
/// largest over clients when they differ).
pub fn divergence_bound_check(
    trajectory: &[Snapshot],
    delta: usize,
    lr: f64,
    local_steps: usize,
    grad_bound: f64,
) -> Result<BoundReport> {
    let drift = trajectory
        .iter()
        .map(|s| Ok((s.round, s.phase, client_drift_variance(&s.models, &s.weights)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(bound_report_from_drift(drift, delta, lr, local_steps, grad_bound))
}

/// `C = Σ p_k² σ_k² + 6 L Γ + 8 Δ E² G²`; all inputs are expected non-negative.
pub fn convergence_constant(
    sigmas: &[f64],
    weights: &[f64],
    smoothness: f64,
    gamma: f64,
    delta: usize,
    local_steps: usize,
    grad_bound: f64,
) -> f64 {
    let variance: f64 = sigmas.iter().zip(weights).map(|(s, p)| p * p * s * s).sum();
    let e = local_steps as f64;
    variance + 6.0 * smoothness * gamma + 8.0 * delta as f64 * e * e * grad_bound * grad_bound
}

/// Proxy for `σ_k²`: mean squared deviation of mini-batch gradients from the
/// full-batch gradient at `params`, over `num_batches` random batches.
pub fn estimate_sigma_sq(
    params: &ParamVector,
    client: &ClientDataset,
    batch_size: usize,
    num_batches: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let full = model::gradient(params, &Batch::from_examples(&client.train)?)?;
    let mut total = 0.0;
    let mut seen = 0;
    while seen < num_batches {
        for batch in make_batches(&client.train, batch_size, rng)? {
            if seen == num_batches {
                break;
            }
            total += model::gradient(params, &batch)?.distance_sq(&full)?;
            seen += 1;
        }
    }
    Ok(if num_batches == 0 { 0.0 } else { total / num_batches as f64 })
}

/// Upper bound on the smoothness constant of mean softmax cross-entropy:
/// `½ · max ‖(x, 1)‖²`.
pub fn smoothness_bound(spec: &ModelSpec, examples: &[Example]) -> Result<f64> {
    if spec.family != (ModelFamily::LinearSoftmax {}) {
        return Err(Error::InvalidArgument("smoothness bound is only derived for linear-softmax".into()));
    }
    examples
        .iter()
        .map(|e| 0.5 * (1.0 + e.features.iter().map(|x| x * x).sum::<f64>()))
        .reduce(f64::max)
        .ok_or(Error::EmptyDataset)
}

/// Server time of a run: `A` per broadcast round and `S` per skip round.
pub fn server_time(schedule: &SkipSchedule, shuffle_cost: f64, aggregate_cost: f64) -> f64 {
    (0..schedule.total_rounds()).map(|t| if is_skip_round(t, schedule) { shuffle_cost } else { aggregate_cost }).sum()
}

/// Reference point for speedups: a baseline's best accuracy and the number of
/// communication rounds it needed to first reach it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub best_accuracy: f64,
    pub rounds_to_best: usize,
}

impl Baseline {
    pub fn from_records(records: &[RoundRecord]) -> Option<Self> {
        let best_accuracy = best_accuracy(records)?;
        let rounds_to_best = first_reaching(records, best_accuracy)?.comm_rounds_so_far;
        Some(Self { best_accuracy, rounds_to_best })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySummary {
    pub target_accuracy: f64,
    pub rounds_to_target: Option<usize>,
    pub aggregations_to_target: Option<usize>,
    pub speedup_vs_baseline: Option<f64>,
}

pub fn best_accuracy(records: &[RoundRecord]) -> Option<f64> {
    records.iter().filter_map(|r| r.test_accuracy).reduce(f64::max)
}

pub fn mean_drift_variance(records: &[RoundRecord]) -> Option<f64> {
    let values: Vec<f64> = records.iter().filter_map(|r| r.drift_variance).collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// First record whose test accuracy reaches `target`.
pub fn first_reaching(records: &[RoundRecord], target: f64) -> Option<&RoundRecord> {
    records.iter().find(|r| r.test_accuracy.is_some_and(|a| a >= target))
}

/// Rounds and aggregations needed to reach the baseline's best accuracy, and
/// the speedup `baseline rounds / rounds to target`.
pub fn efficiency_summary(records: &[RoundRecord], baseline: &Baseline) -> EfficiencySummary {
    let hit = first_reaching(records, baseline.best_accuracy);
    let rounds_to_target = hit.map(|r| r.comm_rounds_so_far);
    EfficiencySummary {
        target_accuracy: baseline.best_accuracy,
        rounds_to_target,
        aggregations_to_target: hit.map(|r| r.aggregations_so_far),
        speedup_vs_baseline: rounds_to_target.map(|r| baseline.rounds_to_best as f64 / r as f64),
    }
}

/// One CSV row per run cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub delta: usize,
    pub beta: String,
    pub seed: u64,
    pub status: String,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub aggregations_to_target: Option<usize>,
    pub speedup: Option<f64>,
    pub mean_drift_variance: Option<f64>,
    pub gamma: Option<f64>,
}

impl SummaryRow {
    /// A row with the cell's identity filled in and every metric empty.
    pub fn for_config(cfg: &ExperimentConfig, status: &str) -> Self {
        Self {
            strategy: cfg.strategy.label(),
            delta: cfg.strategy.delta(),
            beta: format_beta(cfg.partition.beta),
            seed: cfg.seed,
            status: status.to_string(),
            final_accuracy: None,
            best_accuracy: None,
            rounds_to_target: None,
            aggregations_to_target: None,
            speedup: None,
            mean_drift_variance: None,
            gamma: None,
        }
    }

    /// Summarizes a finished run. When `cfg.target_accuracy` is set, the
    /// rounds and aggregations needed to reach it are filled in.
    pub fn from_run(cfg: &ExperimentConfig, records: &[RoundRecord], final_accuracy: Option<f64>) -> Self {
        let mut row = Self::for_config(cfg, "ok");
        row.final_accuracy = final_accuracy;
        row.best_accuracy = best_accuracy(records);
        row.mean_drift_variance = mean_drift_variance(records);
        if let Some(hit) = cfg.target_accuracy.and_then(|t| first_reaching(records, t)) {
            row.rounds_to_target = Some(hit.comm_rounds_so_far);
            row.aggregations_to_target = Some(hit.aggregations_so_far);
        }
        row
    }

    /// Overwrites the target columns with an efficiency comparison.
    pub fn apply_efficiency(&mut self, summary: &EfficiencySummary) {
        self.rounds_to_target = summary.rounds_to_target;
        self.aggregations_to_target = summary.aggregations_to_target;
        self.speedup = summary.speedup_vs_baseline;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::Action;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(ModelSpec::linear(v.len() - 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn drift_cases() {
        let m = pv(&[1.0, 2.0]);
        assert_eq!(client_drift_variance(&[m.clone(), m.clone()], &[0.5, 0.5]).unwrap(), 0.0);
        let d = client_drift_variance(&[pv(&[0.0, 0.0]), pv(&[2.0, 0.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(d, 1.0);
        let models = [pv(&[0.3, -1.0]), pv(&[2.0, 0.5]), pv(&[-1.0, 4.0])];
        let w = [0.2, 0.3, 0.5];
        let base = client_drift_variance(&models, &w).unwrap();
        let scaled: Vec<_> = models.iter().map(|m| m.scale(3.0).unwrap()).collect();
        assert_abs_diff_eq!(client_drift_variance(&scaled, &w).unwrap(), 9.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn convergence_constant_cases() {
        assert_eq!(convergence_constant(&[0.0], &[1.0], 0.0, 0.0, 0, 0, 0.0), 0.0);
        assert_eq!(convergence_constant(&[0.0], &[1.0], 2.0, 1.0, 1, 1, 1.0), 20.0);
        assert_eq!(convergence_constant(&[2.0, 1.0], &[0.5, 0.5], 0.0, 0.0, 1, 0, 0.0), 1.25);
    }

    fn rec(round: usize, acc: Option<f64>, aggs: usize) -> RoundRecord {
        RoundRecord {
            round,
            action: Action::Aggregate,
            test_accuracy: acc,
            drift_variance: Some(0.0),
            aggregations_so_far: aggs,
            comm_rounds_so_far: round + 1,
            wall_time_ms: 0,
        }
    }

    #[test]
    fn efficiency_cases() {
        let baseline = Baseline { best_accuracy: 0.9, rounds_to_best: 200 };
        let never = [rec(0, Some(0.1), 1), rec(1, Some(0.5), 2)];
        let s = efficiency_summary(&never, &baseline);
        assert_eq!((s.rounds_to_target, s.aggregations_to_target, s.speedup_vs_baseline), (None, None, None));

        let quick = [rec(0, None, 1), rec(1, None, 2), rec(2, None, 2), rec(3, None, 2), rec(4, Some(0.95), 3)];
        let s = efficiency_summary(&quick, &baseline);
        assert_eq!(s.rounds_to_target, Some(5));
        assert_eq!(s.aggregations_to_target, Some(3));
        assert_eq!(s.speedup_vs_baseline, Some(40.0));

        let own = [rec(0, Some(0.3), 1), rec(1, Some(0.7), 2), rec(2, Some(0.6), 3)];
        let b = Baseline::from_records(&own).unwrap();
        assert_eq!(b, Baseline { best_accuracy: 0.7, rounds_to_best: 2 });
        assert_eq!(efficiency_summary(&own, &b).speedup_vs_baseline, Some(1.0));
    }

    #[test]
    fn server_time_counts_skips() {
        let s = SkipSchedule::new(5, 200).unwrap();
        let skips = s.skip_rounds().len() as f64;
        assert_eq!(server_time(&s, 3.0, 1.0) - server_time(&SkipSchedule::new(1, 200).unwrap(), 3.0, 1.0), skips * 2.0);
    }

    #[test]
    fn gamma_single_client_is_zero() {
        let data: Vec<Example> =
            (0..40).map(|i| Example::new(vec![(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()], i % 3)).collect();
        let client = ClientDataset::new(0, data);
        let est = estimate_gamma(&[client], &[1.0], &ModelSpec::linear(2, 3), GammaBudget::default()).unwrap();
        assert_eq!(est.gamma, 0.0);
        assert_eq!(est.raw, 0.0);
    }
}
