//! The federated round loop and the local/cross toy experiments.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, ClientDataset, PartitionConfig, SyntheticConfig, DEFAULT_MIN_SAMPLES};
use crate::error::{Error, Result};
use crate::local::{train_local, ControlVariates, Corrections, LocalConfig, LocalResult};
use crate::metrics::client_drift_variance;
use crate::model::{self, init_params, Example, ModelFamily, ModelSpec};
use crate::params::ParamVector;
use crate::rng;
use crate::server::{
    apply_permutation, cumulative_weights, fedavg_weights, fednova_aggregate, is_skip_round, scaffold_server_update,
    shuffle_permutation, weighted_average, SampleLedger, SkipSchedule, StrategyConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs split by a Dirichlet partition.
    Blobs {
        #[serde(default = "defaults::blob_classes")]
        num_classes: usize,
        #[serde(default = "defaults::blob_dim")]
        input_dim: usize,
        #[serde(default = "defaults::blob_total")]
        n_total: usize,
        #[serde(default = "defaults::blob_sep")]
        class_sep: f64,
    },
    /// LEAF-style synthetic clients; the partition section is ignored.
    LeafSynthetic(SyntheticConfig),
    /// A directory of `client_<id>.tsv` files plus `test.tsv`.
    Tsv { dir: PathBuf },
}

mod defaults {
    pub fn blob_classes() -> usize {
        5
    }
    pub fn blob_dim() -> usize {
        20
    }
    pub fn blob_total() -> usize {
        2500
    }
    pub fn blob_sep() -> f64 {
        3.0
    }
    pub fn beta() -> f64 {
        0.5
    }
    pub fn num_clients() -> usize {
        10
    }
    pub fn rounds() -> usize {
        200
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn eval_every() -> usize {
        1
    }
    pub fn min_samples() -> usize {
        super::DEFAULT_MIN_SAMPLES
    }
}

/// Serializes `f64::INFINITY` as the string `"inf"`, which JSON cannot hold as a number.
pub(crate) mod beta_format {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(beta: &f64, s: S) -> Result<S::Ok, S::Error> {
        if beta.is_infinite() && *beta > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*beta)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(s) => match s.to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "iid" => Ok(f64::INFINITY),
                other => Err(de::Error::custom(format!("expected a number or \"inf\", found {other:?}"))),
            },
        }
    }
}

/// A Dirichlet concentration that reads and writes `"inf"` for the IID case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Beta(#[serde(with = "beta_format")] pub f64);

pub fn format_beta(beta: f64) -> String {
    if beta.is_infinite() {
        "inf".to_string()
    } else {
        beta.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSettings {
    #[serde(with = "beta_format", default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::num_clients")]
    pub num_clients: usize,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        Self { beta: defaults::beta(), num_clients: defaults::num_clients() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrossOrder {
    #[default]
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSettings,
    #[serde(default)]
    pub model: ModelFamily,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::one")]
    pub sample_fraction: f64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::min_samples")]
    pub min_client_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Wall-clock timing breaks byte-identical output, so it is opt-in.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub cross_order: CrossOrder,
    /// Accuracy target for efficiency summaries; defaults to the run's own best.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            partition: PartitionSettings::default(),
            model: ModelFamily::default(),
            strategy: StrategyConfig::default(),
            local: LocalConfig::default(),
            rounds: defaults::rounds(),
            sample_fraction: 1.0,
            eval_every: 1,
            min_client_samples: DEFAULT_MIN_SAMPLES,
            seed: 0,
            record_wall_time: false,
            cross_order: CrossOrder::default(),
            target_accuracy: None,
        }
    }

    /// Local settings with the run seed and the strategy's proximal weight applied.
    pub fn effective_local(&self) -> LocalConfig {
        let mut local = self.local.clone();
        local.seed = self.seed;
        if let StrategyConfig::FedProx { mu } = self.strategy {
            local.prox_mu = mu;
        }
        local
    }
}

/// Clients, test set and model layout ready for a run.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub spec: ModelSpec,
    pub clients: Vec<ClientDataset>,
    pub test: Vec<Example>,
}

/// Generates or loads the dataset, partitions it and drops small clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    let (clients, test, input_dim, num_classes) = match &cfg.dataset {
        DatasetSpec::Blobs { num_classes, input_dim, n_total, class_sep } => {
            let (train, test) = data::generate_blobs(*num_classes, *input_dim, *n_total, *class_sep, cfg.seed)?;
            let partition =
                PartitionConfig { beta: cfg.partition.beta, num_clients: cfg.partition.num_clients, seed: cfg.seed };
            (data::dirichlet_partition(&train, &partition)?, test, *input_dim, *num_classes)
        }
        DatasetSpec::LeafSynthetic(synthetic) => {
            let synthetic = SyntheticConfig { seed: cfg.seed, ..synthetic.clone() };
            let generated = data::generate_synthetic_leaf(&synthetic)?;
            (generated.clients, generated.test, synthetic.num_features, synthetic.num_classes)
        }
        DatasetSpec::Tsv { dir } => {
            let (clients, test) = data::read_federated_dir(dir)?;
            let all = clients.iter().flat_map(|c| c.train.iter()).chain(test.iter());
            let (mut dim, mut classes) = (None, 0);
            for ex in all {
                if *dim.get_or_insert(ex.features.len()) != ex.features.len() {
                    return Err(Error::InvalidArgument(format!("inconsistent feature width in {}", dir.display())));
                }
                classes = classes.max(ex.label + 1);
            }
            (clients, test, dim.ok_or(Error::EmptyDataset)?, classes)
        }
    };
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clients = data::filter_min_samples(clients, cfg.min_client_samples)?;
    let spec = ModelSpec::new(cfg.model, input_dim, num_classes)?;
    Ok(FederatedData { spec, clients, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Round 0: every slot receives the initial model.
    Init,
    /// Every slot receives the average of the previous round's models.
    Aggregate,
    /// Previous round's models are shuffled across slots.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub round: usize,
    pub action: Action,
    pub test_accuracy: Option<f64>,
    pub drift_variance: Option<f64>,
    /// Rounds so far that started from a single broadcast model (init or aggregate).
    pub aggregations_so_far: usize,
    pub comm_rounds_so_far: usize,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Models as handed to clients.
    Start,
    /// Models as returned by clients.
    End,
}

/// Client models at one point of a run, with the weights used to average them.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub round: usize,
    pub phase: Phase,
    pub models: Vec<ParamVector>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client training; `None` uses the global pool.
    pub threads: Option<usize>,
    pub record_trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// Weighted average of the last round's client models.
    pub final_params: ParamVector,
    pub final_accuracy: f64,
    /// Running max of raw mini-batch gradient norms across all clients.
    pub max_grad_norm: f64,
    /// Largest number of optimizer steps in a single local call.
    pub max_local_steps: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub trajectory: Vec<Snapshot>,
}

/// Number of clients drawn per round: `round(fraction · n)`, at least one.
pub fn sample_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Uniform sample without replacement, returned in client order.
pub fn sample_clients<'a>(all: &'a [ClientDataset], fraction: f64, rng: &mut impl Rng) -> Vec<&'a ClientDataset> {
    let m = sample_count(all.len(), fraction);
    if m >= all.len() {
        return all.iter().collect();
    }
    let mut picked = rand::seq::index::sample(rng, all.len(), m).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| &all[i]).collect()
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?.install(job),
        None => job(),
    }
}

/// Generates the data for `cfg` and runs the federated loop.
pub fn run_federated(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_federated_on(&data, cfg, opts)
}

/// Runs the federated loop on prepared data.
///
/// Round `t` starts by handing models to the sampled clients: the initial
/// model at `t = 0`, a shuffle of the previous round's models on skip rounds,
/// otherwise the aggregate of the previous round's models. After local
/// training, the round's candidate aggregate (used for evaluation and for the
/// next broadcast) weights each slot by the samples it consumed since the last
/// broadcast.
pub fn run_federated_on(data: &FederatedData, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    with_threads(opts.threads, || run_rounds(data, cfg, opts.record_trajectory))
}

fn run_rounds(data: &FederatedData, cfg: &ExperimentConfig, record_trajectory: bool) -> Result<RunOutput> {
    let spec = data.spec;
    let local = cfg.effective_local();
    let schedule = SkipSchedule::new(cfg.strategy.delta(), cfg.rounds)?;
    let n_clients = data.clients.len();
    if cfg.sample_fraction * n_clients as f64 + 1e-9 < 1.0 {
        return Err(Error::config(
            "sample_fraction",
            format!("{} x {n_clients} clients samples fewer than one client", cfg.sample_fraction),
        ));
    }
    let k = sample_count(n_clients, cfg.sample_fraction);
    let participation = k as f64 / n_clients as f64;
    let scaffold = matches!(cfg.strategy, StrategyConfig::Scaffold {});

    let initial = init_params(&spec, cfg.seed);
    let mut candidate = initial.clone();
    let mut trained: Vec<ParamVector> = Vec::new();
    let mut ledger = SampleLedger::new(k);
    let zeros = ParamVector::zeros(spec);
    let mut c_global = zeros.clone();
    let mut c_local: BTreeMap<usize, ParamVector> = BTreeMap::new();

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut trajectory = Vec::new();
    let mut aggregations = 0;
    let mut max_grad_norm = 0.0f64;
    let mut max_local_steps = 0;

    for t in 0..cfg.rounds {
        let clock = Instant::now();
        let action = if t == 0 {
            Action::Init
        } else if is_skip_round(t, &schedule) {
            Action::Skip
        } else {
            Action::Aggregate
        };
        let slots = match action {
            Action::Init => {
                ledger.reset();
                vec![initial.clone(); k]
            }
            Action::Aggregate => {
                ledger.reset();
                vec![candidate.clone(); k]
            }
            Action::Skip => {
                let perm = shuffle_permutation(k, &mut rng::stream(cfg.seed, &[rng::SHUFFLE, t as u64]));
                ledger.permute(&perm);
                apply_permutation(&trained, &perm)
            }
        };
        if action != Action::Skip {
            aggregations += 1;
        }

        let sampled = sample_clients(
            &data.clients,
            cfg.sample_fraction,
            &mut rng::stream(cfg.seed, &[rng::SAMPLE_CLIENTS, t as u64]),
        );
        if record_trajectory {
            let weights =
                if ledger.period_len() > 0 { cumulative_weights(&ledger)? } else { fedavg_weights(&sampled)? };
            trajectory.push(Snapshot { round: t, phase: Phase::Start, models: slots.clone(), weights });
        }

        let locals: Vec<&ParamVector> = sampled.iter().map(|c| c_local.get(&c.client_id).unwrap_or(&zeros)).collect();
        let results: Vec<LocalResult> = (0..k)
            .into_par_iter()
            .map(|i| {
                let controls = scaffold.then(|| ControlVariates { global: &c_global, local: locals[i] });
                let corrections = Corrections { anchor: Some(&slots[i]), controls };
                train_local(&slots[i], sampled[i], &local, t as u64, &corrections)
            })
            .collect::<Result<_>>()?;

        for r in &results {
            max_grad_norm = max_grad_norm.max(r.max_grad_norm);
            max_local_steps = max_local_steps.max(r.steps_taken);
        }
        ledger.record_round(&sampled.iter().map(|c| c.n_samples()).collect::<Vec<_>>())?;
        let weights = cumulative_weights(&ledger)?;
        trained = results.iter().map(|r| r.params.clone()).collect();
        let overflow = |e: Error| match e {
            Error::NonFinite { .. } => Error::ServerDivergence { round: t as u64 },
            other => other,
        };
        candidate = match cfg.strategy {
            StrategyConfig::FedNova {} => fednova_aggregate(&slots[0], &results, &weights),
            _ => weighted_average(&trained, &weights),
        }
        .map_err(overflow)?;
        if scaffold {
            let deltas: Vec<ParamVector> =
                results.iter().map(|r| r.control_delta.clone().unwrap_or_else(|| zeros.clone())).collect();
            c_global = scaffold_server_update(&c_global, &deltas, participation).map_err(overflow)?;
            for (client, delta) in sampled.iter().zip(&deltas) {
                let updated = c_local.get(&client.client_id).unwrap_or(&zeros).add(delta).map_err(overflow)?;
                c_local.insert(client.client_id, updated);
            }
        }

        let drift = client_drift_variance(&trained, &weights)?;
        let test_accuracy = if t % cfg.eval_every.max(1) == 0 || t + 1 == cfg.rounds {
            Some(model::evaluate_accuracy(&candidate, &data.test)?)
        } else {
            None
        };
        if record_trajectory {
            trajectory.push(Snapshot { round: t, phase: Phase::End, models: trained.clone(), weights });
        }
        records.push(RoundRecord {
            round: t,
            action,
            test_accuracy,
            drift_variance: Some(drift),
            aggregations_so_far: aggregations,
            comm_rounds_so_far: t + 1,
            wall_time_ms: if cfg.record_wall_time { clock.elapsed().as_millis() as u64 } else { 0 },
        });
    }

    let final_accuracy = model::evaluate_accuracy(&candidate, &data.test)?;
    Ok(RunOutput {
        records,
        final_params: candidate,
        final_accuracy,
        max_grad_norm,
        max_local_steps,
        num_clients: n_clients,
        clients_per_round: k,
        trajectory,
    })
}

fn toy_local_config(cfg: &ExperimentConfig) -> LocalConfig {
    LocalConfig { epochs: 1, prox_mu: 0.0, ..cfg.effective_local() }
}

/// Independent training per client; returns the mean test accuracy.
///
/// Each client trains for `cfg.local.epochs` epochs as a sequence of one-epoch
/// calls, matching the per-stop granularity of [`run_cross_mode_on`].
pub fn run_local_mode_on(data: &FederatedData, cfg: &ExperimentConfig) -> Result<f64> {
    let one_epoch = toy_local_config(cfg);
    let initial = init_params(&data.spec, cfg.seed);
    let accuracies: Vec<f64> = data
        .clients
        .par_iter()
        .map(|client| {
            let mut w = initial.clone();
            for epoch in 0..cfg.local.epochs {
                w = train_local(&w, client, &one_epoch, epoch as u64, &Corrections::default())?.params;
            }
            model::evaluate_accuracy(&w, &data.test)
        })
        .collect::<Result<_>>()?;
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// One model carried across all clients, one epoch per stop, for the same
/// total epoch budget as [`run_local_mode_on`]; returns its test accuracy.
pub fn run_cross_mode_on(data: &FederatedData, cfg: &ExperimentConfig) -> Result<f64> {
    let one_epoch = toy_local_config(cfg);
    let mut w = init_params(&data.spec, cfg.seed);
    let mut order: Vec<&ClientDataset> = data.clients.iter().collect();
    for pass in 0..cfg.local.epochs {
        if cfg.cross_order == CrossOrder::Random {
            order.sort_by_key(|c| c.client_id);
            order.shuffle(&mut rng::stream(cfg.seed, &[rng::CROSS_ORDER, pass as u64]));
        }
        for client in &order {
            w = train_local(&w, client, &one_epoch, pass as u64, &Corrections::default())?.params;
        }
    }
    model::evaluate_accuracy(&w, &data.test)
}

pub fn run_local_mode(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.validate()?;
    run_local_mode_on(&prepare_data(cfg)?, cfg)
}

pub fn run_cross_mode(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.validate()?;
    run_cross_mode_on(&prepare_data(cfg)?, cfg)
}
