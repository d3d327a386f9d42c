//! Deterministic federated-learning simulator.
//!
//! The crate implements periodic skip aggregation (FedSkip: shuffle-scatter of
//! client models on skip rounds, cumulative sample weights on aggregation
//! rounds) next to the FedAvg, FedProx, SCAFFOLD and FedNova baselines. Models
//! are small (softmax regression and a one-hidden-layer perceptron) with
//! hand-derived gradients, so every run is cheap and bit-reproducible for a
//! fixed seed.
//!
//! Module map:
//!
//! * [`model`] / [`params`]: model families, loss, gradients, accuracy.
//! * [`data`]: Gaussian blobs, LEAF-style synthetic clients, Dirichlet
//!   partitioning, TSV dataset files.
//! * [`local`]: client-side SGD with proximal and control-variate corrections.
//! * [`server`]: skip schedule, aggregation weights and server steps.
//! * [`orchestrator`]: the round loop plus the local/cross toy modes.
//! * [`metrics`]: drift variance, non-IID degree, divergence bound, efficiency.
//! * [`config`]: JSON experiment and sweep configuration.
//! * [`io`]: JSON-lines round records and CSV summaries.

pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod local;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod rng;
pub mod server;

pub use config::{parse_config, parse_config_str, ConfigDocument, SweepCell, SweepSpec};
pub use data::{ClientDataset, PartitionConfig, SyntheticConfig};
pub use error::{Error, Result};
pub use local::{train_local, ControlVariates, Corrections, LocalConfig, LocalResult};
pub use metrics::{BoundReport, EfficiencySummary, SummaryRow};
pub use model::{Activation, Batch, Example, ModelFamily, ModelSpec};
pub use orchestrator::{Action, DatasetSpec, ExperimentConfig, FederatedData, RoundRecord, RunOptions, RunOutput};
pub use params::ParamVector;
pub use server::{SampleLedger, SkipSchedule, StrategyConfig};
