use fedskip_core::data::{dirichlet_partition, generate_blobs};
use fedskip_core::metrics::{client_drift_variance, divergence_bound_check, estimate_gamma, GammaBudget};
use fedskip_core::orchestrator;
use fedskip_core::server::fedavg_weights;
use fedskip_core::{
    ClientDataset, DatasetSpec, ExperimentConfig, ModelSpec, ParamVector, PartitionConfig, RunOptions, StrategyConfig,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn drift_matches_double_loop(
        (models, raw) in (1..6usize, 2..6usize).prop_flat_map(|(k, n)| (
            prop::collection::vec(prop::collection::vec(-4.0..4.0f64, n), k),
            prop::collection::vec(0.05..1.0f64, k),
        ))
    ) {
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut brute = 0.0;
        for (k, wk) in models.iter().enumerate() {
            for (i, wki) in wk.iter().enumerate() {
                let mean: f64 = models.iter().zip(&p).map(|(wj, pj)| pj * wj[i]).sum();
                brute += p[k] * (wki - mean).powi(2);
            }
        }
        let spec = ModelSpec::linear(models[0].len() - 1, 1);
        let pvs: Vec<ParamVector> = models.into_iter().map(|m| ParamVector::new(spec, m).unwrap()).collect();
        let drift = client_drift_variance(&pvs, &p).unwrap();
        prop_assert!((drift - brute).abs() <= 1e-10, "{drift} vs {brute}");
    }
}

fn split(beta: f64) -> Vec<ClientDataset> {
    let (train, _) = generate_blobs(4, 3, 1000, 1.5, 6).unwrap();
    dirichlet_partition(&train, &PartitionConfig { beta, num_clients: 5, seed: 6 }).unwrap()
}

fn gamma(clients: &[ClientDataset], budget: GammaBudget) -> f64 {
    let refs: Vec<&ClientDataset> = clients.iter().collect();
    let weights = fedavg_weights(&refs).unwrap();
    estimate_gamma(clients, &weights, &ModelSpec::linear(3, 4), budget).unwrap().gamma
}

#[test]
fn gamma_separates_iid_from_skewed_splits() {
    let iid = gamma(&split(f64::INFINITY), GammaBudget::default());
    let skewed = gamma(&split(0.1), GammaBudget::default());
    assert!(iid < 0.05, "iid gamma {iid}");
    assert!(skewed > iid, "skewed {skewed} iid {iid}");
}

#[test]
fn gamma_is_stable_under_a_larger_budget() {
    let clients = split(0.5);
    let base = GammaBudget::default();
    let g1 = gamma(&clients, base);
    let g2 = gamma(&clients, GammaBudget { max_iters: base.max_iters * 2, ..base });
    assert!((g2 - g1).abs() < 0.1 * g1.abs().max(1e-12), "{g1} vs {g2}");
}

#[test]
fn divergence_stays_below_bound_on_a_convex_run() {
    let mut cfg =
        ExperimentConfig::new(DatasetSpec::Blobs { num_classes: 4, input_dim: 6, n_total: 1200, class_sep: 3.0 });
    cfg.partition.num_clients = 6;
    cfg.rounds = 40;
    cfg.local.epochs = 2;
    cfg.strategy = StrategyConfig::FedSkip { delta: 5 };
    let out = orchestrator::run_federated(&cfg, &RunOptions { threads: None, record_trajectory: true }).unwrap();
    let report =
        divergence_bound_check(&out.trajectory, 5, cfg.local.lr, out.max_local_steps, out.max_grad_norm).unwrap();
    assert_eq!(report.points.len(), 2 * cfg.rounds);
    assert!(report.holds(), "min margin {:?}", report.min_margin());
}
