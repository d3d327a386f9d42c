use fedskip_core::data::{
    dirichlet_partition, filter_min_samples, generate_blobs, generate_synthetic_leaf, label_entropy, label_histogram,
};
use fedskip_core::metrics::minimize_weighted_loss;
use fedskip_core::metrics::GammaBudget;
use fedskip_core::model::evaluate_accuracy;
use fedskip_core::{Example, ModelSpec, PartitionConfig, SyntheticConfig};
use proptest::prelude::*;

fn sorted_keys(examples: impl Iterator<Item = Example>) -> Vec<(Vec<u64>, usize)> {
    let mut keys: Vec<_> = examples.map(|e| (e.features.iter().map(|f| f.to_bits()).collect(), e.label)).collect();
    keys.sort();
    keys
}

fn mean_client_entropy(beta: f64, seed: u64) -> f64 {
    let (train, _) = generate_blobs(5, 4, 1250, 3.0, seed).unwrap();
    let clients = dirichlet_partition(&train, &PartitionConfig { beta, num_clients: 10, seed }).unwrap();
    clients.iter().map(|c| label_entropy(&c.train, 5)).sum::<f64>() / clients.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partition_conserves_examples(
        seed in any::<u64>(),
        num_clients in 1..12usize,
        beta in prop_oneof![Just(f64::INFINITY), 0.05..5.0f64],
    ) {
        let (train, _) = generate_blobs(4, 3, 600, 2.0, seed).unwrap();
        let clients = dirichlet_partition(&train, &PartitionConfig { beta, num_clients, seed }).unwrap();
        prop_assert_eq!(clients.len(), num_clients);
        prop_assert!(clients.iter().all(|c| c.n_samples() > 0));
        for (i, c) in clients.iter().enumerate() {
            prop_assert_eq!(c.client_id, i);
        }
        let parts = sorted_keys(clients.into_iter().flat_map(|c| c.train));
        prop_assert_eq!(parts, sorted_keys(train.into_iter()));
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>()) {
        prop_assert_eq!(generate_blobs(3, 2, 100, 1.0, seed).unwrap(), generate_blobs(3, 2, 100, 1.0, seed).unwrap());
        let cfg = SyntheticConfig { num_clients: 5, seed, ..SyntheticConfig::default() };
        let (a, b) = (generate_synthetic_leaf(&cfg).unwrap(), generate_synthetic_leaf(&cfg).unwrap());
        prop_assert_eq!(a.test, b.test);
        prop_assert_eq!(a.clients, b.clients);
    }
}

#[test]
fn heterogeneity_lowers_label_entropy() {
    let averaged = |beta: f64| (0..20).map(|s| mean_client_entropy(beta, s)).sum::<f64>() / 20.0;
    let (low, mid, iid) = (averaged(0.1), averaged(1.0), averaged(f64::INFINITY));
    assert!(low < mid && mid < iid, "{low} {mid} {iid}");
}

#[test]
fn moderate_beta_skews_labels() {
    let (train, _) = generate_blobs(5, 4, 2500, 3.0, 9).unwrap();
    let clients = dirichlet_partition(&train, &PartitionConfig { beta: 0.5, num_clients: 10, seed: 9 }).unwrap();
    let hists: Vec<Vec<usize>> = clients.iter().map(|c| label_histogram(&c.train, 5)).collect();
    let mean_max_share = (0..5)
        .map(|label| {
            let total: usize = hists.iter().map(|h| h[label]).sum();
            hists.iter().map(|h| h[label]).max().unwrap() as f64 / total as f64
        })
        .sum::<f64>()
        / 5.0;
    assert!(mean_max_share > 0.25, "{mean_max_share}");
}

#[test]
fn well_separated_blobs_are_learnable() {
    for seed in [0, 1, 2] {
        let (train, test) = generate_blobs(5, 20, 2500, 20.0, seed).unwrap();
        let spec = ModelSpec::linear(20, 5);
        let fit = minimize_weighted_loss(&spec, &[&train], &[1.0], GammaBudget::default()).unwrap();
        let acc = evaluate_accuracy(&fit.params, &test).unwrap();
        assert!(acc > 0.95, "seed {seed}: {acc}");
    }
}

#[test]
fn shared_labelling_function_fits_every_client_alike() {
    let cfg = SyntheticConfig {
        num_clients: 30,
        alpha: 0.0,
        beta_gen: 0.0,
        iid_model: true,
        seed: 5,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic_leaf(&cfg).unwrap();
    let pooled: Vec<Example> = data.clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let spec = ModelSpec::linear(cfg.num_features, cfg.num_classes);
    let fit = minimize_weighted_loss(&spec, &[&pooled], &[1.0], GammaBudget::default()).unwrap();
    let accs: Vec<f64> = data.clients.iter().map(|c| evaluate_accuracy(&fit.params, &c.train).unwrap()).collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.05, "per-client accuracies {accs:?}");
}

#[test]
fn default_synthetic_respects_minimum_size() {
    let data = generate_synthetic_leaf(&SyntheticConfig { seed: 3, ..SyntheticConfig::default() }).unwrap();
    let clients = filter_min_samples(data.clients, 64).unwrap();
    assert!(clients.len() <= 212);
    assert!(clients.iter().all(|c| c.n_samples() >= 64));
}
