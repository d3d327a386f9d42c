use fedskip_core::io::records_to_jsonl;
use fedskip_core::orchestrator::{self, prepare_data, sample_clients, Phase};
use fedskip_core::server::is_skip_round;
use fedskip_core::{
    rng, Action, ClientDataset, DatasetSpec, Example, ExperimentConfig, RunOptions, SkipSchedule, StrategyConfig,
};

fn small(strategy: StrategyConfig, seed: u64) -> ExperimentConfig {
    let mut cfg =
        ExperimentConfig::new(DatasetSpec::Blobs { num_classes: 4, input_dim: 6, n_total: 1000, class_sep: 3.0 });
    cfg.partition.num_clients = 8;
    cfg.min_client_samples = 16;
    cfg.rounds = 25;
    cfg.local.epochs = 1;
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg
}

fn trajectory_run(cfg: &ExperimentConfig) -> orchestrator::RunOutput {
    orchestrator::run_federated(cfg, &RunOptions { threads: None, record_trajectory: true }).unwrap()
}

#[test]
fn records_follow_the_schedule() {
    for delta in [1, 2, 3, 5] {
        let mut cfg = small(StrategyConfig::FedSkip { delta }, 3);
        cfg.sample_fraction = 0.5;
        let out = trajectory_run(&cfg);
        let schedule = SkipSchedule::new(delta, cfg.rounds).unwrap();
        let mut aggregations = 0;
        for (t, r) in out.records.iter().enumerate() {
            assert_eq!(r.round, t);
            assert_eq!(r.action == Action::Skip, is_skip_round(t, &schedule));
            assert_eq!(r.action == Action::Init, t == 0);
            if r.action != Action::Skip {
                aggregations += 1;
            }
            assert_eq!(r.aggregations_so_far, aggregations);
            assert_eq!(r.comm_rounds_so_far, t + 1);
        }
        assert_eq!(aggregations, schedule.broadcast_count());
    }
}

#[test]
fn skip_rounds_move_models_without_changing_them() {
    let mut cfg = small(StrategyConfig::FedSkip { delta: 4 }, 5);
    cfg.sample_fraction = 0.5;
    let out = trajectory_run(&cfg);
    let schedule = SkipSchedule::new(4, cfg.rounds).unwrap();
    let key = |m: &fedskip_core::ParamVector| m.values().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut checked = 0;
    for t in 1..cfg.rounds {
        if !is_skip_round(t, &schedule) {
            continue;
        }
        let previous_end = out.trajectory.iter().find(|s| s.round == t - 1 && s.phase == Phase::End).unwrap();
        let start = out.trajectory.iter().find(|s| s.round == t && s.phase == Phase::Start).unwrap();
        let mut a: Vec<_> = previous_end.models.iter().map(key).collect();
        let mut b: Vec<_> = start.models.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "round {t}");
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn runs_are_reproducible_and_thread_independent() {
    for strategy in [
        StrategyConfig::FedAvg {},
        StrategyConfig::FedSkip { delta: 3 },
        StrategyConfig::FedProx { mu: 0.01 },
        StrategyConfig::Scaffold {},
        StrategyConfig::FedNova {},
    ] {
        let mut cfg = small(strategy, 8);
        cfg.sample_fraction = 0.5;
        let data = prepare_data(&cfg).unwrap();
        let outputs: Vec<_> = [Some(1), Some(4), None]
            .into_iter()
            .map(|threads| {
                let out =
                    orchestrator::run_federated_on(&data, &cfg, &RunOptions { threads, record_trajectory: false })
                        .unwrap();
                (records_to_jsonl(&out.records).unwrap(), out.final_params)
            })
            .collect();
        assert!(outputs.windows(2).all(|w| w[0] == w[1]), "{}", strategy.label());
    }
}

#[test]
fn unit_skip_period_matches_fedavg_for_many_seeds() {
    for seed in 0..6 {
        let mut a = small(StrategyConfig::FedAvg {}, seed);
        a.sample_fraction = 0.5;
        let b = ExperimentConfig { strategy: StrategyConfig::FedSkip { delta: 1 }, ..a.clone() };
        let (x, y) = (trajectory_run(&a), trajectory_run(&b));
        assert_eq!(records_to_jsonl(&x.records).unwrap(), records_to_jsonl(&y.records).unwrap());
        assert_eq!(x.final_params, y.final_params);
    }
}

#[test]
fn single_client_skip_chain_is_sequential_training() {
    // With one client every round trains the same model further, whatever the schedule.
    let mut cfg = small(StrategyConfig::FedSkip { delta: 5 }, 2);
    cfg.partition.num_clients = 1;
    cfg.rounds = 12;
    let skip = trajectory_run(&cfg);
    let avg = trajectory_run(&ExperimentConfig { strategy: StrategyConfig::FedAvg {}, ..cfg });
    assert_eq!(skip.final_params, avg.final_params);
}

#[test]
fn sampling_picks_distinct_clients() {
    let clients: Vec<ClientDataset> =
        (0..100).map(|i| ClientDataset::new(i, vec![Example::new(vec![0.0], 0)])).collect();
    for round in 0..20u64 {
        let picked = sample_clients(&clients, 0.2, &mut rng::stream(1, &[rng::SAMPLE_CLIENTS, round]));
        let mut ids: Vec<usize> = picked.iter().map(|c| c.client_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }
}

#[test]
fn local_training_matches_cross_training_on_iid_data() {
    // 200 examples per client need a low-dimensional problem for local fits to match the pooled one.
    let mut cfg =
        ExperimentConfig::new(DatasetSpec::Blobs { num_classes: 5, input_dim: 5, n_total: 2500, class_sep: 3.0 });
    cfg.partition.beta = f64::INFINITY;
    cfg.local.epochs = 100;
    let data = prepare_data(&cfg).unwrap();
    let local = orchestrator::run_local_mode_on(&data, &cfg).unwrap();
    let cross = orchestrator::run_cross_mode_on(&data, &cfg).unwrap();
    assert!((cross - local).abs() <= 0.05, "local {local} cross {cross}");

    cfg.partition.beta = 0.5;
    cfg.local.epochs = 10;
    let data = prepare_data(&cfg).unwrap();
    let local = orchestrator::run_local_mode_on(&data, &cfg).unwrap();
    let cross = orchestrator::run_cross_mode_on(&data, &cfg).unwrap();
    assert!(cross >= local + 0.05, "local {local} cross {cross}");
}

#[test]
fn divergence_propagates_with_location() {
    let mut cfg = small(StrategyConfig::FedAvg {}, 1);
    cfg.local.lr = 1e300;
    let err = orchestrator::run_federated(&cfg, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, fedskip_core::Error::Divergence { round: 0, .. }), "{err}");
}
