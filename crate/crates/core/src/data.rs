//! Dataset generation, heterogeneity partitioning and TSV dataset files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng;

/// Redraws allowed before a Dirichlet partition gives up on empty clients.
pub const MAX_PARTITION_DRAWS: usize = 100;

/// Minimum client size used throughout (one full mini-batch).
pub const DEFAULT_MIN_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Example>,
}

impl ClientDataset {
    pub fn new(client_id: usize, train: Vec<Example>) -> Self {
        Self { client_id, train }
    }

    /// `N_k`, the number of local training examples.
    pub fn n_samples(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    /// Dirichlet concentration; `f64::INFINITY` is the IID round-robin split.
    pub beta: f64,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_clients: usize,
    pub num_classes: usize,
    pub num_features: usize,
    /// Variance of the per-client model center `u_k`.
    pub alpha: f64,
    /// Variance of the per-client feature-center offset `B_k`.
    pub beta_gen: f64,
    pub size_mu: f64,
    pub size_sigma: f64,
    pub min_size: usize,
    /// Fraction of extra examples generated per client for the shared test set.
    pub test_fraction: f64,
    /// Share one labelling function and feature distribution across clients.
    pub iid_model: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_clients: 212,
            num_classes: 5,
            num_features: 60,
            alpha: 1.0,
            beta_gen: 1.0,
            size_mu: 4.0,
            size_sigma: 0.5,
            min_size: DEFAULT_MIN_SAMPLES,
            test_fraction: 0.25,
            iid_model: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub clients: Vec<ClientDataset>,
    pub test: Vec<Example>,
}

/// Gaussian class clusters with unit covariance and an 80/20 train/test split.
///
/// Class means sit on scaled coordinate axes, so any two means are exactly
/// `class_sep` apart. When there are more classes than dimensions the means
/// are random directions of the same norm instead.
pub fn generate_blobs(
    num_classes: usize,
    input_dim: usize,
    n_total: usize,
    class_sep: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if num_classes == 0 || input_dim == 0 {
        return Err(Error::InvalidArgument("blob dimensions must be positive".into()));
    }
    if n_total < 10 * num_classes {
        return Err(Error::InvalidArgument(format!(
            "n_total = {n_total} must be at least 10 per class ({})",
            10 * num_classes
        )));
    }
    let mut rng = rng::stream(seed, &[rng::BLOBS]);
    let radius = class_sep / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; input_dim];
            if num_classes <= input_dim {
                m[c] = radius;
            } else {
                let dir: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for (mi, di) in m.iter_mut().zip(dir) {
                    *mi = radius * di / norm;
                }
            }
            m
        })
        .collect();

    let mut examples: Vec<Example> = (0..n_total)
        .map(|i| {
            let label = i % num_classes;
            let features = means[label].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            Example::new(features, label)
        })
        .collect();
    examples.shuffle(&mut rng);
    let n_train = n_total * 4 / 5;
    let test = examples.split_off(n_train);
    Ok((examples, test))
}

fn normal(mean: f64, variance: f64) -> Normal<f64> {
    Normal::new(mean, variance.max(0.0).sqrt()).expect("finite normal parameters")
}

struct ClientGenerator {
    weights: Vec<f64>,
    bias: Vec<f64>,
    feature_mean: Vec<f64>,
}

impl ClientGenerator {
    fn draw(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Self {
        let (c, d) = (cfg.num_classes, cfg.num_features);
        let u = normal(0.0, cfg.alpha).sample(rng);
        let b_offset = normal(0.0, cfg.beta_gen).sample(rng);
        let around_u = normal(u, 1.0);
        let weights = (0..c * d).map(|_| around_u.sample(rng)).collect();
        let bias = (0..c).map(|_| around_u.sample(rng)).collect();
        let around_b = normal(b_offset, 1.0);
        let feature_mean = (0..d).map(|_| around_b.sample(rng)).collect();
        Self { weights, bias, feature_mean }
    }

    fn sample(&self, rng: &mut impl Rng) -> Example {
        let d = self.feature_mean.len();
        let features: Vec<f64> = self
            .feature_mean
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let std = ((j + 1) as f64).powf(-1.2).sqrt();
                m + std * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mut label = 0;
        let mut best = f64::NEG_INFINITY;
        for (k, b) in self.bias.iter().enumerate() {
            let score = b + self.weights[k * d..(k + 1) * d].iter().zip(&features).map(|(w, x)| w * x).sum::<f64>();
            if score > best {
                best = score;
                label = k;
            }
        }
        Example::new(features, label)
    }
}

/// LEAF-style synthetic federated data with per-client labelling functions.
pub fn generate_synthetic_leaf(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.num_clients == 0 || cfg.num_classes == 0 || cfg.num_features == 0 {
        return Err(Error::InvalidArgument("synthetic counts must be positive".into()));
    }
    if !(cfg.alpha >= 0.0 && cfg.beta_gen >= 0.0 && cfg.size_sigma >= 0.0 && cfg.test_fraction >= 0.0) {
        return Err(Error::InvalidArgument("synthetic variances must be non-negative".into()));
    }
    let shared = cfg.iid_model.then(|| ClientGenerator::draw(cfg, &mut rng::stream(cfg.seed, &[rng::SYNTHETIC])));
    let sizes = LogNormal::new(cfg.size_mu, cfg.size_sigma)
        .map_err(|e| Error::InvalidArgument(format!("log-normal sizes: {e}")))?;

    let mut clients = Vec::with_capacity(cfg.num_clients);
    let mut test = Vec::new();
    for k in 0..cfg.num_clients {
        let mut rng = rng::stream(cfg.seed, &[rng::SYNTHETIC, k as u64 + 1]);
        let own;
        let generator = match &shared {
            Some(g) => g,
            None => {
                own = ClientGenerator::draw(cfg, &mut rng);
                &own
            }
        };
        let n_train = sizes.sample(&mut rng).floor() as usize + cfg.min_size;
        let n_test = (n_train as f64 * cfg.test_fraction).ceil() as usize;
        let train = (0..n_train).map(|_| generator.sample(&mut rng)).collect();
        test.extend((0..n_test).map(|_| generator.sample(&mut rng)));
        clients.push(ClientDataset::new(k, train));
    }
    Ok(SyntheticData { clients, test })
}

fn dirichlet(beta: f64, k: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.iter().map(|g| g / total).collect())
}

/// Splits `train` across clients with per-label Dirichlet proportions.
///
/// Each label draws client proportions from `Dir(beta, ..., beta)` and sends
/// every example of that label to a client sampled from them. The whole
/// allocation is redrawn (up to [`MAX_PARTITION_DRAWS`] times) while any
/// client would end up empty. `beta = ∞` deals every label round-robin.
/// Within a client, examples keep their input order.
pub fn dirichlet_partition(train: &[Example], cfg: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.num_clients == 0 || cfg.beta.is_nan() || cfg.beta <= 0.0 {
        return Err(Error::InvalidArgument("partition needs beta > 0 and at least one client".into()));
    }
    let k = cfg.num_clients;
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in train.iter().enumerate() {
        by_label.entry(ex.label).or_default().push(i);
    }

    let mut owner = vec![0usize; train.len()];
    if cfg.beta.is_infinite() {
        let mut next = 0;
        for indices in by_label.values() {
            for &i in indices {
                owner[i] = next % k;
                next += 1;
            }
        }
    } else {
        let mut rng = rng::stream(cfg.seed, &[rng::PARTITION]);
        let mut done = false;
        for _ in 0..MAX_PARTITION_DRAWS {
            let mut counts = vec![0usize; k];
            let mut degenerate = false;
            for indices in by_label.values() {
                let Some(props) = dirichlet(cfg.beta, k, &mut rng) else {
                    degenerate = true;
                    break;
                };
                let pick = WeightedIndex::new(&props).expect("normalized proportions");
                for &i in indices {
                    let client = pick.sample(&mut rng);
                    owner[i] = client;
                    counts[client] += 1;
                }
            }
            if !degenerate && counts.iter().all(|&c| c > 0) {
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::RedrawBudgetExhausted { attempts: MAX_PARTITION_DRAWS });
        }
    }

    let mut clients: Vec<ClientDataset> = (0..k).map(|id| ClientDataset::new(id, Vec::new())).collect();
    for (ex, &o) in train.iter().zip(&owner) {
        clients[o].train.push(ex.clone());
    }
    Ok(clients)
}

/// Keeps clients with at least `minimum` examples, in order.
pub fn filter_min_samples(clients: Vec<ClientDataset>, minimum: usize) -> Result<Vec<ClientDataset>> {
    let kept: Vec<_> = clients.into_iter().filter(|c| c.n_samples() >= minimum).collect();
    if kept.is_empty() {
        return Err(Error::NoClientsLeft { minimum });
    }
    Ok(kept)
}

/// Per-class example counts for a client.
pub fn label_histogram(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut hist = vec![0; num_classes];
    for ex in examples {
        if ex.label < num_classes {
            hist[ex.label] += 1;
        }
    }
    hist
}

/// Shannon entropy (nats) of a client's label distribution.
pub fn label_entropy(examples: &[Example], num_classes: usize) -> f64 {
    let n = examples.len() as f64;
    label_histogram(examples, num_classes)
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Writes one example per line: comma-separated features, a tab, the label.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let features: Vec<String> = ex.features.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}\t{}", features.join(","), ex.label)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut examples = Vec::new();
    let mut width = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse { path: path.to_path_buf(), line: n + 1, message };
        let (features, label) = line.split_once('\t').ok_or_else(|| fail("missing tab before label".into()))?;
        let label = label.trim().parse::<usize>().map_err(|e| fail(format!("label: {e}")))?;
        let features = features
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fail(format!("feature: {e}")))?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature".into()));
        }
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(fail(format!("expected {w} features, found {}", features.len())))
            }
            _ => {}
        }
        examples.push(Example::new(features, label));
    }
    Ok(examples)
}

/// Writes `client_<id>.tsv` for every client plus `test.tsv`.
pub fn write_federated_dir(dir: &Path, clients: &[ClientDataset], test: &[Example]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for client in clients {
        write_examples(&dir.join(format!("client_{}.tsv", client.client_id)), &client.train)?;
    }
    write_examples(&dir.join("test.tsv"), test)
}

/// Reads a directory written by [`write_federated_dir`]; clients sorted by id.
pub fn read_federated_dir(dir: &Path) -> Result<(Vec<ClientDataset>, Vec<Example>)> {
    let mut clients = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(id) = name.strip_prefix("client_").and_then(|r| r.strip_suffix(".tsv")) {
            let id = id.parse::<usize>().map_err(|e| Error::Parse {
                path: path.clone(),
                line: 0,
                message: format!("client id: {e}"),
            })?;
            clients.push(ClientDataset::new(id, read_examples(&path)?));
        }
    }
    clients.sort_by_key(|c| c.client_id);
    let test = read_examples(&dir.join("test.tsv"))?;
    Ok((clients, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n_per_class: usize, classes: usize) -> Vec<Example> {
        (0..n_per_class * classes).map(|i| Example::new(vec![i as f64], i % classes)).collect()
    }

    #[test]
    fn blobs_are_deterministic_and_split() {
        let (train, test) = generate_blobs(3, 4, 100, 5.0, 1).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!((train.clone(), test.clone()), generate_blobs(3, 4, 100, 5.0, 1).unwrap());
        assert!(generate_blobs(3, 4, 29, 5.0, 1).is_err());
        // more classes than dimensions still works
        assert!(generate_blobs(6, 2, 120, 5.0, 1).is_ok());
    }

    #[test]
    fn iid_partition_is_uniform_per_client() {
        let data = balanced(50, 5);
        let cfg = PartitionConfig { beta: f64::INFINITY, num_clients: 10, seed: 0 };
        let clients = dirichlet_partition(&data, &cfg).unwrap();
        assert_eq!(clients.iter().map(|c| c.n_samples()).sum::<usize>(), 250);
        for c in &clients {
            let h = label_histogram(&c.train, 5);
            let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
            assert!(hi - lo <= 1, "{h:?}");
        }
    }

    #[test]
    fn dirichlet_partition_conserves_and_fills_clients() {
        let data = balanced(100, 5);
        let cfg = PartitionConfig { beta: 0.5, num_clients: 10, seed: 3 };
        let clients = dirichlet_partition(&data, &cfg).unwrap();
        assert_eq!(clients.len(), 10);
        assert!(clients.iter().all(|c| c.n_samples() > 0));
        let mut seen: Vec<f64> = clients.iter().flat_map(|c| c.train.iter().map(|e| e.features[0])).collect();
        seen.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (0..500).map(|i| i as f64).collect();
        assert_eq!(seen, expected);
        assert_eq!(clients, dirichlet_partition(&data, &cfg).unwrap());
    }

    #[test]
    fn impossible_partition_exhausts_budget() {
        // two examples can never cover five clients
        let data = balanced(1, 2);
        let cfg = PartitionConfig { beta: 0.5, num_clients: 5, seed: 0 };
        assert!(matches!(dirichlet_partition(&data, &cfg), Err(Error::RedrawBudgetExhausted { .. })));
    }

    #[test]
    fn filter_boundary_cases() {
        let make = |sizes: &[usize]| -> Vec<ClientDataset> {
            sizes.iter().enumerate().map(|(i, &n)| ClientDataset::new(i, balanced(n, 1))).collect()
        };
        let kept = filter_min_samples(make(&[63, 64, 100]), 64).unwrap();
        assert_eq!(kept.iter().map(|c| c.n_samples()).collect::<Vec<_>>(), vec![64, 100]);
        assert_eq!(kept[0].client_id, 1);
        let all = make(&[64, 70]);
        assert_eq!(filter_min_samples(all.clone(), 64).unwrap(), all);
        assert!(matches!(filter_min_samples(make(&[10, 63]), 64), Err(Error::NoClientsLeft { minimum: 64 })));
    }

    #[test]
    fn synthetic_default_respects_minimum() {
        let cfg = SyntheticConfig { num_clients: 212, ..Default::default() };
        let data = generate_synthetic_leaf(&cfg).unwrap();
        let kept = filter_min_samples(data.clients.clone(), 64).unwrap();
        assert!(kept.len() <= 212);
        assert!(kept.iter().all(|c| c.n_samples() >= 64));
        assert!(data.clients.iter().all(|c| c.train.iter().all(|e| e.label < 5 && e.features.len() == 60)));
        assert_eq!(data, generate_synthetic_leaf(&cfg).unwrap());
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clients = vec![
            ClientDataset::new(0, vec![Example::new(vec![0.1, -2.5e-7], 1)]),
            ClientDataset::new(3, vec![Example::new(vec![1.0 / 3.0, 4.0], 0)]),
        ];
        let test = vec![Example::new(vec![std::f64::consts::PI, 0.0], 2)];
        write_federated_dir(dir.path(), &clients, &test).unwrap();
        let text = std::fs::read_to_string(dir.path().join("client_0.tsv")).unwrap();
        assert_eq!(text, "0.1,-0.00000025\t1\n");
        let (c2, t2) = read_federated_dir(dir.path()).unwrap();
        assert_eq!(c2, clients);
        assert_eq!(t2, test);
    }

    #[test]
    fn tsv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "1,2\t0\n1,x\t1\n").unwrap();
        match read_examples(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
