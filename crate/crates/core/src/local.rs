//! Client-side mini-batch SGD.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{self, Batch, Example};
use crate::params::ParamVector;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub prox_mu: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.01, batch_size: 64, momentum: 0.9, weight_decay: 1e-5, prox_mu: 0.0, seed: 0 }
    }
}

impl LocalConfig {
    /// Local steps one call performs on `n` examples.
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub params: ParamVector,
    /// `τ_k`, optimizer steps taken.
    pub steps_taken: usize,
    pub samples_seen: usize,
    /// SCAFFOLD control-variate change `c_k⁺ − c_k`, present when controls were supplied.
    pub control_delta: Option<ParamVector>,
    /// Largest raw mini-batch gradient norm observed.
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ControlVariates<'a> {
    pub global: &'a ParamVector,
    pub local: &'a ParamVector,
}

/// Optional corrections to the plain SGD gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct Corrections<'a> {
    /// Proximal anchor, required when `prox_mu > 0`.
    pub anchor: Option<&'a ParamVector>,
    pub controls: Option<ControlVariates<'a>>,
}

/// Random permutation of `examples` cut into consecutive chunks; the final
/// short chunk is kept.
pub fn make_batches<'a>(examples: &'a [Example], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Batch<'a>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<&Example> = examples.iter().collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|chunk| Batch::new(chunk.to_vec())).collect()
}

/// Runs `cfg.epochs` epochs of SGD on one client starting from `start`.
///
/// Per step the applied direction is
/// `grad + weight_decay·w + prox_mu·(w − anchor) + (c_global − c_k)`,
/// fed through a heavy-ball momentum buffer that starts at zero on every call.
/// The RNG is derived from `(cfg.seed, round, client_id)`.
pub fn train_local(
    start: &ParamVector,
    data: &ClientDataset,
    cfg: &LocalConfig,
    round: u64,
    corrections: &Corrections<'_>,
) -> Result<LocalResult> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("local training needs lr > 0 and batch_size >= 1".into()));
    }
    let prox = if cfg.prox_mu > 0.0 {
        let anchor = corrections.anchor.ok_or(Error::MissingAnchor)?;
        start.ensure_same_layout(anchor)?;
        Some((cfg.prox_mu, anchor.values()))
    } else {
        None
    };
    let correction: Option<Vec<f64>> = match corrections.controls {
        Some(c) => {
            start.ensure_same_layout(c.global)?;
            start.ensure_same_layout(c.local)?;
            Some(c.global.values().iter().zip(c.local.values()).map(|(g, l)| g - l).collect())
        }
        None => None,
    };

    let spec = *start.spec();
    let mut w = start.values().to_vec();
    let mut velocity = vec![0.0; w.len()];
    let mut rng = rng::stream(cfg.seed, &[rng::LOCAL, round, data.client_id as u64]);
    let mut steps = 0usize;
    let mut max_grad_norm = 0.0f64;
    let diverged = || Error::Divergence { round, client_id: data.client_id };

    for _ in 0..cfg.epochs {
        for batch in make_batches(&data.train, cfg.batch_size, &mut rng)? {
            let current = ParamVector::new(spec, w.clone()).map_err(|_| diverged())?;
            let (_, grad) = model::loss_and_gradient(&current, &batch)?;
            max_grad_norm = max_grad_norm.max(grad.norm());
            let mut g = grad.into_values();
            if cfg.weight_decay != 0.0 {
                for (gi, wi) in g.iter_mut().zip(&w) {
                    *gi += cfg.weight_decay * wi;
                }
            }
            if let Some((mu, anchor)) = prox {
                for ((gi, wi), ai) in g.iter_mut().zip(&w).zip(anchor) {
                    *gi += mu * (wi - ai);
                }
            }
            if let Some(corr) = &correction {
                for (gi, ci) in g.iter_mut().zip(corr) {
                    *gi += ci;
                }
            }
            for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= cfg.lr * *vi;
            }
            steps += 1;
        }
    }
    let params = ParamVector::new(spec, w).map_err(|_| diverged())?;

    let control_delta = match corrections.controls {
        Some(c) if steps > 0 => {
            // option II: c_k⁺ − c_k = (x − y_k)/(η·τ_k) − c
            let scale = 1.0 / (cfg.lr * steps as f64);
            let values = start
                .values()
                .iter()
                .zip(params.values())
                .zip(c.global.values())
                .map(|((x, y), cg)| (x - y) * scale - cg)
                .collect();
            Some(ParamVector::new(spec, values).map_err(|_| diverged())?)
        }
        Some(_) => Some(ParamVector::zeros(spec)),
        None => None,
    };

    Ok(LocalResult {
        params,
        steps_taken: steps,
        samples_seen: cfg.epochs * data.n_samples(),
        control_delta,
        max_grad_norm,
    })
}
