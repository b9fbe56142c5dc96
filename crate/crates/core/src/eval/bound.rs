//! Empirical check of the retrieval error bound
//! `‖π_src(·|q) − π_knn(·|q)‖₁ ≤ L·r_eff + V·√(ln(2V/δ) / (2·k_eff))`
//! against a synthetic source `π_src(·|h) = softmax(W h + b)`.
//!
//! For that source `L = max_{u,v} ‖w_u − w_v‖₂` is a valid Lipschitz constant
//! from L2 on embeddings to L1 on distributions: the softmax Jacobian maps a
//! logit perturbation `z` to `Σ_v p_v |z_v − p·z| ≤ max z − min z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{effective_stats, knn_distribution, retrieval_weights};
use crate::error::{Error, Result};
use crate::index::{IndexMode, VectorIndex};
use crate::prob::ProbDist;
use crate::provider::sample_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub n_entries: usize,
    pub n_queries: usize,
    pub delta: f64,
    pub k: usize,
    pub tau: f64,
    /// Standard deviation of the entries of `W` and `b`.
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            vocab_size: 6,
            n_entries: 5000,
            n_queries: 1000,
            delta: 0.1,
            k: 256,
            tau: 1.0,
            weight_scale: 1.0,
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vocab_size < 2 || self.n_queries == 0 {
            return Err(Error::Config(
                "dim ≥ 1, vocab_size ≥ 2 and n_queries ≥ 1 required".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.k == 0 || self.k > self.n_entries {
            return Err(Error::Config(format!(
                "need 1 ≤ k ≤ n_entries, got k = {}",
                self.k
            )));
        }
        if !(self.tau > 0.0 && self.weight_scale > 0.0) {
            return Err(Error::Config(
                "tau and weight_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Affine-softmax source with its certified Lipschitz constant.
#[derive(Debug, Clone)]
pub struct SoftmaxSource {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    lipschitz: f64,
}

impl SoftmaxSource {
    pub fn random(rng: &mut ChaCha8Rng, vocab_size: usize, dim: usize, scale: f64) -> Self {
        let mut gauss = || -> f64 { scale * Distribution::<f64>::sample(&StandardNormal, rng) };
        let w: Vec<Vec<f64>> = (0..vocab_size)
            .map(|_| (0..dim).map(|_| gauss()).collect())
            .collect();
        let b = (0..vocab_size).map(|_| gauss()).collect();
        Self::new(w, b)
    }

    pub fn new(w: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let mut lipschitz: f64 = 0.0;
        for u in &w {
            for v in &w {
                let d = u
                    .iter()
                    .zip(v)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                lipschitz = lipschitz.max(d);
            }
        }
        Self { w, b, lipschitz }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn dist(&self, h: &[f32]) -> ProbDist {
        let logits: Vec<f64> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(row, &b)| {
                b + row
                    .iter()
                    .zip(h)
                    .map(|(w, &x)| w * f64::from(x))
                    .sum::<f64>()
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        ProbDist::Dense(e.into_iter().map(|x| x / z).collect())
    }
}

/// Per-query outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSample {
    pub l1: f64,
    pub k_eff: f64,
    pub r_eff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSamples {
    pub certified_l: f64,
    pub vocab_size: usize,
    pub samples: Vec<BoundSample>,
}

impl BoundSamples {
    /// Right-hand side of the bound for one query.
    pub fn bound(&self, s: &BoundSample, delta: f64, l_scale: f64) -> f64 {
        let v = self.vocab_size as f64;
        l_scale * self.certified_l * s.r_eff + v * ((2.0 * v / delta).ln() / (2.0 * s.k_eff)).sqrt()
    }

    /// Fraction of queries whose error exceeds the bound with `L` multiplied
    /// by `l_scale`.
    pub fn violation_rate(&self, delta: f64, l_scale: f64) -> f64 {
        let bad = self
            .samples
            .iter()
            .filter(|s| s.l1 > self.bound(s, delta, l_scale))
            .count();
        bad as f64 / self.samples.len() as f64
    }

    pub fn mean_l1(&self) -> f64 {
        self.samples.iter().map(|s| s.l1).sum::<f64>() / self.samples.len() as f64
    }

    pub fn report(&self, delta: f64) -> BoundReport {
        let n = self.samples.len() as f64;
        BoundReport {
            certified_l: self.certified_l,
            delta,
            queries: self.samples.len(),
            violation_rate: self.violation_rate(delta, 1.0),
            mean_l1: self.mean_l1(),
            mean_bound: self
                .samples
                .iter()
                .map(|s| self.bound(s, delta, 1.0))
                .sum::<f64>()
                / n,
            mean_k_eff: self.samples.iter().map(|s| s.k_eff).sum::<f64>() / n,
            mean_r_eff: self.samples.iter().map(|s| s.r_eff).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub certified_l: f64,
    pub delta: f64,
    pub queries: usize,
    pub violation_rate: f64,
    pub mean_l1: f64,
    pub mean_bound: f64,
    pub mean_k_eff: f64,
    pub mean_r_eff: f64,
}

/// Samples keys uniformly in `[-1, 1]^d`, draws each stored token from the
/// source at its key, and measures the retrieval error at fresh queries.
pub fn run_bound_experiment(cfg: &BoundConfig) -> Result<BoundSamples> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = SoftmaxSource::random(&mut rng, cfg.vocab_size, cfg.dim, cfg.weight_scale);
    let point = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..cfg.dim)
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect()
    };
    let mut keys = Vec::with_capacity(cfg.n_entries * cfg.dim);
    let mut values = Vec::with_capacity(cfg.n_entries);
    for _ in 0..cfg.n_entries {
        let h = point(&mut rng);
        values.push(sample_from(&source.dist(&h), &mut rng, None));
        keys.extend(h);
    }
    let index = VectorIndex::build(keys, values, cfg.dim, IndexMode::Exact)?;
    let queries: Vec<Vec<f32>> = (0..cfg.n_queries).map(|_| point(&mut rng)).collect();
    let samples = queries
        .par_iter()
        .map(|q| -> Result<BoundSample> {
            let nbrs = index.search(q, cfg.k)?;
            let w = retrieval_weights(&nbrs, cfg.tau);
            let (k_eff, r_eff) = effective_stats(&w, &nbrs.distances);
            let knn = knn_distribution(&nbrs, &w, cfg.vocab_size).to_dense();
            let src = source.dist(q).to_dense();
            let l1 = src.iter().zip(&knn).map(|(a, b)| (a - b).abs()).sum();
            Ok(BoundSample { l1, k_eff, r_eff })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundSamples {
        certified_l: source.lipschitz(),
        vocab_size: cfg.vocab_size,
        samples,
    })
}

/// Violation report at `cfg.delta`.
pub fn validate_bound(cfg: &BoundConfig) -> Result<BoundReport> {
    Ok(run_bound_experiment(cfg)?.report(cfg.delta))
}
