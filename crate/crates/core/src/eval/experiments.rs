//! End-to-end synthetic experiments shared by the command line and the
//! acceptance suite.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, confusion};
use super::synth::{multi_source, render, synth_benchmark, SynthBenchConfig};
use super::{
    attribute, inject_outliers, score_texts, summarize, DetectionSummary, EvalSettings, Expert,
    TextScores,
};
use crate::align::{LambdaMode, RetrievalParams, DEFAULT_TAU_GRID};
use crate::datastore::{build_datastore, BuildConfig, Datastore};
use crate::detect::{clip_and_mean, DEFAULT_EPS, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::hash::mix64;
use crate::router::{build_routing_store, route, NgramEmbedder};

/// Neighbor-count grid sized for desk-scale datastores.
pub const SYNTH_K_GRID: [usize; 5] = [8, 16, 32, 64, 128];

/// Retrieval and scoring settings used by the synthetic experiments.
pub fn synth_settings() -> EvalSettings {
    EvalSettings {
        retrieval: RetrievalParams::adaptive(SYNTH_K_GRID.to_vec(), DEFAULT_TAU_GRID.to_vec()),
        lambda: LambdaMode::Adaptive,
        gamma: Some(DEFAULT_GAMMA),
        eps: DEFAULT_EPS,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRun {
    pub summary: DetectionSummary,
    pub scores: Vec<TextScores>,
    pub labels: Vec<bool>,
    pub datastore_entries: usize,
}

/// Builds the benchmark world, a datastore of source outputs encoded by the
/// proxy, and scores every text with and without alignment.
pub fn detection_run(
    cfg: &SynthBenchConfig,
    build: &BuildConfig,
    settings: &EvalSettings,
) -> Result<DetectionRun> {
    let bench = synth_benchmark(cfg)?;
    let ds = build_datastore(&bench.proxy, &bench.datastore_corpus, build)?;
    let (texts, labels) = bench.labeled_texts();
    let scores = score_texts(&bench.proxy, &ds, &texts, settings)?;
    Ok(DetectionRun {
        summary: summarize(&scores, &labels)?,
        scores,
        labels,
        datastore_entries: ds.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub max_entries: usize,
    pub entries: usize,
    pub summary: DetectionSummary,
}

/// Detection AUROC as the datastore grows. Every size is a seeded reservoir
/// subsample of the same source corpus, which must hold at least the largest
/// size in windows.
pub fn corpus_size_sweep(
    cfg: &SynthBenchConfig,
    build: &BuildConfig,
    settings: &EvalSettings,
    sizes: &[usize],
) -> Result<Vec<SizePoint>> {
    let bench = synth_benchmark(cfg)?;
    let (texts, labels) = bench.labeled_texts();
    sizes
        .iter()
        .map(|&n| {
            let ds = build_datastore(
                &bench.proxy,
                &bench.datastore_corpus,
                &BuildConfig {
                    max_entries: Some(n),
                    ..build.clone()
                },
            )?;
            let scores = score_texts(&bench.proxy, &ds, &texts, settings)?;
            Ok(SizePoint {
                max_entries: n,
                entries: ds.len(),
                summary: summarize(&scores, &labels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClippingOutcome {
    pub rate: f64,
    pub floor: f64,
    pub gamma: f64,
    pub clipped_auroc: f64,
    pub unclipped_auroc: f64,
}

/// Corrupts a `rate` fraction of aligned per-token log-likelihoods to values
/// at or below `floor` and compares the clipped and plain mean scores.
pub fn clipping_run(
    run: &DetectionRun,
    rate: f64,
    floor: f64,
    gamma: f64,
    seed: u64,
) -> Result<ClippingOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corrupted: Vec<_> = run
        .scores
        .iter()
        .map(|s| inject_outliers(&s.aligned_ll, rate, floor, &mut rng))
        .collect();
    let clipped: Vec<f64> = corrupted
        .iter()
        .map(|ll| clip_and_mean(ll, Some(gamma)))
        .collect();
    let plain: Vec<f64> = corrupted.iter().map(|ll| clip_and_mean(ll, None)).collect();
    Ok(ClippingOutcome {
        rate,
        floor,
        gamma,
        clipped_auroc: auroc(&clipped, &run.labels)?,
        unclipped_auroc: auroc(&plain, &run.labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    /// Row-normalized; `confusion[true][predicted]`.
    pub confusion: Vec<Vec<f64>>,
    pub predictions: Vec<(usize, usize)>,
}

fn class_index(classes: &[String], name: &str) -> usize {
    classes.iter().position(|c| c == name).unwrap_or(0)
}

fn report(classes: Vec<String>, predictions: Vec<(usize, usize)>) -> ClassificationReport {
    let truth: Vec<usize> = predictions.iter().map(|p| p.0).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.1).collect();
    let hits = predictions.iter().filter(|(t, p)| t == p).count();
    ClassificationReport {
        confusion: confusion(&truth, &pred, classes.len()),
        accuracy: hits as f64 / predictions.len().max(1) as f64,
        classes,
        predictions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingExperiment {
    pub domains: usize,
    /// Labeled sentences per domain in the routing store.
    pub store_sentences: usize,
    /// Routed texts in total, split evenly across domains.
    pub routed_texts: usize,
    pub text_len: usize,
    pub k_r: usize,
}

impl Default for RoutingExperiment {
    fn default() -> Self {
        Self {
            domains: 4,
            store_sentences: 100,
            routed_texts: 2000,
            text_len: 40,
            k_r: crate::router::DEFAULT_K_R,
        }
    }
}

/// Routes held-out texts of known domain with a hashed n-gram embedder.
pub fn routing_run(
    cfg: &SynthBenchConfig,
    exp: &RoutingExperiment,
) -> Result<ClassificationReport> {
    if exp.domains < 2 || exp.routed_texts < exp.domains {
        return Err(Error::Config(
            "routing needs ≥ 2 domains and ≥ 1 text per domain".into(),
        ));
    }
    let world = multi_source(cfg, exp.domains)?;
    let vocab = world.proxy.vocab();
    let embedder = NgramEmbedder::default();
    let mut sentences = Vec::new();
    for m in 0..exp.domains {
        for t in world.sample_texts(
            m,
            exp.store_sentences,
            exp.text_len,
            mix64(cfg.seed ^ 0x5107e),
        )? {
            sentences.push((world.names[m].clone(), embedder.embed(&render(vocab, &t))));
        }
    }
    let store = build_routing_store(&world.names, &sentences)?;
    let per = exp.routed_texts / exp.domains;
    let mut queries = Vec::new();
    for m in 0..exp.domains {
        let truth = class_index(store.experts(), &world.names[m]);
        for t in world.sample_texts(m, per, exp.text_len, mix64(cfg.seed ^ 0x9e51d))? {
            queries.push((truth, t));
        }
    }
    let predictions = queries
        .par_iter()
        .map(|(m, t)| {
            Ok((
                *m,
                route(&store, &embedder.embed(&render(vocab, t)), exp.k_r)?.expert,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(store.experts().to_vec(), predictions))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionExperiment {
    pub sources: usize,
    pub texts_per_source: usize,
    pub text_len: usize,
    /// Documents each source contributes to its own datastore.
    pub datastore_docs: usize,
    pub datastore_doc_len: usize,
}

impl Default for AttributionExperiment {
    fn default() -> Self {
        Self {
            sources: 4,
            texts_per_source: 200,
            text_len: 40,
            datastore_docs: 100,
            datastore_doc_len: 100,
        }
    }
}

/// Closed-set attribution over toy source models sharing one proxy, each
/// with a datastore of its own outputs.
pub fn attribution_run(
    cfg: &SynthBenchConfig,
    exp: &AttributionExperiment,
    build: &BuildConfig,
    settings: &EvalSettings,
) -> Result<ClassificationReport> {
    if exp.sources < 2 {
        return Err(Error::Config(
            "attribution needs at least two sources".into(),
        ));
    }
    let world = multi_source(cfg, exp.sources)?;
    let stores: Vec<Datastore> = (0..exp.sources)
        .map(|m| {
            let docs = world.sample_texts(
                m,
                exp.datastore_docs,
                exp.datastore_doc_len,
                mix64(cfg.seed ^ 0xda7a),
            )?;
            build_datastore(&world.proxy, &docs, build)
        })
        .collect::<Result<_>>()?;
    let experts: BTreeMap<String, Expert> = world
        .names
        .iter()
        .zip(&stores)
        .map(|(n, ds)| {
            (
                n.clone(),
                Expert {
                    provider: &world.proxy,
                    datastore: ds,
                },
            )
        })
        .collect();
    let names: Vec<String> = experts.keys().cloned().collect();
    let mut queries = Vec::new();
    for m in 0..exp.sources {
        let truth = class_index(&names, &world.names[m]);
        for t in world.sample_texts(
            m,
            exp.texts_per_source,
            exp.text_len,
            mix64(cfg.seed ^ 0xa77),
        )? {
            queries.push((truth, t));
        }
    }
    let predictions = queries
        .par_iter()
        .map(|(m, t)| {
            let a = attribute(
                t,
                &experts,
                &settings.retrieval,
                settings.lambda,
                settings.gamma,
                settings.eps,
            )?;
            Ok((*m, class_index(&names, &a.predicted)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(names, predictions))
}
