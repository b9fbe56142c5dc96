//! Desk-scale synthetic worlds with known generators.
//!
//! A "register" is a random sparse second-order Markov chain over a synthetic
//! vocabulary. Toy n-gram models trained on samples of a register stand in for
//! source, human and proxy language models; the proxy is deliberately weaker
//! and trained on a blend of registers so that it is misaligned with the
//! source.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{hash_tokens, mix64};
use crate::prob::{ProbDist, TokenSequence, Vocabulary};
use crate::provider::{sample_from, ToyLm, ToyLmConfig};

/// Id of the begin-of-sequence token in synthetic vocabularies.
pub const SYNTH_BOS: u32 = 0;

/// Random sparse second-order chain. Each two-token context owns `support`
/// successors with Dirichlet(`concentration`) weights, derived on demand from
/// a hash of the context so the chain never has to be tabulated.
///
/// A chain with a `parent` copies the parent's row for each context except a
/// `divergence` fraction of contexts, which get rows of their own.
///
/// A `band` of `(start, width)` restricts successors to `width` consecutive
/// non-BOS tokens starting at offset `start`, wrapping around.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterChain {
    pub vocab_size: usize,
    pub support: usize,
    pub concentration: f64,
    pub seed: u64,
    pub parent: Option<u64>,
    pub divergence: f64,
    pub band: Option<(usize, usize)>,
}

impl RegisterChain {
    pub fn dist(&self, context: &[u32]) -> ProbDist {
        let tail = &context[context.len().saturating_sub(2)..];
        let mut seed = self.seed;
        if let Some(parent) = self.parent {
            let u =
                (mix64(hash_tokens(self.seed ^ 0x5eed, tail)) >> 11) as f64 / (1u64 << 53) as f64;
            if u >= self.divergence {
                seed = parent;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_tokens(seed, tail));
        let usable = self.vocab_size - 1;
        let (start, width) = self.band.unwrap_or((0, usable));
        let width = width.clamp(1, usable);
        let picks = sample(&mut rng, width, self.support.min(width));
        let gamma = Gamma::new(self.concentration, 1.0).expect("positive concentration");
        let raw: Vec<f64> = picks
            .iter()
            .map(|_| gamma.sample(&mut rng).max(1e-12))
            .collect();
        let z: f64 = raw.iter().sum();
        let mut p = vec![0.0; self.vocab_size];
        for (i, w) in picks.iter().zip(raw) {
            p[1 + (start + i) % usable] = w / z;
        }
        ProbDist::Dense(p)
    }

    pub fn sample(&self, rng: &mut impl Rng, len: usize) -> Result<TokenSequence> {
        let mut ctx = vec![SYNTH_BOS];
        for _ in 0..len {
            let t = sample_from(&self.dist(&ctx), rng, Some(SYNTH_BOS));
            ctx.push(t);
        }
        TokenSequence::new(ctx.split_off(1), SYNTH_BOS, 0)
    }

    pub fn corpus(
        &self,
        rng: &mut impl Rng,
        docs: usize,
        len: usize,
    ) -> Result<Vec<TokenSequence>> {
        (0..docs).map(|_| self.sample(rng, len)).collect()
    }
}

/// Toy model settings for one role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSpec {
    pub order: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBenchConfig {
    pub vocab_size: usize,
    pub chain_support: usize,
    pub chain_concentration: f64,
    /// Fraction of contexts where the human register departs from the source.
    pub human_divergence: f64,
    pub source: LmSpec,
    pub human: LmSpec,
    pub proxy: LmSpec,
    /// Documents sampled from each register to train each toy model.
    pub train_docs: usize,
    pub train_doc_len: usize,
    /// Source documents backing the datastore.
    pub datastore_docs: usize,
    pub datastore_doc_len: usize,
    pub texts_per_class: usize,
    pub text_len: usize,
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub embed_window: usize,
    /// Control run: the proxy is the source model itself.
    pub proxy_is_source: bool,
    pub seed: u64,
}

impl Default for SynthBenchConfig {
    fn default() -> Self {
        Self {
            vocab_size: 48,
            chain_support: 6,
            chain_concentration: 0.5,
            human_divergence: 0.15,
            source: LmSpec {
                order: 3,
                alpha: 0.01,
            },
            human: LmSpec {
                order: 3,
                alpha: 0.01,
            },
            proxy: LmSpec {
                order: 2,
                alpha: 0.5,
            },
            train_docs: 200,
            train_doc_len: 100,
            datastore_docs: 200,
            datastore_doc_len: 100,
            texts_per_class: 500,
            text_len: 40,
            prompt_len: 0,
            embed_dim: 16,
            embed_window: 3,
            proxy_is_source: false,
            seed: 0,
        }
    }
}

impl SynthBenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.chain_support == 0 {
            return Err(Error::Config(
                "vocab_size ≥ 3 and chain_support ≥ 1 required".into(),
            ));
        }
        if self.text_len <= self.prompt_len {
            return Err(Error::Config("text_len must exceed prompt_len".into()));
        }
        if self.texts_per_class == 0 || self.train_docs == 0 || self.datastore_docs == 0 {
            return Err(Error::Config("document counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.human_divergence) {
            return Err(Error::Config("human_divergence must lie in [0, 1]".into()));
        }
        if !(self.chain_concentration > 0.0) {
            return Err(Error::Config("chain_concentration must be positive".into()));
        }
        Ok(())
    }

    fn toy_config(&self, spec: LmSpec) -> ToyLmConfig {
        ToyLmConfig {
            order: spec.order,
            alpha: spec.alpha,
            embed_dim: self.embed_dim,
            embed_window: self.embed_window,
            embed_seed: mix64(self.seed ^ 0xe4be),
        }
    }

    pub fn chain(&self, tag: u64) -> RegisterChain {
        RegisterChain {
            vocab_size: self.vocab_size,
            support: self.chain_support,
            concentration: self.chain_concentration,
            seed: mix64(self.seed.wrapping_mul(0x1000_0001) ^ tag),
            parent: None,
            divergence: 1.0,
            band: None,
        }
    }

    fn rng(&self, tag: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix64(self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    fn train(&self, docs: &[TokenSequence], spec: LmSpec) -> Result<ToyLm> {
        ToyLm::train(
            Vocabulary::synthetic(self.vocab_size)?,
            docs,
            self.toy_config(spec),
        )
    }

    /// Texts of `len` tokens with the first `prompt_len` positions unscored.
    fn texts(&self, lm: &ToyLm, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<TokenSequence>> {
        (0..n)
            .map(|_| {
                let s = lm.sample(rng, self.text_len, &[])?;
                TokenSequence::new(s.ids().to_vec(), SYNTH_BOS, self.prompt_len)
            })
            .collect()
    }
}

/// Everything a detection run needs.
#[derive(Debug, Clone)]
pub struct DetectionBench {
    pub config: SynthBenchConfig,
    pub source: ToyLm,
    pub human: ToyLm,
    pub proxy: ToyLm,
    pub llm_texts: Vec<TokenSequence>,
    pub human_texts: Vec<TokenSequence>,
    pub datastore_corpus: Vec<TokenSequence>,
}

impl DetectionBench {
    /// All texts, LLM-generated first, with their labels.
    pub fn labeled_texts(&self) -> (Vec<&TokenSequence>, Vec<bool>) {
        let texts: Vec<_> = self.llm_texts.iter().chain(&self.human_texts).collect();
        let labels = (0..texts.len()).map(|i| i < self.llm_texts.len()).collect();
        (texts, labels)
    }
}

const TAG_SOURCE: u64 = 1;
const TAG_HUMAN: u64 = 2;
const TAG_BLEND: u64 = 3;

pub fn synth_benchmark(cfg: &SynthBenchConfig) -> Result<DetectionBench> {
    cfg.validate()?;
    let source_chain = cfg.chain(TAG_SOURCE);
    let human_chain = RegisterChain {
        parent: Some(source_chain.seed),
        divergence: cfg.human_divergence,
        ..cfg.chain(TAG_HUMAN)
    };
    let blend_chain = cfg.chain(TAG_BLEND);

    let mut rng = cfg.rng(10);
    let source_train = source_chain.corpus(&mut rng, cfg.train_docs, cfg.train_doc_len)?;
    let human_train = human_chain.corpus(&mut rng, cfg.train_docs, cfg.train_doc_len)?;
    let source = cfg.train(&source_train, cfg.source)?;
    let human = cfg.train(&human_train, cfg.human)?;

    let proxy = if cfg.proxy_is_source {
        cfg.train(&source_train, cfg.source)?
    } else {
        // a general-purpose model: a third of its data from each register
        let third = cfg.train_docs.div_ceil(3);
        let mut blend = Vec::with_capacity(3 * third);
        blend.extend(source_train.iter().take(third).cloned());
        blend.extend(human_train.iter().take(third).cloned());
        blend.extend(blend_chain.corpus(&mut rng, third, cfg.train_doc_len)?);
        cfg.train(&blend, cfg.proxy)?
    };

    let mut ds_rng = cfg.rng(11);
    let datastore_corpus = (0..cfg.datastore_docs)
        .map(|_| source.sample(&mut ds_rng, cfg.datastore_doc_len, &[]))
        .collect::<Result<_>>()?;
    let llm_texts = cfg.texts(&source, &mut cfg.rng(12), cfg.texts_per_class)?;
    let human_texts = cfg.texts(&human, &mut cfg.rng(13), cfg.texts_per_class)?;
    Ok(DetectionBench {
        config: cfg.clone(),
        source,
        human,
        proxy,
        llm_texts,
        human_texts,
        datastore_corpus,
    })
}

/// Several labeled registers sharing one vocabulary, e.g. domains for routing
/// or candidate source models for attribution. Each register favors its own
/// half of the vocabulary, overlapping its neighbors.
#[derive(Debug, Clone)]
pub struct MultiSource {
    pub names: Vec<String>,
    pub models: Vec<ToyLm>,
    /// General model trained on an equal blend of every register.
    pub proxy: ToyLm,
}

pub fn multi_source(cfg: &SynthBenchConfig, count: usize) -> Result<MultiSource> {
    cfg.validate()?;
    let mut rng = cfg.rng(20);
    let mut names = Vec::with_capacity(count);
    let mut models = Vec::with_capacity(count);
    let mut blend = Vec::new();
    let share = cfg.train_docs.div_ceil(count.max(1));
    for m in 0..count {
        let usable = cfg.vocab_size - 1;
        let chain = RegisterChain {
            band: Some((m * usable / count, usable.div_ceil(2))),
            ..cfg.chain(100 + m as u64)
        };
        let docs = chain.corpus(&mut rng, cfg.train_docs, cfg.train_doc_len)?;
        blend.extend(docs.iter().take(share).cloned());
        models.push(cfg.train(&docs, cfg.source)?);
        names.push(format!("src{m}"));
    }
    let proxy = cfg.train(&blend, cfg.proxy)?;
    Ok(MultiSource {
        names,
        models,
        proxy,
    })
}

impl MultiSource {
    pub fn sample_texts(
        &self,
        m: usize,
        n: usize,
        len: usize,
        seed: u64,
    ) -> Result<Vec<TokenSequence>> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix64(seed ^ (m as u64 + 1).wrapping_mul(0x5851_f42d)));
        (0..n)
            .map(|_| self.models[m].sample(&mut rng, len, &[]))
            .collect()
    }
}

/// Whitespace-joined token strings, the text form fed to sentence embedders.
pub fn render(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    seq.ids()
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::normalize_check;

    fn small() -> SynthBenchConfig {
        SynthBenchConfig {
            texts_per_class: 10,
            train_docs: 20,
            datastore_docs: 10,
            ..Default::default()
        }
    }

    #[test]
    fn chain_rows_are_sparse_distributions() {
        let c = small().chain(1);
        let p = c.dist(&[0, 5, 7]);
        assert!(normalize_check(&p));
        assert_eq!(p.support().len(), 6);
        assert_eq!(p.prob(SYNTH_BOS), 0.0);
        assert_eq!(p, c.dist(&[5, 7]));
        let banded = RegisterChain {
            band: Some((45, 4)),
            ..c
        };
        let q = banded.dist(&[3, 9]);
        assert!(normalize_check(&q));
        assert!(q.support().iter().all(|t| [46, 47, 1, 2].contains(t)));
    }

    #[test]
    fn same_seed_same_world() {
        let a = synth_benchmark(&small()).unwrap();
        let b = synth_benchmark(&small()).unwrap();
        assert_eq!(a.llm_texts, b.llm_texts);
        assert_eq!(a.human_texts, b.human_texts);
        assert_eq!(a.datastore_corpus, b.datastore_corpus);
        let c = synth_benchmark(&SynthBenchConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.llm_texts, c.llm_texts);
    }

    #[test]
    fn shapes() {
        let b = synth_benchmark(&SynthBenchConfig {
            prompt_len: 3,
            ..small()
        })
        .unwrap();
        let (texts, labels) = b.labeled_texts();
        assert_eq!(texts.len(), 20);
        assert_eq!(labels.iter().filter(|&&y| y).count(), 10);
        assert!(texts.iter().all(|t| t.len() == 40 && t.prompt_len() == 3));
        assert!(texts.iter().all(|t| !t.ids().contains(&SYNTH_BOS)));
    }
}
