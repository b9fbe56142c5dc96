//! Desk-scale n-gram language model with a hashed context feature map.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{LmProvider, LmStep};
use crate::error::{Error, Result};
use crate::hash::{hash_tokens, mix64, Fingerprint};
use crate::prob::{ProbDist, TokenSequence, Vocabulary};

pub const BOS_TOKEN: &str = "<bos>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmConfig {
    /// n-gram order; 1 is a unigram model.
    pub order: usize,
    /// Add-alpha smoothing constant.
    pub alpha: f64,
    pub embed_dim: usize,
    /// Number of trailing context tokens the feature map looks at.
    pub embed_window: usize,
    pub embed_seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            order: 3,
            alpha: 0.1,
            embed_dim: 64,
            embed_window: 3,
            embed_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Counts {
    total: u64,
    next: BTreeMap<u32, u64>,
}

/// Backoff n-gram model: the longest context suffix seen in training is
/// smoothed with add-alpha; unseen contexts fall back one order at a time
/// down to the unigram table.
#[derive(Debug, Clone)]
pub struct ToyLm {
    vocab: Vocabulary,
    bos_id: u32,
    cfg: ToyLmConfig,
    /// `levels[n]` maps length-`n` contexts to successor counts.
    levels: Vec<HashMap<Vec<u32>, Counts>>,
    corpus_fingerprint: String,
}

impl ToyLm {
    pub fn train(vocab: Vocabulary, corpus: &[TokenSequence], cfg: ToyLmConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation("toy LM needs a nonempty corpus".into()));
        }
        if cfg.order == 0 {
            return Err(Error::Validation("n-gram order must be at least 1".into()));
        }
        if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
            return Err(Error::Validation(format!(
                "alpha must be positive, got {}",
                cfg.alpha
            )));
        }
        if cfg.embed_dim == 0 || cfg.embed_window == 0 {
            return Err(Error::Validation(
                "embed_dim and embed_window must be positive".into(),
            ));
        }
        let bos_id = corpus[0].bos_id();
        let mut levels: Vec<HashMap<Vec<u32>, Counts>> = vec![HashMap::new(); cfg.order];
        let mut fp = Fingerprint::default();
        for seq in corpus {
            seq.validate(vocab.size())?;
            fp = fp.u64(seq.len() as u64);
            let mut full = Vec::with_capacity(seq.len() + 1);
            full.push(seq.bos_id());
            full.extend_from_slice(seq.ids());
            for i in 0..seq.len() {
                let next = seq.ids()[i];
                fp = fp.u64(u64::from(next));
                let ctx = &full[..=i];
                for (n, level) in levels.iter_mut().enumerate() {
                    if n > ctx.len() {
                        break;
                    }
                    let c = level.entry(ctx[ctx.len() - n..].to_vec()).or_default();
                    c.total += 1;
                    *c.next.entry(next).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            vocab,
            bos_id,
            cfg,
            levels,
            corpus_fingerprint: fp.hex(),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    /// Next-token distribution after `context` (BOS included by the caller).
    pub fn next_dist(&self, context: &[u32]) -> ProbDist {
        let v = self.vocab.size();
        let top = (self.cfg.order - 1).min(context.len());
        for n in (0..=top).rev() {
            if let Some(c) = self.levels[n].get(&context[context.len() - n..]) {
                let denom = c.total as f64 + self.cfg.alpha * v as f64;
                let mut p = vec![self.cfg.alpha / denom; v];
                for (&t, &cnt) in &c.next {
                    p[t as usize] = (cnt as f64 + self.cfg.alpha) / denom;
                }
                return ProbDist::Dense(p);
            }
        }
        ProbDist::uniform(v)
    }

    /// Hashed bag of trailing n-grams. The n-gram ending at the last context
    /// token with length `n` contributes a random sign vector of unit norm
    /// scaled by `1 + 1/n`, so shorter (more recent) suffixes weigh more.
    pub fn embed(&self, context: &[u32]) -> Vec<f32> {
        let d = self.cfg.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0f64; d];
        for n in 1..=self.cfg.embed_window.min(context.len()) {
            let h = hash_tokens(self.cfg.embed_seed, &context[context.len() - n..]);
            let weight = (1.0 + 1.0 / n as f64) * scale;
            for (j, o) in out.iter_mut().enumerate() {
                let bits = mix64(h ^ (j as u64).wrapping_mul(0x9e37_79b9));
                *o += if bits & 1 == 0 { weight } else { -weight };
            }
        }
        out.into_iter().map(|x| x as f32).collect()
    }

    /// Sample `len` tokens after an optional prompt. BOS is never emitted.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        len: usize,
        prompt: &[u32],
    ) -> Result<TokenSequence> {
        let mut ids = prompt.to_vec();
        let mut ctx = Vec::with_capacity(len + prompt.len() + 1);
        ctx.push(self.bos_id);
        ctx.extend_from_slice(prompt);
        for _ in 0..len {
            let keep = (self.cfg.order - 1).min(ctx.len());
            let dist = self.next_dist(&ctx[ctx.len() - keep..]);
            let tok = sample_from(&dist, rng, Some(self.bos_id));
            ids.push(tok);
            ctx.push(tok);
        }
        TokenSequence::new(ids, self.bos_id, prompt.len())
    }
}

/// Inverse-CDF draw from `dist`, optionally excluding one token.
pub fn sample_from<R: Rng + ?Sized>(dist: &ProbDist, rng: &mut R, exclude: Option<u32>) -> u32 {
    let p = dist.to_dense();
    let mass: f64 = p
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i as u32) != exclude)
        .map(|(_, &m)| m)
        .sum();
    let mut u = rng.random::<f64>() * mass;
    let mut last = 0;
    for (i, &m) in p.iter().enumerate() {
        if Some(i as u32) == exclude || m <= 0.0 {
            continue;
        }
        last = i as u32;
        if u < m {
            return last;
        }
        u -= m;
    }
    last
}

impl LmProvider for ToyLm {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn fingerprint(&self) -> String {
        Fingerprint::default()
            .str("toy")
            .u64(self.cfg.order as u64)
            .u64(self.cfg.alpha.to_bits())
            .u64(self.cfg.embed_dim as u64)
            .u64(self.cfg.embed_window as u64)
            .u64(self.cfg.embed_seed)
            .u64(self.vocab.size() as u64)
            .str(&self.corpus_fingerprint)
            .hex()
    }

    fn lm_steps(&self, seq: &TokenSequence) -> Result<Vec<LmStep>> {
        self.lm_steps_windowed(seq, usize::MAX)
    }

    fn lm_steps_windowed(&self, seq: &TokenSequence, window: usize) -> Result<Vec<LmStep>> {
        seq.validate(self.vocab.size())?;
        Ok((0..seq.len())
            .map(|i| {
                let ctx = seq.context(i, usize::MAX);
                let emb_ctx = &ctx[ctx.len() - window.min(ctx.len())..];
                LmStep {
                    embedding: self.embed(emb_ctx),
                    dist: self.next_dist(&ctx),
                }
            })
            .collect())
    }

    fn context_embeddings(&self, seq: &TokenSequence, window: usize) -> Result<Vec<Vec<f32>>> {
        seq.validate(self.vocab.size())?;
        let reach = window.min(self.cfg.embed_window);
        Ok((0..seq.len())
            .map(|i| self.embed(&seq.context(i, reach)))
            .collect())
    }

    fn tokenize(&self, text: &str, prompt_len: usize) -> Result<TokenSequence> {
        let unk = self.vocab.id(UNK_TOKEN);
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.vocab
                    .id(w)
                    .or(unk)
                    .ok_or_else(|| Error::VocabularyMismatch(format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<u32>>>()?;
        TokenSequence::new(ids, self.bos_id, prompt_len)
    }
}

/// Vocabulary for whitespace-tokenized text: BOS, UNK, then words in order of
/// first appearance.
pub fn vocabulary_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocabulary> {
    let mut tokens = vec![BOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for text in texts {
        for w in text.split_whitespace() {
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
    }
    Vocabulary::new(tokens)
}
