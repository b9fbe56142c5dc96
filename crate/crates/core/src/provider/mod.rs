//! Sources of per-position context embeddings and next-token distributions.
//!
//! Step `i` of a sequence is conditioned on BOS followed by `ids[..i]`: its
//! embedding represents that context and its distribution predicts `ids[i]`.

mod file;
mod http;
mod toy;

pub use file::{FeatureFile, FeatureRecord, FileProvider};
pub use http::{HttpProvider, LM_TOKEN_ENV, LM_URL_ENV};
pub use toy::{sample_from, vocabulary_from_texts, ToyLm, ToyLmConfig, BOS_TOKEN, UNK_TOKEN};

use crate::error::{Error, Result};
use crate::prob::{ProbDist, TokenSequence};

/// Context representation and next-token distribution at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct LmStep {
    pub embedding: Vec<f32>,
    pub dist: ProbDist,
}

/// Uniform contract over toy models, feature files and remote models.
pub trait LmProvider: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn embed_dim(&self) -> usize;

    /// Stable identifier of the model and feature-map configuration.
    fn fingerprint(&self) -> String;

    /// One step per position of `seq`.
    fn lm_steps(&self, seq: &TokenSequence) -> Result<Vec<LmStep>>;

    /// Like [`lm_steps`](Self::lm_steps) but context embeddings see at most
    /// `window` trailing context tokens. Providers that only expose
    /// full-prefix features ignore the window.
    fn lm_steps_windowed(&self, seq: &TokenSequence, window: usize) -> Result<Vec<LmStep>> {
        let _ = window;
        self.lm_steps(seq)
    }

    /// Context embeddings only, one per position.
    fn context_embeddings(&self, seq: &TokenSequence, window: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .lm_steps_windowed(seq, window)?
            .into_iter()
            .map(|s| s.embedding)
            .collect())
    }

    /// Turn raw text into a sequence. Only providers that own a vocabulary can.
    fn tokenize(&self, text: &str, prompt_len: usize) -> Result<TokenSequence> {
        let _ = (text, prompt_len);
        Err(Error::Config(
            "this provider cannot tokenize text; supply token_ids".into(),
        ))
    }
}

impl<P: LmProvider + ?Sized> LmProvider for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn lm_steps(&self, seq: &TokenSequence) -> Result<Vec<LmStep>> {
        (**self).lm_steps(seq)
    }
    fn lm_steps_windowed(&self, seq: &TokenSequence, window: usize) -> Result<Vec<LmStep>> {
        (**self).lm_steps_windowed(seq, window)
    }
    fn context_embeddings(&self, seq: &TokenSequence, window: usize) -> Result<Vec<Vec<f32>>> {
        (**self).context_embeddings(seq, window)
    }
    fn tokenize(&self, text: &str, prompt_len: usize) -> Result<TokenSequence> {
        (**self).tokenize(text, prompt_len)
    }
}

impl<P: LmProvider + ?Sized> LmProvider for Box<P> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn lm_steps(&self, seq: &TokenSequence) -> Result<Vec<LmStep>> {
        (**self).lm_steps(seq)
    }
    fn lm_steps_windowed(&self, seq: &TokenSequence, window: usize) -> Result<Vec<LmStep>> {
        (**self).lm_steps_windowed(seq, window)
    }
    fn context_embeddings(&self, seq: &TokenSequence, window: usize) -> Result<Vec<Vec<f32>>> {
        (**self).context_embeddings(seq, window)
    }
    fn tokenize(&self, text: &str, prompt_len: usize) -> Result<TokenSequence> {
        (**self).tokenize(text, prompt_len)
    }
}
