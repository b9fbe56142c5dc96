//! The (context embedding, next token) memory built from a source corpus.
//!
//! Entry `n` pairs the embedding of a context window with the token that
//! follows it. Contexts start with BOS; windows at the left edge of a text are
//! shorter than `W` and are kept.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::index::{IndexMode, NeighborSet, VectorIndex};
use crate::prob::TokenSequence;
use crate::provider::LmProvider;

pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub window: usize,
    pub stride: usize,
    /// Cap on the number of entries, enforced by seeded reservoir sampling.
    pub max_entries: Option<usize>,
    pub seed: u64,
    pub mode: IndexMode,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: 1,
            max_entries: None,
            seed: 0,
            mode: IndexMode::Exact,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.max_entries == Some(0) {
            return Err(Error::Config("max_entries must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stored next to the index as `<path>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatastoreMeta {
    pub window: usize,
    pub stride: usize,
    pub n_entries: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub provider_fingerprint: String,
    pub corpus_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Datastore {
    index: VectorIndex,
    meta: DatastoreMeta,
}

/// `(sequence, position)` of every window the build emits before capping.
/// Position `i` means context `BOS, ids[..i]` and value `ids[i]`.
pub fn window_positions(corpus: &[TokenSequence], stride: usize) -> Vec<(usize, usize)> {
    corpus
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.len()).step_by(stride).map(move |i| (s, i)))
        .collect()
}

/// Algorithm R over `0..n`, returned in ascending order.
fn reservoir(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = (0..cap).collect();
    for i in cap..n {
        let j = rng.random_range(0..=i);
        if j < cap {
            kept[j] = i;
        }
    }
    kept.sort_unstable();
    kept
}

pub fn corpus_fingerprint(corpus: &[TokenSequence]) -> String {
    let mut fp = Fingerprint::default().u64(corpus.len() as u64);
    for seq in corpus {
        fp = fp.u64(seq.len() as u64).u64(u64::from(seq.bos_id()));
        for &id in seq.ids() {
            fp = fp.u64(u64::from(id));
        }
    }
    fp.hex()
}

pub fn build_datastore<P: LmProvider + ?Sized>(
    provider: &P,
    corpus: &[TokenSequence],
    cfg: &BuildConfig,
) -> Result<Datastore> {
    cfg.validate()?;
    let vocab_size = provider.vocab_size();
    for seq in corpus {
        seq.validate(vocab_size)?;
    }
    let mut positions = window_positions(corpus, cfg.stride);
    if positions.is_empty() {
        return Err(Error::EmptyDatastore(
            "no sequence has at least 2 tokens".into(),
        ));
    }
    if let Some(cap) = cfg.max_entries {
        positions = reservoir(positions.len(), cap, cfg.seed)
            .into_iter()
            .map(|i| positions[i])
            .collect();
    }

    // embed each document once, in parallel, keeping corpus order
    let mut wanted: Vec<Vec<usize>> = vec![Vec::new(); corpus.len()];
    for &(s, i) in &positions {
        wanted[s].push(i);
    }
    let dim = provider.embed_dim();
    let parts: Vec<(Vec<f32>, Vec<u32>)> = corpus
        .par_iter()
        .zip(wanted.par_iter())
        .filter(|(_, w)| !w.is_empty())
        .map(|(seq, w)| -> Result<(Vec<f32>, Vec<u32>)> {
            let emb = provider.context_embeddings(seq, cfg.window)?;
            let mut keys = Vec::with_capacity(w.len() * dim);
            let mut values = Vec::with_capacity(w.len());
            for &i in w {
                let e = &emb[i];
                if e.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: e.len(),
                    });
                }
                keys.extend_from_slice(e);
                values.push(seq.ids()[i]);
            }
            Ok((keys, values))
        })
        .collect::<Result<_>>()?;
    let mut keys = Vec::with_capacity(positions.len() * dim);
    let mut values = Vec::with_capacity(positions.len());
    for (k, v) in parts {
        keys.extend(k);
        values.extend(v);
    }

    let meta = DatastoreMeta {
        window: cfg.window,
        stride: cfg.stride,
        n_entries: values.len(),
        vocab_size,
        dim,
        provider_fingerprint: provider.fingerprint(),
        corpus_fingerprint: corpus_fingerprint(corpus),
    };
    let index = VectorIndex::build(keys, values, dim, cfg.mode)?;
    tracing::info!(
        n = meta.n_entries,
        window = meta.window,
        dim,
        "built datastore"
    );
    Ok(Datastore { index, meta })
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Datastore {
    pub fn from_parts(index: VectorIndex, meta: DatastoreMeta) -> Result<Self> {
        if index.len() != meta.n_entries || index.dim() != meta.dim {
            return Err(Error::Validation(format!(
                "metadata describes {}×{} entries but index holds {}×{}",
                meta.n_entries,
                meta.dim,
                index.len(),
                index.dim()
            )));
        }
        if let Some(&bad) = index
            .values()
            .iter()
            .find(|&&v| v as usize >= meta.vocab_size)
        {
            return Err(Error::VocabularyMismatch(format!(
                "stored token {bad} outside vocabulary of size {}",
                meta.vocab_size
            )));
        }
        Ok(Self { index, meta })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn meta(&self) -> &DatastoreMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn window(&self) -> usize {
        self.meta.window
    }

    pub fn vocab_size(&self) -> usize {
        self.meta.vocab_size
    }

    pub fn search(&self, q: &[f32], k: usize) -> Result<NeighborSet> {
        self.index.search(q, k)
    }

    /// Writes the index to `path` and the metadata to `<path>.meta.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.index.save(path)?;
        let mpath = meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
    }

    /// Loads a datastore. A provider fingerprint that differs from
    /// `expected_provider` is reported as a warning only.
    pub fn load(path: impl AsRef<Path>, expected_provider: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let index = VectorIndex::load(path)?;
        let mpath = meta_path(path);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: DatastoreMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if let Some(fp) = expected_provider {
            if fp != meta.provider_fingerprint {
                tracing::warn!(
                    stored = %meta.provider_fingerprint,
                    current = %fp,
                    path = %path.display(),
                    "datastore was built with a different provider configuration"
                );
            }
        }
        Self::from_parts(index, meta)
    }
}
