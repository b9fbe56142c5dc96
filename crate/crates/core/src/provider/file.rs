//! `KNPF1` feature files: precomputed embeddings and dense log-probabilities.
//!
//! Layout (little-endian): magic `KNPF1`, u32 V, u32 d, u64 sequence count;
//! per sequence u32 T, u32 prompt_len, T u32 token ids, T*d f32 embeddings,
//! T*V f32 log-probabilities; trailing CRC32 over all preceding bytes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LmProvider, LmStep};
use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::prob::{ProbDist, TokenSequence};

const MAGIC: &[u8; 5] = b"KNPF1";

/// Features of one sequence. `embeddings` is `T x d`, `log_probs` is `T x V`,
/// both row-major with row `i` describing the context before token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub token_ids: Vec<u32>,
    pub prompt_len: usize,
    pub embeddings: Vec<f32>,
    pub log_probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub vocab_size: usize,
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    /// Dump a provider's steps for `seqs`.
    pub fn from_provider<P: LmProvider + ?Sized>(
        provider: &P,
        seqs: &[TokenSequence],
    ) -> Result<Self> {
        let vocab_size = provider.vocab_size();
        let dim = provider.embed_dim();
        let records = seqs
            .iter()
            .map(|seq| {
                let steps = provider.lm_steps(seq)?;
                let mut embeddings = Vec::with_capacity(steps.len() * dim);
                let mut log_probs = Vec::with_capacity(steps.len() * vocab_size);
                for step in &steps {
                    embeddings.extend_from_slice(&step.embedding);
                    log_probs.extend(step.dist.to_dense().into_iter().map(|p| p.ln() as f32));
                }
                Ok(FeatureRecord {
                    token_ids: seq.ids().to_vec(),
                    prompt_len: seq.prompt_len(),
                    embeddings,
                    log_probs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocab_size,
            dim,
            records,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.dim == 0 {
            return Err(Error::Validation(format!(
                "bad feature header V={} d={}",
                self.vocab_size, self.dim
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            let t = r.token_ids.len();
            if t == 0 || r.prompt_len >= t {
                return Err(Error::Validation(format!(
                    "record {i}: {t} tokens with prompt_len {}",
                    r.prompt_len
                )));
            }
            if r.embeddings.len() != t * self.dim || r.log_probs.len() != t * self.vocab_size {
                return Err(Error::Validation(format!(
                    "record {i}: per-position arrays do not match T={t}"
                )));
            }
            if let Some(&bad) = r.token_ids.iter().find(|&&x| x as usize >= self.vocab_size) {
                return Err(Error::Validation(format!(
                    "record {i}: token id {bad} >= V"
                )));
            }
            if r.embeddings.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "record {i}: non-finite embedding"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&(r.token_ids.len() as u32).to_le_bytes());
            buf.extend_from_slice(&(r.prompt_len as u32).to_le_bytes());
            r.token_ids
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            r.embeddings
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            r.log_probs
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = Self::parse(&bytes).map_err(|r| Error::format(path, r))?;
        file.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(file)
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 5 + 4 + 4 + 8 + 4 {
            return Err(format!("file too short ({} bytes)", bytes.len()));
        }
        if &bytes[..5] != MAGIC {
            return Err("bad magic".into());
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err("checksum mismatch".into());
        }
        let mut cur = Cursor {
            bytes: &bytes[..body_end],
            pos: 5,
        };
        let vocab_size = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let count = cur.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let t = cur.u32()? as usize;
            let prompt_len = cur.u32()? as usize;
            let token_ids = cur.u32s(t)?;
            let embeddings = cur.f32s(t.checked_mul(dim).ok_or("size overflow")?)?;
            let log_probs = cur.f32s(t.checked_mul(vocab_size).ok_or("size overflow")?)?;
            records.push(FeatureRecord {
                token_ids,
                prompt_len,
                embeddings,
                log_probs,
            });
        }
        if cur.pos != body_end {
            return Err(format!("{} trailing bytes", body_end - cur.pos));
        }
        Ok(Self {
            vocab_size,
            dim,
            records,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).ok_or("size overflow")?;
        if end > self.bytes.len() {
            return Err("truncated file".into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> std::result::Result<Vec<u32>, String> {
        Ok(self
            .take(n.checked_mul(4).ok_or("size overflow")?)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        Ok(self
            .take(n.checked_mul(4).ok_or("size overflow")?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serves steps for the sequences stored in a feature file. Sequences are
/// looked up by their token ids and prompt length.
#[derive(Debug, Clone)]
pub struct FileProvider {
    path: PathBuf,
    file: FeatureFile,
    bos_id: u32,
    by_tokens: HashMap<(Vec<u32>, usize), usize>,
    fingerprint: String,
}

impl FileProvider {
    /// `bos_id` is attached to sequences handed out by [`sequences`](Self::sequences);
    /// the file format itself does not carry one.
    pub fn open(path: impl AsRef<Path>, bos_id: u32) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = FeatureFile::read(&path)?;
        Ok(Self::from_file(file, path, bos_id))
    }

    pub fn from_file(file: FeatureFile, path: PathBuf, bos_id: u32) -> Self {
        let by_tokens = file
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.token_ids.clone(), r.prompt_len), i))
            .collect();
        let fingerprint = Fingerprint::default()
            .str("file")
            .u64(file.vocab_size as u64)
            .u64(file.dim as u64)
            .bytes(&crc32fast::hash(&file.to_bytes()).to_le_bytes())
            .hex();
        Self {
            path,
            file,
            bos_id,
            by_tokens,
            fingerprint,
        }
    }

    pub fn file(&self) -> &FeatureFile {
        &self.file
    }

    /// Every stored sequence, in file order.
    pub fn sequences(&self) -> Result<Vec<TokenSequence>> {
        self.file
            .records
            .iter()
            .map(|r| TokenSequence::new(r.token_ids.clone(), self.bos_id, r.prompt_len))
            .collect()
    }
}

impl LmProvider for FileProvider {
    fn vocab_size(&self) -> usize {
        self.file.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.file.dim
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn lm_steps(&self, seq: &TokenSequence) -> Result<Vec<LmStep>> {
        let &idx = self
            .by_tokens
            .get(&(seq.ids().to_vec(), seq.prompt_len()))
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "sequence of {} tokens not present in {}",
                    seq.len(),
                    self.path.display()
                ))
            })?;
        let r = &self.file.records[idx];
        let (d, v) = (self.file.dim, self.file.vocab_size);
        Ok((0..seq.len())
            .map(|i| LmStep {
                embedding: r.embeddings[i * d..(i + 1) * d].to_vec(),
                dist: ProbDist::from_log_probs(&r.log_probs[i * v..(i + 1) * v]),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{normalize_check, Vocabulary};
    use crate::provider::{ToyLm, ToyLmConfig};

    fn toy() -> (ToyLm, Vec<TokenSequence>) {
        let seqs: Vec<TokenSequence> = [[1u32, 2, 3, 1, 2].as_slice(), &[3, 3, 2, 1], &[2, 1]]
            .iter()
            .enumerate()
            .map(|(i, ids)| TokenSequence::new(ids.to_vec(), 0, i % 2).unwrap())
            .collect();
        let lm = ToyLm::train(
            Vocabulary::synthetic(5).unwrap(),
            &seqs,
            ToyLmConfig {
                embed_dim: 8,
                ..Default::default()
            },
        )
        .unwrap();
        (lm, seqs)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (lm, seqs) = toy();
        let ff = FeatureFile::from_provider(&lm, &seqs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.knpf");
        ff.write(&path).unwrap();
        let back = FeatureFile::read(&path).unwrap();
        assert_eq!(back.records.len(), 3);
        for (a, b) in ff.records.iter().zip(&back.records) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.embeddings), bits(&b.embeddings));
            assert_eq!(bits(&a.log_probs), bits(&b.log_probs));
            assert_eq!(a.token_ids, b.token_ids);
        }

        let provider = FileProvider::open(&path, 0).unwrap();
        let seqs_back = provider.sequences().unwrap();
        assert_eq!(seqs_back, seqs);
        for seq in &seqs {
            let direct = lm.lm_steps(seq).unwrap();
            let served = provider.lm_steps(seq).unwrap();
            for (x, y) in direct.iter().zip(&served) {
                assert_eq!(x.embedding, y.embedding);
                assert!(normalize_check(&y.dist));
                for (p, q) in x.dist.to_dense().iter().zip(y.dist.to_dense()) {
                    assert!((p - q).abs() <= 1e-6 * p);
                }
            }
        }
    }

    #[test]
    fn unknown_sequence_is_a_lookup_error() {
        let (lm, seqs) = toy();
        let ff = FeatureFile::from_provider(&lm, &seqs).unwrap();
        let p = FileProvider::from_file(ff, "mem".into(), 0);
        let missing = TokenSequence::new(vec![4, 4, 4], 0, 0).unwrap();
        assert!(matches!(p.lm_steps(&missing), Err(Error::Lookup(_))));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (lm, seqs) = toy();
        let bytes = FeatureFile::from_provider(&lm, &seqs).unwrap().to_bytes();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.knpf");
        let mut wrong_magic = bytes.clone();
        wrong_magic[4] = b'9';
        for b in [wrong_magic, bytes[..bytes.len() - 9].to_vec(), vec![]] {
            fs::write(&path, b).unwrap();
            assert!(matches!(
                FeatureFile::read(&path),
                Err(Error::Format { .. })
            ));
        }
    }
}
