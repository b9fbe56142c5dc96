//! Vocabulary, token sequences and next-token distributions.
//!
//! Proxy outputs are dense; retrieval-induced distributions are sparse since
//! their support never exceeds the neighbor count. Mixing a sparse and a dense
//! distribution yields a dense one.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a distribution.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Ordered token inventory. Token ids are positions in `tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Validation(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    /// Synthetic vocabulary `t0 .. t{size-1}`.
    pub fn synthetic(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("t{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// A tokenized text. Position `i` is predicted from `bos_id` followed by
/// `ids[..i]`; the first `prompt_len` positions are excluded from scoring.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    bos_id: u32,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, bos_id: u32, prompt_len: usize) -> Result<Self> {
        if prompt_len >= ids.len() {
            return Err(Error::Validation(format!(
                "sequence of {} tokens has no scored positions with prompt_len {prompt_len}",
                ids.len()
            )));
        }
        Ok(Self {
            ids,
            bos_id,
            prompt_len,
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self
            .ids
            .iter()
            .chain(std::iter::once(&self.bos_id))
            .find(|&&id| id as usize >= vocab_size)
        {
            return Err(Error::VocabularyMismatch(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of scored positions, `T - prompt_len`.
    pub fn scored_len(&self) -> usize {
        self.ids.len() - self.prompt_len
    }

    /// Tokens at scored positions.
    pub fn scored_ids(&self) -> &[u32] {
        &self.ids[self.prompt_len..]
    }

    /// Context for position `i`: BOS followed by `ids[..i]`, keeping at most
    /// `window` trailing tokens.
    pub fn context(&self, i: usize, window: usize) -> Vec<u32> {
        let mut ctx = Vec::with_capacity(i + 1);
        ctx.push(self.bos_id);
        ctx.extend_from_slice(&self.ids[..i]);
        let keep = window.min(ctx.len());
        ctx.split_off(ctx.len() - keep)
    }
}

/// A distribution over a vocabulary of `vocab_size` tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbDist {
    Dense(Vec<f64>),
    Sparse {
        vocab_size: usize,
        mass: BTreeMap<u32, f64>,
    },
}

impl ProbDist {
    pub fn uniform(vocab_size: usize) -> Self {
        ProbDist::Dense(vec![1.0 / vocab_size as f64; vocab_size])
    }

    pub fn point(vocab_size: usize, token: u32) -> Self {
        ProbDist::Sparse {
            vocab_size,
            mass: BTreeMap::from([(token, 1.0)]),
        }
    }

    /// Dense distribution from natural-log probabilities.
    pub fn from_log_probs(log_probs: &[f32]) -> Self {
        ProbDist::Dense(log_probs.iter().map(|&lp| f64::from(lp).exp()).collect())
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ProbDist::Dense(p) => p.len(),
            ProbDist::Sparse { vocab_size, .. } => *vocab_size,
        }
    }

    pub fn prob(&self, token: u32) -> f64 {
        match self {
            ProbDist::Dense(p) => p.get(token as usize).copied().unwrap_or(0.0),
            ProbDist::Sparse { mass, .. } => mass.get(&token).copied().unwrap_or(0.0),
        }
    }

    /// Ids with nonzero mass, ascending.
    pub fn support(&self) -> Vec<u32> {
        match self {
            ProbDist::Dense(p) => p
                .iter()
                .enumerate()
                .filter(|(_, &m)| m > 0.0)
                .map(|(i, _)| i as u32)
                .collect(),
            ProbDist::Sparse { mass, .. } => mass
                .iter()
                .filter(|(_, &m)| m > 0.0)
                .map(|(&i, _)| i)
                .collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            ProbDist::Dense(p) => p.clone(),
            ProbDist::Sparse { vocab_size, mass } => {
                let mut out = vec![0.0; *vocab_size];
                for (&i, &m) in mass {
                    out[i as usize] = m;
                }
                out
            }
        }
    }

    /// Visit `(token, probability)` for every entry, including explicit zeros
    /// of a dense vector.
    pub fn for_each(&self, mut f: impl FnMut(u32, f64)) {
        match self {
            ProbDist::Dense(p) => p.iter().enumerate().for_each(|(i, &m)| f(i as u32, m)),
            ProbDist::Sparse { mass, .. } => mass.iter().for_each(|(&i, &m)| f(i, m)),
        }
    }

    pub fn total(&self) -> f64 {
        match self {
            ProbDist::Dense(p) => p.iter().sum(),
            ProbDist::Sparse { mass, .. } => mass.values().sum(),
        }
    }
}

/// True iff every entry is nonnegative and finite and the total mass is
/// within [`SIMPLEX_TOL`] of one.
pub fn normalize_check(d: &ProbDist) -> bool {
    let mut ok = true;
    d.for_each(|_, m| ok &= m.is_finite() && m >= 0.0);
    if let ProbDist::Sparse { vocab_size, mass } = d {
        ok &= mass.len() <= *vocab_size && mass.keys().all(|&i| (i as usize) < *vocab_size);
    }
    ok && (d.total() - 1.0).abs() <= SIMPLEX_TOL
}

/// `w * a + (1 - w) * b`. Sparse + sparse stays sparse; anything involving a
/// dense input becomes dense.
pub fn mix(a: &ProbDist, b: &ProbDist, w: f64) -> Result<ProbDist> {
    if a.vocab_size() != b.vocab_size() {
        return Err(Error::Dimension {
            expected: a.vocab_size(),
            got: b.vocab_size(),
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Validation(format!(
            "mixing weight {w} outside [0, 1]"
        )));
    }
    if w == 1.0 {
        return Ok(a.clone());
    }
    if w == 0.0 {
        return Ok(b.clone());
    }
    let v = 1.0 - w;
    Ok(match (a, b) {
        (
            ProbDist::Sparse {
                vocab_size,
                mass: ma,
            },
            ProbDist::Sparse { mass: mb, .. },
        ) => {
            let mut mass = BTreeMap::new();
            for (&i, &m) in ma {
                mass.insert(i, w * m + v * mb.get(&i).copied().unwrap_or(0.0));
            }
            for (&i, &m) in mb {
                mass.entry(i).or_insert_with(|| w * 0.0 + v * m);
            }
            ProbDist::Sparse {
                vocab_size: *vocab_size,
                mass,
            }
        }
        _ => {
            let da = a.to_dense();
            let db = b.to_dense();
            ProbDist::Dense(da.iter().zip(&db).map(|(&x, &y)| w * x + v * y).collect())
        }
    })
}

/// Per-token natural-log likelihoods at the scored positions of a text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLikSequence(pub Vec<f64>);

impl LogLikSequence {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sparse(v: usize, pairs: &[(u32, f64)]) -> ProbDist {
        ProbDist::Sparse {
            vocab_size: v,
            mass: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let a = ProbDist::Dense(vec![0.1, 0.2, 0.7]);
        let b = sparse(3, &[(2, 1.0)]);
        assert_eq!(mix(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn mix_half_of_two_points() {
        let a = ProbDist::point(2, 0);
        let b = ProbDist::point(2, 1);
        let m = mix(&a, &b, 0.5).unwrap();
        assert_eq!(m.to_dense(), vec![0.5, 0.5]);
    }

    #[test]
    fn mix_rejects_mismatched_sizes() {
        let err = mix(&ProbDist::uniform(3), &ProbDist::uniform(4), 0.5).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 3,
                got: 4
            }
        ));
    }

    #[test]
    fn normalize_check_cases() {
        assert!(normalize_check(&ProbDist::uniform(4)));
        assert!(!normalize_check(&ProbDist::Dense(vec![0.3, 0.3, 0.3])));
        assert!(!normalize_check(&ProbDist::Dense(vec![1.5, -0.5])));
        assert!(!normalize_check(&sparse(2, &[(5, 1.0)])));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_tiny() {
        assert!(Vocabulary::new(vec!["a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let v = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.token(0), Some("a"));
    }

    #[test]
    fn sequence_needs_a_scored_position() {
        assert!(TokenSequence::new(vec![1, 2], 0, 2).is_err());
        let s = TokenSequence::new(vec![1, 2, 3], 0, 1).unwrap();
        assert_eq!(s.scored_ids(), &[2, 3]);
        assert_eq!(s.context(2, 8), vec![0, 1, 2]);
        assert_eq!(s.context(2, 2), vec![1, 2]);
        assert!(s.validate(3).is_err());
        assert!(s.validate(4).is_ok());
    }

    fn arb_dist(v: usize) -> impl Strategy<Value = ProbDist> {
        (
            proptest::collection::vec(0.0f64..1.0, v),
            any::<bool>(),
            0usize..v,
        )
            .prop_map(move |(raw, dense, drop_below)| {
                let mut raw = raw;
                // sparsify a little so both representations see zeros
                for x in raw.iter_mut().take(drop_below / 2) {
                    *x = 0.0;
                }
                if raw.iter().all(|&x| x == 0.0) {
                    raw[v - 1] = 1.0;
                }
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
                if dense {
                    ProbDist::Dense(p)
                } else {
                    ProbDist::Sparse {
                        vocab_size: v,
                        mass: p
                            .iter()
                            .enumerate()
                            .filter(|(_, &m)| m > 0.0)
                            .map(|(i, &m)| (i as u32, m))
                            .collect(),
                    }
                }
            })
    }

    fn as_dense(d: &ProbDist) -> ProbDist {
        ProbDist::Dense(d.to_dense())
    }

    fn as_sparse(d: &ProbDist) -> ProbDist {
        ProbDist::Sparse {
            vocab_size: d.vocab_size(),
            mass: d
                .to_dense()
                .into_iter()
                .enumerate()
                .filter(|(_, m)| *m > 0.0)
                .map(|(i, m)| (i as u32, m))
                .collect(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn mix_output_is_a_distribution(a in arb_dist(8), b in arb_dist(8), w in 0.0f64..=1.0) {
            prop_assert!(normalize_check(&mix(&a, &b, w).unwrap()));
        }

        #[test]
        fn mix_is_idempotent(a in arb_dist(6), w in 0.0f64..=1.0) {
            let m = mix(&a, &a, w).unwrap().to_dense();
            for (x, y) in m.iter().zip(a.to_dense()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }

        #[test]
        fn representation_does_not_change_mix(a in arb_dist(7), b in arb_dist(7), w in 0.0f64..=1.0) {
            let reference = mix(&as_dense(&a), &as_dense(&b), w).unwrap().to_dense();
            for (x, y) in [(as_sparse(&a), as_sparse(&b)), (as_sparse(&a), as_dense(&b)), (as_dense(&a), as_sparse(&b))] {
                let got = mix(&x, &y, w).unwrap().to_dense();
                for (g, r) in got.iter().zip(&reference) {
                    prop_assert!((g - r).abs() <= 1e-12);
                }
            }
        }
    }
}
