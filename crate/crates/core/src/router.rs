//! Hard routing of a text to one domain expert by majority vote among the
//! nearest labeled sentence embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{align_sequence, AlignedSequence, LambdaMode, RetrievalParams};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::hash::{hash_tokens, mix64};
use crate::index::{IndexMode, VectorIndex};
use crate::prob::TokenSequence;
use crate::provider::LmProvider;

pub const DEFAULT_K_R: usize = 15;

/// Bag of hashed character n-grams (lengths `n_min..=n_max`), L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramEmbedder {
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        Self {
            dim: 256,
            n_min: 3,
            n_max: 5,
            seed: 0x726f_7574,
        }
    }
}

impl NgramEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f32> {
        let chars: Vec<u32> = std::iter::once(' ')
            .chain(text.chars())
            .chain(std::iter::once(' '))
            .map(u32::from)
            .collect();
        let mut v = vec![0f64; self.dim];
        for n in self.n_min..=self.n_max.min(chars.len()) {
            for gram in chars.windows(n) {
                let h = hash_tokens(self.seed, gram);
                let slot = (h % self.dim as u64) as usize;
                let sign = if mix64(h) & 1 == 0 { 1.0 } else { -1.0 };
                v[slot] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

/// Labeled sentence embeddings. Expert index `m` is the position of the
/// expert's name in sorted order.
#[derive(Debug, Clone)]
pub struct RoutingStore {
    index: VectorIndex,
    labels: Vec<usize>,
    experts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    /// Vote share per expert, in expert-index order.
    pub scores: Vec<f64>,
    pub expert: usize,
    pub expert_name: String,
}

/// Builds a store from `(domain, embedding)` pairs. Every name in `experts`
/// must have at least one sentence.
pub fn build_routing_store(
    experts: &[String],
    sentences: &[(String, Vec<f32>)],
) -> Result<RoutingStore> {
    let mut names = experts.to_vec();
    names.sort();
    names.dedup();
    if names.is_empty() {
        return Err(Error::Config("no experts declared".into()));
    }
    let Some(dim) = sentences.first().map(|(_, e)| e.len()) else {
        return Err(Error::EmptyDatastore("no routing sentences".into()));
    };
    let mut keys = Vec::with_capacity(sentences.len() * dim);
    let mut labels = Vec::with_capacity(sentences.len());
    let mut counts = vec![0usize; names.len()];
    for (name, emb) in sentences {
        let m = names.binary_search(name).map_err(|_| {
            Error::Validation(format!("sentence labeled with unknown expert {name:?}"))
        })?;
        if emb.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: emb.len(),
            });
        }
        counts[m] += 1;
        labels.push(m);
        keys.extend_from_slice(emb);
    }
    if let Some(m) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "expert {:?} has no routing sentences",
            names[m]
        )));
    }
    let values = labels.iter().map(|&m| m as u32).collect();
    let index = VectorIndex::build(keys, values, dim, IndexMode::Exact)?;
    Ok(RoutingStore {
        index,
        labels,
        experts: names,
    })
}

impl RoutingStore {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn experts(&self) -> &[String] {
        &self.experts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Vote shares among the `k_r` nearest sentences; ties go to the lowest index.
pub fn route(store: &RoutingStore, embedding: &[f32], k_r: usize) -> Result<RouterDecision> {
    let nbrs = store.index.search(embedding, k_r)?;
    let mut votes = vec![0usize; store.experts.len()];
    for &row in &nbrs.indices {
        votes[store.labels[row]] += 1;
    }
    let mut expert = 0;
    for (m, &v) in votes.iter().enumerate() {
        if v > votes[expert] {
            expert = m;
        }
    }
    Ok(RouterDecision {
        scores: votes.iter().map(|&v| v as f64 / k_r as f64).collect(),
        expert,
        expert_name: store.experts[expert].clone(),
    })
}

/// Routes once on the whole-text embedding, then aligns against the chosen
/// expert's datastore.
#[allow(clippy::too_many_arguments)]
pub fn route_and_align<P: LmProvider + ?Sized>(
    experts: &BTreeMap<String, Datastore>,
    store: &RoutingStore,
    k_r: usize,
    provider: &P,
    text_embedding: &[f32],
    seq: &TokenSequence,
    params: &RetrievalParams,
    lambda: LambdaMode,
) -> Result<(RouterDecision, AlignedSequence)> {
    if let Some(missing) = store.experts.iter().find(|e| !experts.contains_key(*e)) {
        return Err(Error::Config(format!(
            "no datastore registered for expert {missing:?}"
        )));
    }
    let decision = route(store, text_embedding, k_r)?;
    let aln = align_sequence(
        provider,
        &experts[&decision.expert_name],
        seq,
        params,
        lambda,
    )?;
    Ok((decision, aln))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn line(dist: f32) -> Vec<f32> {
        vec![dist, 0.0]
    }

    #[test]
    fn shape_and_duplicates() {
        let e = NgramEmbedder::default();
        let mut sents = Vec::new();
        for d in ["a", "b"] {
            for i in 0..5 {
                sents.push((d.to_string(), e.embed(&format!("{d} sentence {}", i % 3))));
            }
        }
        let store = build_routing_store(&names(&["b", "a"]), &sents).unwrap();
        assert_eq!(store.len(), 10);
        assert_eq!(store.experts(), &names(&["a", "b"]));
        assert_eq!(e.embed("same words"), e.embed("same words"));
    }

    #[test]
    fn empty_domain_is_an_error() {
        let sents = vec![("a".to_string(), line(0.0))];
        assert!(matches!(
            build_routing_store(&names(&["a", "b"]), &sents),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_routing_store(&names(&["a"]), &[("c".to_string(), line(0.0))]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn vote_examples() {
        let sents = vec![
            ("e1".to_string(), line(0.0)),
            ("e1".to_string(), line(1.0)),
            ("e2".to_string(), line(2.0)),
            ("e2".to_string(), line(9.0)),
        ];
        let store = build_routing_store(&names(&["e1", "e2"]), &sents).unwrap();
        let d = route(&store, &line(0.1), 3).unwrap();
        assert_eq!(d.scores, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(d.expert, 0);
        let d = route(&store, &line(0.1), 1).unwrap();
        assert_eq!(d.scores, vec![1.0, 0.0]);
        // nearest two are one of each
        let d = route(&store, &line(1.6), 2).unwrap();
        assert_eq!(d.scores, vec![0.5, 0.5]);
        assert_eq!(d.expert_name, "e1");
        // the whole store reproduces the global proportions
        let d = route(&store, &line(100.0), 4).unwrap();
        assert_eq!(d.scores, vec![0.5, 0.5]);
    }

    #[test]
    fn row_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let experts = names(&["x", "y", "z"]);
        let mut sents: Vec<(String, Vec<f32>)> = (0..60)
            .map(|i| {
                let e = experts[i % 3].clone();
                (e, (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            })
            .collect();
        let store = build_routing_store(&experts, &sents).unwrap();
        sents.shuffle(&mut rng);
        let shuffled = build_routing_store(&experts, &sents).unwrap();
        for _ in 0..50 {
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            assert_eq!(
                route(&store, &q, 7).unwrap(),
                route(&shuffled, &q, 7).unwrap()
            );
        }
    }

    #[test]
    fn relabeling_permutes_the_choice() {
        let sents = vec![
            ("a".to_string(), line(0.0)),
            ("b".to_string(), line(5.0)),
            ("b".to_string(), line(5.5)),
        ];
        let store = build_routing_store(&names(&["a", "b"]), &sents).unwrap();
        let swapped: Vec<_> = sents
            .iter()
            .map(|(n, e)| (if n == "a" { "b" } else { "a" }.to_string(), e.clone()))
            .collect();
        let store2 = build_routing_store(&names(&["a", "b"]), &swapped).unwrap();
        for q in [0.2f32, 5.2] {
            let d1 = route(&store, &line(q), 1).unwrap();
            let d2 = route(&store2, &line(q), 1).unwrap();
            assert_eq!(d1.expert, 1 - d2.expert);
        }
    }
}
