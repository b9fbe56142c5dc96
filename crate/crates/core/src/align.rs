//! Retrieval weights, kNN-induced distributions, effective-neighborhood
//! diagnostics and the interpolation of proxy predictions with retrieval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::index::NeighborSet;
use crate::prob::{mix, ProbDist, TokenSequence};
use crate::provider::{LmProvider, LmStep};

pub const DEFAULT_K_GRID: [usize; 7] = [16, 32, 64, 128, 256, 512, 1024];
pub const DEFAULT_TAU_GRID: [f64; 6] = [0.1, 0.5, 1.0, 5.0, 10.0, 50.0];
pub const DEFAULT_K: usize = 256;
pub const DEFAULT_TAU: f64 = 5.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_C: f64 = 1.0;

/// How `(k, τ)` is chosen per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub selection: Selection,
    /// Used when `selection` is fixed.
    pub k: usize,
    pub tau: f64,
    pub k_grid: Vec<usize>,
    pub tau_grid: Vec<f64>,
    /// Weight of the locality term in the surrogate.
    pub c: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            selection: Selection::Adaptive,
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            k_grid: DEFAULT_K_GRID.to_vec(),
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            c: DEFAULT_C,
        }
    }
}

impl RetrievalParams {
    pub fn fixed(k: usize, tau: f64) -> Self {
        Self {
            selection: Selection::Fixed,
            k,
            tau,
            ..Default::default()
        }
    }

    pub fn adaptive(k_grid: Vec<usize>, tau_grid: Vec<f64>) -> Self {
        Self {
            selection: Selection::Adaptive,
            k_grid,
            tau_grid,
            ..Default::default()
        }
    }

    /// Number of neighbors retrieved per query.
    pub fn k_max(&self) -> usize {
        match self.selection {
            Selection::Fixed => self.k,
            Selection::Adaptive => self.k_grid.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad_tau = |t: f64| !(t.is_finite() && t > 0.0);
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::Config(format!(
                "c must be finite and non-negative, got {}",
                self.c
            )));
        }
        match self.selection {
            Selection::Fixed => {
                if self.k == 0 {
                    return Err(Error::Config("k must be at least 1".into()));
                }
                if bad_tau(self.tau) {
                    return Err(Error::Config(format!(
                        "tau must be positive, got {}",
                        self.tau
                    )));
                }
            }
            Selection::Adaptive => {
                if self.k_grid.is_empty() || self.tau_grid.is_empty() {
                    return Err(Error::Config("candidate grids must be nonempty".into()));
                }
                if self.k_grid[0] == 0 || self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "k_grid must be strictly ascending and positive".into(),
                    ));
                }
                if self.tau_grid.iter().any(|&t| bad_tau(t))
                    || self.tau_grid.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::Config(
                        "tau_grid must be strictly ascending and positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Interpolation weight on the proxy distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed(f64),
    /// Sigmoid of each token's surrogate minus the text's median surrogate.
    #[default]
    Adaptive,
}

impl LambdaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaMode::Fixed(l) if !(0.0..=1.0).contains(&l) => {
                Err(Error::Config(format!("lambda must lie in [0, 1], got {l}")))
            }
            _ => Ok(()),
        }
    }
}

/// Normalized `exp(-d_j / τ)`, evaluated relative to the smallest distance.
pub fn retrieval_weights(nbrs: &NeighborSet, tau: f64) -> Vec<f64> {
    weights_from_distances(&nbrs.distances, tau)
}

fn weights_from_distances(distances: &[f64], tau: f64) -> Vec<f64> {
    let d0 = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|&d| (-(d - d0) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Sparse distribution putting each neighbor's weight on its next token.
pub fn knn_distribution(nbrs: &NeighborSet, weights: &[f64], vocab_size: usize) -> ProbDist {
    let mut mass = BTreeMap::new();
    for (&tok, &w) in nbrs.next_tokens.iter().zip(weights) {
        *mass.entry(tok).or_insert(0.0) += w;
    }
    ProbDist::Sparse { vocab_size, mass }
}

/// `(k_eff, r_eff)`: inverse sum of squared weights and weighted mean distance.
pub fn effective_stats(weights: &[f64], distances: &[f64]) -> (f64, f64) {
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    let r: f64 = weights.iter().zip(distances).map(|(w, d)| w * d).sum();
    (1.0 / s2, r)
}

/// Running sums over a ranked neighbor list for one temperature. Both the
/// single-pair surrogate and the grid sweep go through this so that a prefix
/// evaluation and a fresh evaluation agree bit for bit.
struct Accum {
    d0: f64,
    tau: f64,
    z: f64,
    s2: f64,
    r: f64,
    n: usize,
}

impl Accum {
    fn new(d0: f64, tau: f64) -> Self {
        Self {
            d0,
            tau,
            z: 0.0,
            s2: 0.0,
            r: 0.0,
            n: 0,
        }
    }

    fn push(&mut self, d: f64) {
        let e = (-(d - self.d0) / self.tau).exp();
        self.z += e;
        self.s2 += e * e;
        self.r += e * d;
        self.n += 1;
    }

    fn stats(&self) -> (f64, f64) {
        let k_eff = (self.z * self.z / self.s2).clamp(1.0, self.n as f64);
        (k_eff, self.r / self.z)
    }

    fn surrogate(&self, c: f64) -> f64 {
        let (k_eff, r_eff) = self.stats();
        c * r_eff + 1.0 / k_eff.sqrt()
    }
}

/// `c · r_eff + 1/√k_eff` on the first `k` ranked neighbors with temperature `τ`.
pub fn surrogate(k: usize, tau: f64, ranked: &NeighborSet, c: f64) -> f64 {
    let k = k.min(ranked.len());
    let mut acc = Accum::new(ranked.distances[0], tau);
    for &d in &ranked.distances[..k] {
        acc.push(d);
    }
    acc.surrogate(c)
}

/// Chosen `(k*, τ*)` and its surrogate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub k: usize,
    pub tau: f64,
    pub u: f64,
}

/// Exhaustive argmin of the surrogate over `k_grid × tau_grid`, evaluated on
/// prefixes of one ranked list. Ties go to the smaller `k`, then smaller `τ`.
/// Grid sizes larger than the list are skipped.
pub fn select_adaptive(ranked: &NeighborSet, k_grid: &[usize], tau_grid: &[f64], c: f64) -> Choice {
    let mut table = vec![vec![f64::INFINITY; tau_grid.len()]; k_grid.len()];
    let k_top = k_grid
        .iter()
        .copied()
        .filter(|&k| k <= ranked.len())
        .max()
        .unwrap_or(0);
    for (t, &tau) in tau_grid.iter().enumerate() {
        let mut acc = Accum::new(ranked.distances[0], tau);
        let mut next = 0;
        for &d in &ranked.distances[..k_top] {
            acc.push(d);
            while next < k_grid.len() && k_grid[next] < acc.n {
                next += 1;
            }
            if next < k_grid.len() && k_grid[next] == acc.n {
                table[next][t] = acc.surrogate(c);
            }
        }
    }
    let mut best = Choice {
        k: k_grid[0],
        tau: tau_grid[0],
        u: f64::INFINITY,
    };
    for (ki, row) in table.iter().enumerate() {
        for (ti, &u) in row.iter().enumerate() {
            if u < best.u {
                best = Choice {
                    k: k_grid[ki],
                    tau: tau_grid[ti],
                    u,
                };
            }
        }
    }
    best
}

/// Median with the mean of the two middle values for even counts.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-token proxy weights `σ(U*_i − median(U*))`.
pub fn adaptive_lambda(u_stars: &[f64]) -> Vec<f64> {
    if u_stars.is_empty() {
        return Vec::new();
    }
    let m = median(u_stars);
    u_stars.iter().map(|&u| sigmoid(u - m)).collect()
}

/// Retrieval diagnostics of one scored position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub k: usize,
    pub tau: f64,
    pub k_eff: f64,
    pub r_eff: f64,
    pub u: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPosition {
    /// Interpolated next-token distribution.
    pub dist: ProbDist,
    pub token: u32,
    pub diag: Option<Diagnostics>,
}

impl AlignedPosition {
    /// Mass of the observed token, before any floor.
    pub fn observed_prob(&self) -> f64 {
        self.dist.prob(self.token)
    }
}

/// One record per scored position of a text.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub positions: Vec<AlignedPosition>,
}

impl AlignedSequence {
    /// The proxy's own predictions, no retrieval.
    pub fn unaligned(steps: &[LmStep], seq: &TokenSequence) -> Result<Self> {
        check_steps(steps, seq)?;
        Ok(Self {
            positions: (seq.prompt_len()..seq.len())
                .map(|i| AlignedPosition {
                    dist: steps[i].dist.clone(),
                    token: seq.ids()[i],
                    diag: None,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mean_diagnostics(&self) -> Option<Diagnostics> {
        let ds: Vec<&Diagnostics> = self
            .positions
            .iter()
            .filter_map(|p| p.diag.as_ref())
            .collect();
        if ds.is_empty() {
            return None;
        }
        let n = ds.len() as f64;
        let avg = |f: fn(&Diagnostics) -> f64| ds.iter().map(|d| f(d)).sum::<f64>() / n;
        Some(Diagnostics {
            k: (ds.iter().map(|d| d.k).sum::<usize>() as f64 / n).round() as usize,
            tau: avg(|d| d.tau),
            k_eff: avg(|d| d.k_eff),
            r_eff: avg(|d| d.r_eff),
            u: avg(|d| d.u),
            lambda: avg(|d| d.lambda),
        })
    }
}

fn check_steps(steps: &[LmStep], seq: &TokenSequence) -> Result<()> {
    if steps.len() != seq.len() {
        return Err(Error::Validation(format!(
            "provider returned {} steps for {} tokens",
            steps.len(),
            seq.len()
        )));
    }
    Ok(())
}

/// Aligns precomputed proxy steps (from `lm_steps_windowed` with the
/// datastore window) against a datastore.
pub fn align_steps(
    steps: &[LmStep],
    datastore: &Datastore,
    seq: &TokenSequence,
    params: &RetrievalParams,
    lambda: LambdaMode,
) -> Result<AlignedSequence> {
    params.validate()?;
    lambda.validate()?;
    check_steps(steps, seq)?;
    let v = datastore.vocab_size();
    seq.validate(v)?;
    let k_max = params.k_max();
    if datastore.len() < k_max {
        return Err(Error::Config(format!(
            "datastore holds {} entries but k_max is {k_max}",
            datastore.len()
        )));
    }

    let mut knn = Vec::with_capacity(seq.scored_len());
    let mut diags = Vec::with_capacity(seq.scored_len());
    for step in &steps[seq.prompt_len()..] {
        if step.dist.vocab_size() != v {
            return Err(Error::VocabularyMismatch(format!(
                "proxy vocabulary {} differs from datastore vocabulary {v}",
                step.dist.vocab_size()
            )));
        }
        let ranked = datastore.search(&step.embedding, k_max)?;
        let choice = match params.selection {
            Selection::Fixed => Choice {
                k: params.k,
                tau: params.tau,
                u: surrogate(params.k, params.tau, &ranked, params.c),
            },
            Selection::Adaptive => {
                select_adaptive(&ranked, &params.k_grid, &params.tau_grid, params.c)
            }
        };
        let nbrs = ranked.prefix(choice.k);
        let w = retrieval_weights(&nbrs, choice.tau);
        let (k_eff, r_eff) = effective_stats(&w, &nbrs.distances);
        knn.push(knn_distribution(&nbrs, &w, v));
        diags.push(Diagnostics {
            k: choice.k,
            tau: choice.tau,
            k_eff,
            r_eff,
            u: choice.u,
            lambda: 0.0,
        });
    }

    let lambdas = match lambda {
        LambdaMode::Fixed(l) => vec![l; diags.len()],
        LambdaMode::Adaptive => adaptive_lambda(&diags.iter().map(|d| d.u).collect::<Vec<_>>()),
    };
    let positions = steps[seq.prompt_len()..]
        .iter()
        .zip(seq.scored_ids())
        .zip(knn.iter().zip(diags))
        .zip(lambdas)
        .map(|(((step, &token), (pk, mut diag)), l)| {
            diag.lambda = l;
            Ok(AlignedPosition {
                dist: mix(&step.dist, pk, l)?,
                token,
                diag: Some(diag),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AlignedSequence { positions })
}

pub fn align_sequence<P: LmProvider + ?Sized>(
    provider: &P,
    datastore: &Datastore,
    seq: &TokenSequence,
    params: &RetrievalParams,
    lambda: LambdaMode,
) -> Result<AlignedSequence> {
    if provider.vocab_size() != datastore.vocab_size() {
        return Err(Error::VocabularyMismatch(format!(
            "provider vocabulary {} differs from datastore vocabulary {}",
            provider.vocab_size(),
            datastore.vocab_size()
        )));
    }
    let steps = provider.lm_steps_windowed(seq, datastore.window())?;
    align_steps(&steps, datastore, seq, params, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{build_datastore, BuildConfig};
    use crate::index::{IndexMode, VectorIndex};
    use crate::prob::{normalize_check, Vocabulary};
    use crate::provider::{ToyLm, ToyLmConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nbrs(distances: &[f64], tokens: &[u32]) -> NeighborSet {
        NeighborSet {
            indices: (0..distances.len()).collect(),
            distances: distances.to_vec(),
            next_tokens: tokens.to_vec(),
        }
    }

    #[test]
    fn weights_examples() {
        let w = retrieval_weights(&nbrs(&[2.0, 2.0, 2.0, 2.0], &[0; 4]), 0.3);
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = retrieval_weights(&nbrs(&[0.0, 2f64.ln()], &[0, 1]), 1.0);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = retrieval_weights(&nbrs(&[0.0, 1.0, 7.0], &[0; 3]), 1e9);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn knn_distribution_examples() {
        let n = nbrs(&[1.0, 1.0, 1.0], &[4, 4, 7]);
        let p = knn_distribution(&n, &retrieval_weights(&n, 1.0), 10);
        assert!((p.prob(4) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.prob(7) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.support(), vec![4, 7]);

        let n = nbrs(&[0.1, 0.5, 3.0], &[2, 2, 2]);
        assert_eq!(
            knn_distribution(&n, &retrieval_weights(&n, 0.7), 5),
            ProbDist::point(5, 2)
        );

        for tau in [0.01, 1.0, 100.0] {
            let n = nbrs(&[4.2], &[3]);
            assert_eq!(
                knn_distribution(&n, &retrieval_weights(&n, tau), 5),
                ProbDist::point(5, 3)
            );
        }
    }

    #[test]
    fn effective_stats_examples() {
        let (k, _) = effective_stats(&[0.2; 5], &[1.0; 5]);
        assert!((k - 5.0).abs() < 1e-12);
        let (k, r) = effective_stats(&[1.0, 0.0, 0.0], &[0.5, 1.0, 2.0]);
        assert_eq!((k, r), (1.0, 0.5));
        let (k, r) = effective_stats(&[0.5, 0.5], &[1.0, 3.0]);
        assert_eq!((k, r), (2.0, 2.0));
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate(1, 0.5, &nbrs(&[2.5], &[0]), 1.0), 3.5);
        let u = surrogate(2, 1e12, &nbrs(&[1.0, 3.0], &[0, 0]), 1.0);
        assert!((u - (2.0 + 1.0 / 2f64.sqrt())).abs() < 1e-9);
        // with c = 0 the widest, flattest neighborhood wins
        let n = nbrs(&[0.1, 0.2, 0.4, 0.8], &[0; 4]);
        let pick = select_adaptive(&n, &[1, 2, 4], &[0.1, 1.0, 10.0], 0.0);
        assert_eq!((pick.k, pick.tau), (4, 10.0));
    }

    #[test]
    fn select_adaptive_examples() {
        let n = nbrs(&[0.3, 0.9], &[0, 1]);
        let pick = select_adaptive(&n, &[2], &[1.0], 1.0);
        assert_eq!((pick.k, pick.tau), (2, 1.0));
        assert_eq!(pick.u, surrogate(2, 1.0, &n, 1.0));

        let zeros = nbrs(&[0.0; 8], &[0; 8]);
        let pick = select_adaptive(&zeros, &[2, 4, 8], &[0.5, 1.0], 1.0);
        assert_eq!((pick.k, pick.tau), (8, 0.5));
    }

    #[test]
    fn adaptive_lambda_examples() {
        let l = adaptive_lambda(&[0.0, 1.0, 2.0]);
        assert!((l[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(l[1], 0.5);
        assert!((l[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(adaptive_lambda(&[3.0; 4]), vec![0.5; 4]);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(adaptive_lambda(&[1.0, 2.0, 3.0, 4.0])[1], sigmoid(-0.5));
    }

    fn sorted_distances(raw: Vec<f64>) -> Vec<f64> {
        let mut d = raw;
        d.sort_by(f64::total_cmp);
        d
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn weights_are_normalized(
            raw in prop::collection::vec(0.0f64..1e4, 1..300),
            log_tau in -3.0f64..3.0,
        ) {
            let d = sorted_distances(raw);
            let tau = 10f64.powf(log_tau);
            let w = weights_from_distances(&d, tau);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let (k_eff, r_eff) = effective_stats(&w, &d);
            prop_assert!(k_eff >= 1.0 - 1e-9 && k_eff <= d.len() as f64 + 1e-9);
            prop_assert!(r_eff >= d[0] - 1e-9 * d[0].max(1.0));
            prop_assert!(r_eff <= d[d.len() - 1] + 1e-9 * d[d.len() - 1].max(1.0));
        }

        #[test]
        fn sharper_weights_concentrate(
            raw in prop::collection::vec(0.0f64..10.0, 2..64),
            taus in prop::collection::vec(0.001f64..1000.0, 2..6),
        ) {
            let d = sorted_distances(raw);
            let mut taus = taus;
            taus.sort_by(f64::total_cmp);
            let n = nbrs(&d, &vec![0; d.len()]);
            let ks: Vec<f64> = taus.iter().map(|&t| {
                let w = retrieval_weights(&n, t);
                effective_stats(&w, &d).0
            }).collect();
            for pair in ks.windows(2) {
                prop_assert!(pair[0] <= pair[1] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn lambda_lies_in_open_interval(u in prop::collection::vec(-20.0f64..20.0, 1..200)) {
            let l = adaptive_lambda(&u);
            prop_assert!(l.iter().all(|&x| x > 0.0 && x < 1.0));
            let mut distinct = u.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assume!(distinct.len() == u.len());
            let low = l.iter().filter(|&&x| x <= 0.5).count();
            prop_assert!((low as f64 - u.len() as f64 / 2.0).abs() <= 1.0);
        }
    }

    /// Brute-force oracle: retrieve again for every candidate pair.
    fn reretrieval_argmin(
        index: &VectorIndex,
        q: &[f32],
        k_grid: &[usize],
        tau_grid: &[f64],
        c: f64,
    ) -> Choice {
        let mut best: Option<Choice> = None;
        for &k in k_grid {
            let fresh = index.search(q, k).unwrap();
            for &tau in tau_grid {
                let u = surrogate(k, tau, &fresh, c);
                if best.is_none_or(|b| u < b.u) {
                    best = Some(Choice { k, tau, u });
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn prefix_selection_matches_reretrieval() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let dim = [2, 8, 16][rng.random_range(0..3)];
            let n = rng.random_range(64..400);
            let keys: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let values: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let index = VectorIndex::build(keys, values, dim, IndexMode::Exact).unwrap();
            let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k_grid = [4, 8, 16, 32, 64];
            let tau_grid = [0.05, 0.1, 0.5, 1.0, 5.0];
            let c = rng.random_range(0.0..3.0);
            let ranked = index.search(&q, 64).unwrap();
            let fast = select_adaptive(&ranked, &k_grid, &tau_grid, c);
            assert_eq!(fast, reretrieval_argmin(&index, &q, &k_grid, &tau_grid, c));
        }
    }

    fn toy_setup() -> (ToyLm, Vec<TokenSequence>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corpus: Vec<_> = (0..20)
            .map(|_| {
                let ids = (0..30).map(|_| rng.random_range(1..6)).collect();
                TokenSequence::new(ids, 0, 0).unwrap()
            })
            .collect();
        let cfg = ToyLmConfig {
            embed_dim: 16,
            ..Default::default()
        };
        let lm = ToyLm::train(Vocabulary::synthetic(6).unwrap(), &corpus, cfg).unwrap();
        (lm, corpus)
    }

    #[test]
    fn lambda_one_reproduces_the_proxy() {
        let (lm, corpus) = toy_setup();
        let ds = build_datastore(&lm, &corpus, &BuildConfig::default()).unwrap();
        let seq = TokenSequence::new(corpus[3].ids().to_vec(), 0, 4).unwrap();
        let params = RetrievalParams::adaptive(vec![4, 8, 16], vec![0.5, 1.0]);
        let aln = align_sequence(&lm, &ds, &seq, &params, LambdaMode::Fixed(1.0)).unwrap();
        let raw = AlignedSequence::unaligned(&lm.lm_steps(&seq).unwrap(), &seq).unwrap();
        assert_eq!(aln.len(), seq.scored_len());
        for (a, r) in aln.positions.iter().zip(&raw.positions) {
            assert_eq!(a.dist, r.dist);
            assert_eq!(a.token, r.token);
        }
    }

    #[test]
    fn self_retrieval_gives_a_point_mass_on_the_truth() {
        // every context distinct, so the nearest key is the scored context itself
        let ids: Vec<u32> = (1..20).collect();
        let seq = TokenSequence::new(ids, 0, 0).unwrap();
        let lm = ToyLm::train(
            Vocabulary::synthetic(20).unwrap(),
            std::slice::from_ref(&seq),
            ToyLmConfig::default(),
        )
        .unwrap();
        let ds = build_datastore(&lm, std::slice::from_ref(&seq), &BuildConfig::default()).unwrap();
        let scored = TokenSequence::new(seq.ids().to_vec(), 0, 1).unwrap();
        let lambda = 0.3;
        let aln = align_sequence(
            &lm,
            &ds,
            &scored,
            &RetrievalParams::fixed(1, 1.0),
            LambdaMode::Fixed(lambda),
        )
        .unwrap();
        let proxy = lm.lm_steps(&scored).unwrap();
        for (p, step) in aln.positions.iter().zip(&proxy[1..]) {
            let expected = lambda * step.dist.prob(p.token) + (1.0 - lambda);
            assert!((p.observed_prob() - expected).abs() < 1e-12);
            assert!(p.observed_prob().ln() >= (1.0 - lambda).ln());
        }
    }

    #[test]
    fn alignment_is_deterministic_and_valid() {
        let (lm, corpus) = toy_setup();
        let ds = build_datastore(&lm, &corpus, &BuildConfig::default()).unwrap();
        let params = RetrievalParams::adaptive(vec![4, 8, 16, 32], vec![0.1, 1.0, 10.0]);
        let a = align_sequence(&lm, &ds, &corpus[0], &params, LambdaMode::Adaptive).unwrap();
        let b = align_sequence(&lm, &ds, &corpus[0], &params, LambdaMode::Adaptive).unwrap();
        assert_eq!(a, b);
        for p in &a.positions {
            assert!(normalize_check(&p.dist));
            let d = p.diag.as_ref().unwrap();
            assert!(d.k_eff >= 1.0 && d.k_eff <= d.k as f64);
            assert!(d.lambda > 0.0 && d.lambda < 1.0);
        }
    }

    #[test]
    fn small_datastore_and_vocabulary_mismatch_are_config_errors() {
        let (lm, corpus) = toy_setup();
        let ds = build_datastore(&lm, &corpus[..1], &BuildConfig::default()).unwrap();
        let err = align_sequence(
            &lm,
            &ds,
            &corpus[0],
            &RetrievalParams::default(),
            LambdaMode::Adaptive,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let other = ToyLm::train(
            Vocabulary::synthetic(9).unwrap(),
            &corpus,
            ToyLmConfig {
                embed_dim: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let err = align_sequence(
            &other,
            &ds,
            &corpus[0],
            &RetrievalParams::fixed(2, 1.0),
            LambdaMode::Adaptive,
        )
        .unwrap_err();
        assert!(matches!(err, Error::VocabularyMismatch(_)));
    }
}
