//! Metrics, synthetic benchmarks, attribution and bound validation.

pub mod bound;
pub mod experiments;
pub mod metrics;
pub mod synth;

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_sequence, align_steps, AlignedSequence, LambdaMode, RetrievalParams};
use crate::datastore::Datastore;
use crate::detect::{
    aligned_loglik, binoculars_score, clip_and_mean, fast_detect_score, DetectorKind,
};
use crate::error::Result;
use crate::prob::{LogLikSequence, ProbDist, TokenSequence};
use crate::provider::LmProvider;

pub use bound::{run_bound_experiment, validate_bound, BoundConfig, BoundReport, BoundSamples};
pub use metrics::{auroc, confusion, f1, f1_sweep, roc_points, RocPoint, ThresholdChoice};
pub use synth::{
    multi_source, render, synth_benchmark, DetectionBench, MultiSource, SynthBenchConfig,
};

/// Detector scores of one text, oriented so that larger means "more LLM-like"
/// only after applying each detector's polarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorScores {
    pub likelihood: f64,
    pub fast_detect: f64,
    pub binoculars: f64,
}

impl DetectorScores {
    pub fn get(&self, kind: DetectorKind) -> f64 {
        match kind {
            DetectorKind::Likelihood => self.likelihood,
            DetectorKind::FastDetect => self.fast_detect,
            DetectorKind::Binoculars => self.binoculars,
        }
    }
}

/// Scores every detector on one aligned sequence with `reference` as the
/// reference model's distributions.
pub fn score_all(
    aln: &AlignedSequence,
    reference: &[ProbDist],
    gamma: Option<f64>,
    eps: f64,
) -> Result<DetectorScores> {
    let (_, ll) = aligned_loglik(aln, eps);
    Ok(DetectorScores {
        likelihood: clip_and_mean(&ll, gamma),
        fast_detect: fast_detect_score(aln, reference, gamma, eps)?,
        binoculars: binoculars_score(aln, reference, gamma, eps)?,
    })
}

/// Scores and per-token log-likelihoods of one text, with and without
/// retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct TextScores {
    pub unaligned: DetectorScores,
    pub aligned: DetectorScores,
    pub unaligned_ll: LogLikSequence,
    pub aligned_ll: LogLikSequence,
}

/// Settings of one benchmark evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub retrieval: RetrievalParams,
    pub lambda: LambdaMode,
    pub gamma: Option<f64>,
    pub eps: f64,
}

/// Scores `texts` with `proxy` alone and aligned against `datastore`. The
/// proxy also serves as the reference model.
pub fn score_texts<P: LmProvider + ?Sized>(
    proxy: &P,
    datastore: &Datastore,
    texts: &[&TokenSequence],
    settings: &EvalSettings,
) -> Result<Vec<TextScores>> {
    texts
        .par_iter()
        .map(|seq| {
            let steps = proxy.lm_steps_windowed(seq, datastore.window())?;
            let reference: Vec<ProbDist> = steps[seq.prompt_len()..]
                .iter()
                .map(|s| s.dist.clone())
                .collect();
            let raw = AlignedSequence::unaligned(&steps, seq)?;
            let aln = align_steps(&steps, datastore, seq, &settings.retrieval, settings.lambda)?;
            Ok(TextScores {
                unaligned: score_all(&raw, &reference, settings.gamma, settings.eps)?,
                aligned: score_all(&aln, &reference, settings.gamma, settings.eps)?,
                unaligned_ll: aligned_loglik(&raw, settings.eps).1,
                aligned_ll: aligned_loglik(&aln, settings.eps).1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AurocPair {
    pub unaligned: f64,
    pub aligned: f64,
}

/// AUROC per detector, before and after alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub likelihood: AurocPair,
    pub fast_detect: AurocPair,
    pub binoculars: AurocPair,
}

impl DetectionSummary {
    pub fn get(&self, kind: DetectorKind) -> AurocPair {
        match kind {
            DetectorKind::Likelihood => self.likelihood,
            DetectorKind::FastDetect => self.fast_detect,
            DetectorKind::Binoculars => self.binoculars,
        }
    }
}

pub fn summarize(scores: &[TextScores], positive: &[bool]) -> Result<DetectionSummary> {
    let pair = |kind: DetectorKind| -> Result<AurocPair> {
        let pol = kind.default_polarity();
        let u: Vec<f64> = scores
            .iter()
            .map(|s| pol.orient(s.unaligned.get(kind)))
            .collect();
        let a: Vec<f64> = scores
            .iter()
            .map(|s| pol.orient(s.aligned.get(kind)))
            .collect();
        Ok(AurocPair {
            unaligned: auroc(&u, positive)?,
            aligned: auroc(&a, positive)?,
        })
    };
    Ok(DetectionSummary {
        likelihood: pair(DetectorKind::Likelihood)?,
        fast_detect: pair(DetectorKind::FastDetect)?,
        binoculars: pair(DetectorKind::Binoculars)?,
    })
}

/// Replaces a `rate` fraction of positions with log-likelihoods at or below
/// `floor`, mimicking adversarial rare tokens.
pub fn inject_outliers(
    ll: &LogLikSequence,
    rate: f64,
    floor: f64,
    rng: &mut impl Rng,
) -> LogLikSequence {
    LogLikSequence(
        ll.values()
            .iter()
            .map(|&x| {
                if rng.random_bool(rate) {
                    x.min(floor - rng.random_range(0.0..10.0))
                } else {
                    x
                }
            })
            .collect(),
    )
}

/// One candidate source model: a proxy plus the datastore built from that
/// model's outputs.
#[derive(Clone, Copy)]
pub struct Expert<'a> {
    pub provider: &'a dyn LmProvider,
    pub datastore: &'a Datastore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub predicted: String,
    /// Clipped mean aligned log-likelihood under each candidate.
    pub scores: BTreeMap<String, f64>,
}

/// Closed-set attribution: the candidate whose aligned proxy gives the text
/// the highest clipped mean log-likelihood. Ties go to the first name.
pub fn attribute(
    seq: &TokenSequence,
    experts: &BTreeMap<String, Expert<'_>>,
    params: &RetrievalParams,
    lambda: LambdaMode,
    gamma: Option<f64>,
    eps: f64,
) -> Result<Attribution> {
    if experts.len() < 2 {
        return Err(crate::Error::Config(
            "attribution needs at least two candidates".into(),
        ));
    }
    let mut scores = BTreeMap::new();
    let mut best: Option<(&String, f64)> = None;
    for (name, e) in experts {
        let aln = align_sequence(e.provider, e.datastore, seq, params, lambda)?;
        let s = clip_and_mean(&aligned_loglik(&aln, eps).1, gamma);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((name, s));
        }
        scores.insert(name.clone(), s);
    }
    Ok(Attribution {
        predicted: best.map(|(n, _)| n.clone()).unwrap_or_default(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{build_datastore, BuildConfig};
    use crate::detect::DEFAULT_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outliers_only_lower_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ll = LogLikSequence(vec![-1.0; 10_000]);
        let out = inject_outliers(&ll, 0.05, -30.0, &mut rng);
        let hit = out.values().iter().filter(|&&x| x <= -30.0).count();
        assert!((400..600).contains(&hit));
        assert!(out.values().iter().all(|&x| x == -1.0 || x <= -30.0));
    }

    #[test]
    fn identical_candidates_tie_to_the_first_name() {
        let cfg = SynthBenchConfig {
            texts_per_class: 2,
            train_docs: 20,
            datastore_docs: 10,
            ..Default::default()
        };
        let bench = synth_benchmark(&cfg).unwrap();
        let ds = build_datastore(
            &bench.proxy,
            &bench.datastore_corpus,
            &BuildConfig::default(),
        )
        .unwrap();
        let experts: BTreeMap<String, Expert> = ["zeta", "alpha"]
            .iter()
            .map(|n| {
                (
                    n.to_string(),
                    Expert {
                        provider: &bench.proxy,
                        datastore: &ds,
                    },
                )
            })
            .collect();
        let params = RetrievalParams::fixed(8, 1.0);
        let a = attribute(
            &bench.llm_texts[0],
            &experts,
            &params,
            LambdaMode::Fixed(0.5),
            None,
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(a.predicted, "alpha");
        assert_eq!(a.scores["alpha"], a.scores["zeta"]);
    }
}
