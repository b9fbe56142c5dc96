//! Zero-shot detector scores over aligned distributions.
//!
//! Every observed-token log-likelihood is floored at `log ε` and, when
//! clipping is enabled, at `γ`. Binoculars' cross-entropy term is not clipped.

use serde::{Deserialize, Serialize};

use crate::align::AlignedSequence;
use crate::error::{Error, Result};
use crate::prob::{LogLikSequence, ProbDist};

pub const DEFAULT_EPS: f64 = 1e-10;
pub const DEFAULT_GAMMA: f64 = -7.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Likelihood,
    FastDetect,
    Binoculars,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Likelihood => "likelihood",
            DetectorKind::FastDetect => "fast_detect",
            DetectorKind::Binoculars => "binoculars",
        }
    }

    pub fn default_polarity(self) -> Polarity {
        match self {
            DetectorKind::Likelihood | DetectorKind::FastDetect => Polarity::HigherIsLlm,
            DetectorKind::Binoculars => Polarity::LowerIsLlm,
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, DetectorKind::Likelihood)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsLlm,
    LowerIsLlm,
}

impl Polarity {
    pub fn flipped(self) -> Self {
        match self {
            Polarity::HigherIsLlm => Polarity::LowerIsLlm,
            Polarity::LowerIsLlm => Polarity::HigherIsLlm,
        }
    }

    /// Score oriented so that larger always means "more LLM-like".
    pub fn orient(self, score: f64) -> f64 {
        match self {
            Polarity::HigherIsLlm => score,
            Polarity::LowerIsLlm => -score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Human,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Lower clip bound; `None` disables clipping.
    pub gamma: Option<f64>,
    pub eps: f64,
    pub threshold: Option<f64>,
    pub polarity: Polarity,
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind) -> Self {
        Self {
            kind,
            gamma: Some(DEFAULT_GAMMA),
            eps: DEFAULT_EPS,
            threshold: None,
            polarity: kind.default_polarity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!(
                "eps must lie in (0, 1), got {}",
                self.eps
            )));
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() {
                return Err(Error::Config("gamma must be finite when enabled".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub score: f64,
    pub raw: LogLikSequence,
    pub clipped: LogLikSequence,
    pub label: Option<Label>,
}

#[inline]
fn floored_log(p: f64, eps: f64) -> f64 {
    p.max(eps).ln()
}

#[inline]
fn clip(x: f64, gamma: Option<f64>) -> f64 {
    match gamma {
        Some(g) => x.max(g),
        None => x,
    }
}

/// Per-token `log max(π̂(x_i), ε)` and their sum.
pub fn aligned_loglik(aln: &AlignedSequence, eps: f64) -> (f64, LogLikSequence) {
    let ll: Vec<f64> = aln
        .positions
        .iter()
        .map(|p| floored_log(p.observed_prob(), eps))
        .collect();
    (ll.iter().sum(), LogLikSequence(ll))
}

pub fn clip_values(ll: &LogLikSequence, gamma: Option<f64>) -> LogLikSequence {
    LogLikSequence(ll.values().iter().map(|&x| clip(x, gamma)).collect())
}

/// Mean of `max(ℓ_i, γ)`; with `gamma = None` the plain mean.
pub fn clip_and_mean(ll: &LogLikSequence, gamma: Option<f64>) -> f64 {
    let n = ll.len() as f64;
    ll.values().iter().map(|&x| clip(x, gamma)).sum::<f64>() / n
}

fn check_reference(aln: &AlignedSequence, reference: &[ProbDist]) -> Result<()> {
    if reference.len() != aln.len() {
        return Err(Error::Validation(format!(
            "reference covers {} positions, text has {}",
            reference.len(),
            aln.len()
        )));
    }
    for (p, r) in aln.positions.iter().zip(reference) {
        if p.dist.vocab_size() != r.vocab_size() {
            return Err(Error::VocabularyMismatch(format!(
                "reference vocabulary {} differs from scoring vocabulary {}",
                r.vocab_size(),
                p.dist.vocab_size()
            )));
        }
    }
    Ok(())
}

/// Mean and variance of `clip(log π̂(v), γ)` with `v ~ π_ref` at every
/// position, summed over positions.
pub fn reference_moments(
    aln: &AlignedSequence,
    reference: &[ProbDist],
    gamma: Option<f64>,
    eps: f64,
) -> Result<(f64, f64)> {
    check_reference(aln, reference)?;
    let mut mu = 0.0;
    let mut var = 0.0;
    for (p, r) in aln.positions.iter().zip(reference) {
        let scores: Vec<f64> = p
            .dist
            .to_dense()
            .into_iter()
            .map(|q| clip(floored_log(q, eps), gamma))
            .collect();
        let weights = r.to_dense();
        let z: f64 = weights.iter().sum();
        let m: f64 = weights.iter().zip(&scores).map(|(w, s)| w * s).sum::<f64>() / z;
        let v: f64 = weights
            .iter()
            .zip(&scores)
            .map(|(w, s)| w * (s - m) * (s - m))
            .sum::<f64>()
            / z;
        mu += m;
        var += v;
    }
    Ok((mu, var))
}

/// `(Σ clip(ℓ_i) − μ_ref) / σ_ref` with analytic reference moments.
pub fn fast_detect_score(
    aln: &AlignedSequence,
    reference: &[ProbDist],
    gamma: Option<f64>,
    eps: f64,
) -> Result<f64> {
    let (mu, var) = reference_moments(aln, reference, gamma, eps)?;
    let (_, ll) = aligned_loglik(aln, eps);
    let s: f64 = ll.values().iter().map(|&x| clip(x, gamma)).sum();
    // relative floor: a constant score under π_ref leaves only rounding noise
    let scale = 1.0 + mu * mu;
    if !(var > 1e-24 * scale) {
        return Err(Error::Degenerate(format!(
            "reference variance {var:e} is zero; the score is undefined"
        )));
    }
    Ok((s - mu) / var.sqrt())
}

/// `exp(NLL − H)`: aligned perplexity over aligned/reference cross-entropy.
pub fn binoculars_score(
    aln: &AlignedSequence,
    reference: &[ProbDist],
    gamma: Option<f64>,
    eps: f64,
) -> Result<f64> {
    check_reference(aln, reference)?;
    let n = aln.len() as f64;
    let (_, ll) = aligned_loglik(aln, eps);
    let nll = -ll.values().iter().map(|&x| clip(x, gamma)).sum::<f64>() / n;
    let mut h = 0.0;
    for (p, r) in aln.positions.iter().zip(reference) {
        let rd = r.to_dense();
        p.dist.for_each(|v, q| {
            if q > 0.0 {
                h -= q * floored_log(rd[v as usize], eps);
            }
        });
    }
    Ok((nll - h / n).exp())
}

/// Scores at the threshold are labeled LLM.
pub fn decide(score: f64, threshold: f64, polarity: Polarity) -> Label {
    let llm = match polarity {
        Polarity::HigherIsLlm => score >= threshold,
        Polarity::LowerIsLlm => score <= threshold,
    };
    if llm {
        Label::Llm
    } else {
        Label::Human
    }
}

/// Runs the configured detector. `reference` holds the reference model's
/// distribution at each scored position and is required for Fast-DetectGPT
/// and Binoculars.
pub fn detect(
    aln: &AlignedSequence,
    reference: Option<&[ProbDist]>,
    cfg: &DetectorConfig,
) -> Result<DetectionResult> {
    cfg.validate()?;
    if aln.is_empty() {
        return Err(Error::Validation("no scored positions".into()));
    }
    let (_, raw) = aligned_loglik(aln, cfg.eps);
    let need_ref = || {
        reference
            .ok_or_else(|| Error::Config(format!("{} needs a reference provider", cfg.kind.name())))
    };
    let score = match cfg.kind {
        DetectorKind::Likelihood => clip_and_mean(&raw, cfg.gamma),
        DetectorKind::FastDetect => fast_detect_score(aln, need_ref()?, cfg.gamma, cfg.eps)?,
        DetectorKind::Binoculars => binoculars_score(aln, need_ref()?, cfg.gamma, cfg.eps)?,
    };
    Ok(DetectionResult {
        score,
        clipped: clip_values(&raw, cfg.gamma),
        raw,
        label: cfg.threshold.map(|t| decide(score, t, cfg.polarity)),
    })
}
