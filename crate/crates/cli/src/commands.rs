//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use knnproxy_core::align::{
    align_steps, AlignedSequence, Diagnostics, LambdaMode, RetrievalParams,
};
use knnproxy_core::corpus::{read_jsonl, write_jsonl, Document};
use knnproxy_core::datastore::{build_datastore, Datastore};
use knnproxy_core::detect::{decide, detect, DetectorKind, Label};
use knnproxy_core::eval::experiments::{corpus_size_sweep, ClassificationReport};
use knnproxy_core::eval::{
    attribute, auroc, confusion, f1, f1_sweep, roc_points, run_bound_experiment, score_all,
    score_texts, summarize, synth_benchmark, DetectionSummary, DetectorScores, EvalSettings,
    Expert, RocPoint,
};
use knnproxy_core::prob::{ProbDist, TokenSequence};
use knnproxy_core::provider::{
    vocabulary_from_texts, FileProvider, HttpProvider, LmProvider, ToyLm, ToyLmConfig, BOS_TOKEN,
    UNK_TOKEN,
};
use knnproxy_core::router::{build_routing_store, route_and_align};
use knnproxy_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::config::{ProviderConfig, ProviderKind, RunConfig, SweepAxis};
use crate::report::{write_csv, write_json};

/// Builds the provider described by `cfg`.
pub fn open_provider(cfg: &ProviderConfig) -> Result<Box<dyn LmProvider>> {
    match cfg.kind {
        ProviderKind::Toy => {
            let path = cfg.train_corpus.as_ref().ok_or_else(|| {
                Error::Config("provider.train_corpus is required for the toy provider".into())
            })?;
            let docs = read_jsonl(path)?;
            let texts: Vec<&str> = docs
                .iter()
                .filter_map(|d| d.text.as_deref())
                .filter(|t| !t.trim().is_empty())
                .collect();
            if texts.is_empty() {
                return Err(Error::Validation(format!(
                    "{} has no text fields",
                    path.display()
                )));
            }
            let vocab = vocabulary_from_texts(texts.iter().copied())?;
            let toy_cfg = ToyLmConfig {
                order: cfg.order,
                alpha: cfg.alpha,
                embed_dim: cfg.embed_dim,
                embed_window: cfg.embed_window,
                embed_seed: cfg.embed_seed,
            };
            let word = |w: &str| {
                vocab
                    .id(w)
                    .or(vocab.id(UNK_TOKEN))
                    .expect("vocabulary holds UNK")
            };
            let bos = vocab.id(BOS_TOKEN).expect("vocabulary holds BOS");
            let seqs = texts
                .iter()
                .map(|t| TokenSequence::new(t.split_whitespace().map(word).collect(), bos, 0))
                .collect::<Result<Vec<_>>>()?;
            Ok(Box::new(ToyLm::train(vocab, &seqs, toy_cfg)?))
        }
        ProviderKind::File => {
            let path = cfg.feature_file.as_ref().ok_or_else(|| {
                Error::Config("provider.feature_file is required for the file provider".into())
            })?;
            Ok(Box::new(FileProvider::open(path, cfg.bos_id)?))
        }
        ProviderKind::Http => {
            if cfg.vocab_size == 0 {
                return Err(Error::Config(
                    "provider.vocab_size is required for the http provider".into(),
                ));
            }
            Ok(Box::new(match &cfg.url {
                Some(url) => HttpProvider::new(
                    url.clone(),
                    std::env::var(knnproxy_core::provider::LM_TOKEN_ENV).ok(),
                    cfg.vocab_size,
                    cfg.embed_dim,
                    cfg.layer,
                ),
                None => HttpProvider::from_env(cfg.vocab_size, cfg.embed_dim, cfg.layer)?,
            }))
        }
    }
}

/// A document ready for scoring.
pub struct Item {
    pub id: String,
    pub label: Option<String>,
    pub seq: TokenSequence,
}

fn to_item(doc: Document, line: usize, provider: &dyn LmProvider, bos_id: u32) -> Result<Item> {
    let id = doc.id_or(line);
    let prompt_len = doc.prompt_len.unwrap_or(0);
    let seq = match (&doc.token_ids, &doc.text) {
        (Some(ids), _) => TokenSequence::new(ids.clone(), bos_id, prompt_len)?,
        (None, Some(text)) => provider.tokenize(text, prompt_len)?,
        (None, None) => {
            return Err(Error::Validation(format!(
                "document {id} has neither text nor token_ids"
            )))
        }
    };
    seq.validate(provider.vocab_size())?;
    Ok(Item {
        id,
        label: doc.label,
        seq,
    })
}

/// Reads a corpus, or every sequence of the feature file when no corpus is
/// given and the provider is file-backed.
pub fn load_items(
    corpus: Option<&Path>,
    provider: &dyn LmProvider,
    cfg: &ProviderConfig,
) -> Result<Vec<Item>> {
    match corpus {
        Some(path) => read_jsonl(path)?
            .into_iter()
            .enumerate()
            .map(|(i, d)| to_item(d, i, provider, cfg.bos_id))
            .collect(),
        None if cfg.kind == ProviderKind::File => {
            let path = cfg.feature_file.as_ref().expect("checked when opening");
            let fp = FileProvider::open(path, cfg.bos_id)?;
            Ok(fp
                .sequences()?
                .into_iter()
                .enumerate()
                .map(|(i, seq)| Item {
                    id: i.to_string(),
                    label: None,
                    seq,
                })
                .collect())
        }
        None => Err(Error::Config("--corpus is required".into())),
    }
}

fn datastore_path(cfg: &RunConfig) -> Result<&PathBuf> {
    cfg.datastore
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("datastore.path (or --datastore) is required".into()))
}

pub fn build(cfg: &RunConfig, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let provider = open_provider(&cfg.provider)?;
    let items = load_items(corpus, provider.as_ref(), &cfg.provider)?;
    let seqs: Vec<TokenSequence> = items.into_iter().map(|i| i.seq).collect();
    let ds = build_datastore(
        provider.as_ref(),
        &seqs,
        &cfg.datastore.build_config(cfg.seed),
    )?;
    ds.save(out)?;
    info!(entries = ds.len(), path = %out.display(), "datastore written");
    Ok(())
}

/// Reference-model distributions at the scored positions of `seq`.
fn reference_dists(
    proxy_steps: &[knnproxy_core::provider::LmStep],
    reference: Option<&dyn LmProvider>,
    seq: &TokenSequence,
    window: usize,
) -> Result<Vec<ProbDist>> {
    let steps;
    let src = match reference {
        Some(r) => {
            steps = r.lm_steps_windowed(seq, window)?;
            &steps
        }
        None => proxy_steps,
    };
    Ok(src[seq.prompt_len()..]
        .iter()
        .map(|s| s.dist.clone())
        .collect())
}

struct Scorer<'a> {
    provider: &'a dyn LmProvider,
    reference: Option<Box<dyn LmProvider>>,
    datastore: Option<Datastore>,
    params: RetrievalParams,
    lambda: LambdaMode,
}

impl<'a> Scorer<'a> {
    fn new(cfg: &RunConfig, provider: &'a dyn LmProvider, align: bool) -> Result<Self> {
        let reference = cfg.reference.as_ref().map(open_provider).transpose()?;
        if let Some(r) = &reference {
            if r.vocab_size() != provider.vocab_size() {
                return Err(Error::VocabularyMismatch(format!(
                    "reference vocabulary {} differs from proxy vocabulary {}",
                    r.vocab_size(),
                    provider.vocab_size()
                )));
            }
        }
        let datastore = if align {
            Some(Datastore::load(
                datastore_path(cfg)?,
                Some(&provider.fingerprint()),
            )?)
        } else {
            None
        };
        Ok(Self {
            provider,
            reference,
            datastore,
            params: cfg.retrieval.clone(),
            lambda: cfg.lambda.mode(),
        })
    }

    fn window(&self) -> usize {
        self.datastore
            .as_ref()
            .map_or(knnproxy_core::datastore::DEFAULT_WINDOW, |d| d.window())
    }

    fn align(&self, seq: &TokenSequence) -> Result<(AlignedSequence, Vec<ProbDist>)> {
        let steps = self.provider.lm_steps_windowed(seq, self.window())?;
        let reference = reference_dists(&steps, self.reference.as_deref(), seq, self.window())?;
        let aln = match &self.datastore {
            Some(ds) => align_steps(&steps, ds, seq, &self.params, self.lambda)?,
            None => AlignedSequence::unaligned(&steps, seq)?,
        };
        for (i, p) in aln.positions.iter().enumerate() {
            if let Some(d) = &p.diag {
                debug!(
                    position = i,
                    token = p.token,
                    k = d.k,
                    tau = d.tau,
                    k_eff = d.k_eff,
                    r_eff = d.r_eff,
                    u = d.u,
                    lambda = d.lambda,
                    "retrieval"
                );
            }
        }
        Ok((aln, reference))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    scored_tokens: usize,
    scores: DetectorScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    retrieval: Option<Diagnostics>,
}

pub fn score(cfg: &RunConfig, corpus: Option<&Path>, out: &Path, align: bool) -> Result<()> {
    let provider = open_provider(&cfg.provider)?;
    let scorer = Scorer::new(cfg, provider.as_ref(), align)?;
    let items = load_items(corpus, provider.as_ref(), &cfg.provider)?;
    let rows = items
        .par_iter()
        .map(|it| {
            let (aln, reference) = scorer.align(&it.seq)?;
            Ok(ScoreRow {
                id: it.id.clone(),
                label: it.label.clone(),
                scored_tokens: aln.len(),
                scores: score_all(&aln, &reference, cfg.detector.gamma(), cfg.detector.eps)?,
                retrieval: aln.mean_diagnostics(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &rows)?;
    info!(texts = rows.len(), path = %out.display(), "scores written");
    Ok(())
}

fn parse_label(raw: &str) -> Result<bool> {
    match raw {
        "llm" => Ok(true),
        "human" => Ok(false),
        other => Err(Error::Validation(format!(
            "label must be \"llm\" or \"human\", got {other:?}"
        ))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectRow {
    id: String,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    prediction: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Serialize)]
struct DetectReport {
    detector: DetectorKind,
    texts: usize,
    threshold: Option<f64>,
    auroc: Option<f64>,
    f1: Option<f64>,
}

fn detector_scores(scorer: &Scorer, items: &[Item], cfg: &RunConfig) -> Result<Vec<f64>> {
    let dc = cfg.detector.detector_config();
    let no_threshold = knnproxy_core::detect::DetectorConfig {
        threshold: None,
        ..dc
    };
    items
        .par_iter()
        .map(|it| {
            let (aln, reference) = scorer.align(&it.seq)?;
            Ok(detect(&aln, Some(&reference), &no_threshold)?.score)
        })
        .collect()
}

pub fn run_detect(
    cfg: &RunConfig,
    corpus: Option<&Path>,
    out: &Path,
    align: bool,
    report: Option<&Path>,
    roc: Option<&Path>,
) -> Result<()> {
    let provider = open_provider(&cfg.provider)?;
    let scorer = Scorer::new(cfg, provider.as_ref(), align)?;
    let polarity = cfg.detector.detector_config().polarity;
    let mut threshold = cfg.detector.threshold;
    if let Some(cal) = &cfg.detector.calibration {
        let cal_items = load_items(Some(cal), provider.as_ref(), &cfg.provider)?;
        let labels = cal_items
            .iter()
            .map(|it| parse_label(it.label.as_deref().unwrap_or("")))
            .collect::<Result<Vec<_>>>()?;
        let oriented: Vec<f64> = detector_scores(&scorer, &cal_items, cfg)?
            .into_iter()
            .map(|s| polarity.orient(s))
            .collect();
        let best = f1_sweep(&oriented, &labels)?;
        let t = polarity.orient(best.threshold);
        info!(threshold = t, f1 = best.f1, "calibrated threshold");
        threshold = Some(t);
    }
    let items = load_items(corpus, provider.as_ref(), &cfg.provider)?;
    let scores = detector_scores(&scorer, &items, cfg)?;
    let rows: Vec<DetectRow> = items
        .iter()
        .zip(&scores)
        .map(|(it, &score)| DetectRow {
            id: it.id.clone(),
            score,
            prediction: threshold.map(|t| decide(score, t, polarity)),
            label: it.label.clone(),
        })
        .collect();
    write_jsonl(out, &rows)?;
    if report.is_some() || roc.is_some() {
        let labels = items
            .iter()
            .map(|it| {
                it.label
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("document {} has no label", it.id)))
                    .and_then(parse_label)
            })
            .collect::<Result<Vec<_>>>()?;
        let oriented: Vec<f64> = scores.iter().map(|&s| polarity.orient(s)).collect();
        if let Some(path) = report {
            let f1_value = threshold.map(|t| {
                let pred: Vec<bool> = scores
                    .iter()
                    .map(|&s| decide(s, t, polarity) == Label::Llm)
                    .collect();
                f1(&pred, &labels)
            });
            let r = DetectReport {
                detector: cfg.detector.kind,
                texts: rows.len(),
                threshold,
                auroc: Some(auroc(&oriented, &labels)?),
                f1: f1_value,
            };
            write_json(path, &r)?;
        }
        if let Some(path) = roc {
            write_csv(path, &roc_points(&oriented, &labels)?)?;
        }
    }
    info!(texts = rows.len(), path = %out.display(), "detections written");
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub datastore: PathBuf,
    pub domain: Option<String>,
}

/// Expert name to datastore path and domain; relative paths are resolved
/// against the registry's directory.
pub fn read_registry(path: &Path) -> Result<BTreeMap<String, RegistryEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read registry {}: {e}", path.display())))?;
    let mut reg: BTreeMap<String, RegistryEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in reg.values_mut() {
        if e.datastore.is_relative() {
            e.datastore = base.join(&e.datastore);
        }
    }
    if reg.is_empty() {
        return Err(Error::Config(format!(
            "{} lists no experts",
            path.display()
        )));
    }
    Ok(reg)
}

fn load_experts(
    reg: &BTreeMap<String, RegistryEntry>,
    provider: &dyn LmProvider,
) -> Result<BTreeMap<String, Datastore>> {
    reg.iter()
        .map(|(name, e)| {
            Ok((
                name.clone(),
                Datastore::load(&e.datastore, Some(&provider.fingerprint()))?,
            ))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct RouteRow {
    id: String,
    expert: String,
    votes: BTreeMap<String, f64>,
    score: f64,
}

pub fn run_route(cfg: &RunConfig, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let reg_path = cfg
        .router
        .registry
        .as_ref()
        .ok_or_else(|| Error::Config("router.registry (or --registry) is required".into()))?;
    let reg = read_registry(reg_path)?;
    let sentences_path = cfg
        .router
        .sentences
        .as_ref()
        .ok_or_else(|| Error::Config("router.sentences (or --sentences) is required".into()))?;
    let mut by_domain = BTreeMap::new();
    for (name, e) in &reg {
        let domain = e.domain.clone().unwrap_or_else(|| name.clone());
        if let Some(prev) = by_domain.insert(domain.clone(), name.clone()) {
            return Err(Error::Config(format!(
                "experts {prev:?} and {name:?} share domain {domain:?}"
            )));
        }
    }
    let embedder = cfg.router.embedder();
    let embed = |d: &Document, what: &str| -> Result<Vec<f32>> {
        match (&d.embedding, &d.text) {
            (Some(e), _) => Ok(e.clone()),
            (None, Some(t)) => Ok(embedder.embed(t)),
            (None, None) => Err(Error::Validation(format!(
                "{what} has neither text nor embedding"
            ))),
        }
    };
    let mut sentences = Vec::new();
    for (i, d) in read_jsonl(sentences_path)?.iter().enumerate() {
        let domain = d.label.as_ref().ok_or_else(|| {
            Error::Validation(format!("routing sentence {} has no label", d.id_or(i)))
        })?;
        let expert = by_domain.get(domain).ok_or_else(|| {
            Error::Validation(format!(
                "routing sentence labeled with unknown domain {domain:?}"
            ))
        })?;
        sentences.push((expert.clone(), embed(d, "routing sentence")?));
    }
    let names: Vec<String> = reg.keys().cloned().collect();
    let store = build_routing_store(&names, &sentences)?;

    let provider = open_provider(&cfg.provider)?;
    let experts = load_experts(&reg, provider.as_ref())?;
    let corpus = corpus.ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let docs = read_jsonl(corpus)?;
    let dc = cfg.detector.detector_config();
    let rows = docs
        .into_par_iter()
        .enumerate()
        .map(|(i, d)| {
            let emb = embed(&d, &format!("document {}", d.id_or(i)))?;
            let it = to_item(d, i, provider.as_ref(), cfg.provider.bos_id)?;
            let (decision, aln) = route_and_align(
                &experts,
                &store,
                cfg.router.k_r,
                provider.as_ref(),
                &emb,
                &it.seq,
                &cfg.retrieval,
                cfg.lambda.mode(),
            )?;
            let steps =
                provider.lm_steps_windowed(&it.seq, experts[&decision.expert_name].window())?;
            let reference = reference_dists(&steps, None, &it.seq, 0)?;
            let det = detect(&aln, Some(&reference), &dc)?;
            Ok(RouteRow {
                id: it.id,
                votes: store
                    .experts()
                    .iter()
                    .cloned()
                    .zip(decision.scores.iter().copied())
                    .collect(),
                expert: decision.expert_name,
                score: det.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &rows)?;
    info!(texts = rows.len(), path = %out.display(), "routes written");
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttributionRow {
    id: String,
    predicted: String,
    scores: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

pub fn run_attribute(
    cfg: &RunConfig,
    corpus: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
    confusion_csv: Option<&Path>,
) -> Result<()> {
    let reg_path = cfg
        .router
        .registry
        .as_ref()
        .ok_or_else(|| Error::Config("router.registry (or --registry) is required".into()))?;
    let reg = read_registry(reg_path)?;
    let provider = open_provider(&cfg.provider)?;
    let stores = load_experts(&reg, provider.as_ref())?;
    let experts: BTreeMap<String, Expert> = stores
        .iter()
        .map(|(n, ds)| {
            (
                n.clone(),
                Expert {
                    provider: provider.as_ref(),
                    datastore: ds,
                },
            )
        })
        .collect();
    let items = load_items(corpus, provider.as_ref(), &cfg.provider)?;
    let rows = items
        .par_iter()
        .map(|it| {
            let a = attribute(
                &it.seq,
                &experts,
                &cfg.retrieval,
                cfg.lambda.mode(),
                cfg.detector.gamma(),
                cfg.detector.eps,
            )?;
            Ok(AttributionRow {
                id: it.id.clone(),
                predicted: a.predicted,
                scores: a.scores,
                label: it.label.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &rows)?;
    if report.is_some() || confusion_csv.is_some() {
        let names: Vec<String> = experts.keys().cloned().collect();
        let index = |n: &str| names.iter().position(|x| x == n);
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for r in &rows {
            let label = r
                .label
                .as_deref()
                .ok_or_else(|| Error::Validation(format!("document {} has no label", r.id)))?;
            truth.push(
                index(label).ok_or_else(|| {
                    Error::Validation(format!("label {label:?} is not an expert"))
                })?,
            );
            pred.push(index(&r.predicted).unwrap_or(0));
        }
        let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        let rep = ClassificationReport {
            accuracy: hits as f64 / rows.len().max(1) as f64,
            confusion: confusion(&truth, &pred, names.len()),
            predictions: truth.into_iter().zip(pred).collect(),
            classes: names,
        };
        if let Some(path) = report {
            write_json(path, &rep)?;
        }
        if let Some(path) = confusion_csv {
            write_confusion(path, &rep)?;
        }
    }
    info!(texts = rows.len(), path = %out.display(), "attributions written");
    Ok(())
}

fn write_confusion(path: &Path, rep: &ClassificationReport) -> Result<()> {
    #[derive(Serialize)]
    struct Cell<'a> {
        truth: &'a str,
        predicted: &'a str,
        proportion: f64,
    }
    let mut cells = Vec::new();
    for (t, row) in rep.confusion.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            cells.push(Cell {
                truth: &rep.classes[t],
                predicted: &rep.classes[p],
                proportion: v,
            });
        }
    }
    write_csv(path, &cells)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub seed: u64,
    pub texts_per_class: usize,
    pub datastore_entries: usize,
    pub auroc: DetectionSummary,
}

#[derive(Serialize)]
struct RocRow {
    detector: &'static str,
    variant: &'static str,
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

pub fn bench(cfg: &RunConfig, out: &Path, roc: Option<&Path>) -> Result<()> {
    let bc = cfg.bench_config();
    let bench = synth_benchmark(&bc)?;
    let provider: &dyn LmProvider = &bench.proxy;
    let ds = build_datastore(
        provider,
        &bench.datastore_corpus,
        &cfg.datastore.build_config(cfg.seed),
    )?;
    let (texts, labels) = bench.labeled_texts();
    let settings = cfg.settings();
    let scores = score_texts(provider, &ds, &texts, &settings)?;
    let summary = summarize(&scores, &labels)?;
    let report = BenchReport {
        seed: cfg.seed,
        texts_per_class: bc.texts_per_class,
        datastore_entries: ds.len(),
        auroc: summary,
    };
    write_json(out, &report)?;
    if let Some(path) = roc {
        let mut rows = Vec::new();
        for kind in [
            DetectorKind::Likelihood,
            DetectorKind::FastDetect,
            DetectorKind::Binoculars,
        ] {
            let pol = kind.default_polarity();
            for (variant, aligned) in [("unaligned", false), ("aligned", true)] {
                let s: Vec<f64> = scores
                    .iter()
                    .map(|t| {
                        pol.orient(if aligned {
                            t.aligned.get(kind)
                        } else {
                            t.unaligned.get(kind)
                        })
                    })
                    .collect();
                for RocPoint {
                    threshold,
                    fpr,
                    tpr,
                } in roc_points(&s, &labels)?
                {
                    rows.push(RocRow {
                        detector: kind.name(),
                        variant,
                        threshold,
                        fpr,
                        tpr,
                    });
                }
            }
        }
        write_csv(path, &rows)?;
    }
    info!(
        likelihood = ?report.auroc.likelihood,
        fast_detect = ?report.auroc.fast_detect,
        binoculars = ?report.auroc.binoculars,
        "benchmark finished"
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BoundRow {
    seed: u64,
    certified_l: f64,
    delta: f64,
    queries: usize,
    violation_rate: f64,
    mean_l1: f64,
    mean_bound: f64,
    mean_k_eff: f64,
    mean_r_eff: f64,
}

pub fn validate_bound(
    cfg: &RunConfig,
    replications: usize,
    deltas: &[f64],
    out: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    let base = cfg.bound_config();
    let deltas: Vec<f64> = if deltas.is_empty() {
        vec![base.delta]
    } else {
        deltas.to_vec()
    };
    for &d in &deltas {
        knnproxy_core::eval::BoundConfig {
            delta: d,
            ..base.clone()
        }
        .validate()?;
    }
    let runs = (0..replications.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let c = knnproxy_core::eval::BoundConfig {
                seed: base.seed.wrapping_add(r),
                ..base.clone()
            };
            Ok((c.seed, run_bound_experiment(&c)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (seed, samples) in &runs {
        for &d in &deltas {
            let rep = samples.report(d);
            rows.push(BoundRow {
                seed: *seed,
                certified_l: rep.certified_l,
                delta: d,
                queries: rep.queries,
                violation_rate: rep.violation_rate,
                mean_l1: rep.mean_l1,
                mean_bound: rep.mean_bound,
                mean_k_eff: rep.mean_k_eff,
                mean_r_eff: rep.mean_r_eff,
            });
        }
    }
    let worst = rows.iter().all(|r| r.violation_rate <= r.delta);
    info!(
        replications = runs.len(),
        within_delta = worst,
        "bound validation finished"
    );
    write_json(out, &rows)?;
    if let Some(path) = csv {
        write_csv(path, &rows)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub entries: usize,
    pub likelihood_unaligned: f64,
    pub likelihood_aligned: f64,
    pub fast_detect_unaligned: f64,
    pub fast_detect_aligned: f64,
    pub binoculars_unaligned: f64,
    pub binoculars_aligned: f64,
}

fn sweep_row(axis: SweepAxis, value: f64, entries: usize, s: &DetectionSummary) -> SweepRow {
    SweepRow {
        axis,
        value,
        entries,
        likelihood_unaligned: s.likelihood.unaligned,
        likelihood_aligned: s.likelihood.aligned,
        fast_detect_unaligned: s.fast_detect.unaligned,
        fast_detect_aligned: s.fast_detect.aligned,
        binoculars_unaligned: s.binoculars.unaligned,
        binoculars_aligned: s.binoculars.aligned,
    }
}

fn as_count(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!(
            "{axis:?} values must be positive integers, got {v}"
        )))
    }
}

/// Varies one setting on the synthetic benchmark and tabulates AUROC.
pub fn sweep(cfg: &RunConfig, out: &Path, csv: Option<&Path>) -> Result<()> {
    let axis = cfg.sweep.axis;
    let values = if cfg.sweep.values.is_empty() {
        axis.default_values()
    } else {
        cfg.sweep.values.clone()
    };
    let bc = cfg.bench_config();
    let build = cfg.datastore.build_config(cfg.seed);
    let base = cfg.settings();
    let rows = if axis == SweepAxis::CorpusSize {
        let sizes = values
            .iter()
            .map(|&v| as_count(axis, v))
            .collect::<Result<Vec<_>>>()?;
        corpus_size_sweep(&bc, &build, &base, &sizes)?
            .iter()
            .zip(&values)
            .map(|(p, &v)| sweep_row(axis, v, p.entries, &p.summary))
            .collect()
    } else {
        let bench = synth_benchmark(&bc)?;
        let ds = build_datastore(&bench.proxy, &bench.datastore_corpus, &build)?;
        let (texts, labels) = bench.labeled_texts();
        values
            .iter()
            .map(|&v| {
                let settings = match axis {
                    SweepAxis::Tau => EvalSettings {
                        retrieval: RetrievalParams::fixed(base.retrieval.k, v),
                        ..base.clone()
                    },
                    SweepAxis::K => EvalSettings {
                        retrieval: RetrievalParams::fixed(as_count(axis, v)?, base.retrieval.tau),
                        ..base.clone()
                    },
                    SweepAxis::Lambda => EvalSettings {
                        lambda: LambdaMode::Fixed(v),
                        ..base.clone()
                    },
                    SweepAxis::Gamma => EvalSettings {
                        gamma: Some(v),
                        ..base.clone()
                    },
                    SweepAxis::CorpusSize => unreachable!(),
                };
                let scores = score_texts(&bench.proxy, &ds, &texts, &settings)?;
                Ok(sweep_row(axis, v, ds.len(), &summarize(&scores, &labels)?))
            })
            .collect::<Result<Vec<_>>>()?
    };
    write_json(out, &rows)?;
    if let Some(path) = csv {
        write_csv(path, &rows)?;
    }
    info!(axis = ?axis, points = rows.len(), "sweep finished");
    Ok(())
}
