//! Run configuration shared by every subcommand.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `KNNPROXY_SEED` environment variable, `--set key=value` overrides, and
//! finally dedicated command-line flags.

// negated comparisons also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use knnproxy_core::align::{LambdaMode, RetrievalParams};
use knnproxy_core::datastore::BuildConfig;
use knnproxy_core::detect::{DetectorConfig, DetectorKind, Polarity, DEFAULT_EPS, DEFAULT_GAMMA};
use knnproxy_core::eval::{BoundConfig, EvalSettings, SynthBenchConfig};
use knnproxy_core::index::IndexMode;
use knnproxy_core::router::{NgramEmbedder, DEFAULT_K_R};
use knnproxy_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "KNNPROXY_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub provider: ProviderConfig,
    pub reference: Option<ProviderConfig>,
    pub datastore: DatastoreConfig,
    pub retrieval: RetrievalParams,
    pub lambda: LambdaConfig,
    pub detector: DetectorSection,
    pub router: RouterConfig,
    pub bench: SynthBenchConfig,
    pub bound: BoundConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Toy,
    File,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub train_corpus: Option<PathBuf>,
    pub order: usize,
    pub alpha: f64,
    pub embed_dim: usize,
    pub embed_window: usize,
    pub embed_seed: u64,
    pub feature_file: Option<PathBuf>,
    pub bos_id: u32,
    pub url: Option<String>,
    pub vocab_size: usize,
    pub layer: i32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Toy,
            train_corpus: None,
            order: 3,
            alpha: 0.1,
            embed_dim: 64,
            embed_window: 3,
            embed_seed: 0,
            feature_file: None,
            bos_id: 0,
            url: None,
            vocab_size: 0,
            layer: -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatastoreConfig {
    pub path: Option<PathBuf>,
    pub window: usize,
    pub stride: usize,
    pub max_entries: Option<usize>,
    pub index: IndexKind,
    pub lists: usize,
    pub n_probe: usize,
    pub slack: f64,
}

impl Default for DatastoreConfig {
    fn default() -> Self {
        let IndexMode::Approximate {
            lists,
            n_probe,
            slack,
        } = IndexMode::approximate()
        else {
            unreachable!()
        };
        Self {
            path: None,
            window: knnproxy_core::datastore::DEFAULT_WINDOW,
            stride: 1,
            max_entries: None,
            index: IndexKind::Exact,
            lists,
            n_probe,
            slack,
        }
    }
}

impl DatastoreConfig {
    pub fn build_config(&self, seed: u64) -> BuildConfig {
        BuildConfig {
            window: self.window,
            stride: self.stride,
            max_entries: self.max_entries,
            seed,
            mode: match self.index {
                IndexKind::Exact => IndexMode::Exact,
                IndexKind::Approximate => IndexMode::Approximate {
                    lists: self.lists,
                    n_probe: self.n_probe,
                    slack: self.slack,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaConfig {
    pub mode: LambdaKind,
    pub value: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            mode: LambdaKind::Adaptive,
            value: knnproxy_core::align::DEFAULT_LAMBDA,
        }
    }
}

impl LambdaConfig {
    pub fn mode(&self) -> LambdaMode {
        match self.mode {
            LambdaKind::Adaptive => LambdaMode::Adaptive,
            LambdaKind::Fixed => LambdaMode::Fixed(self.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub kind: DetectorKind,
    pub clip: bool,
    pub gamma: f64,
    pub eps: f64,
    pub threshold: Option<f64>,
    pub polarity: Option<Polarity>,
    pub calibration: Option<PathBuf>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Likelihood,
            clip: true,
            gamma: DEFAULT_GAMMA,
            eps: DEFAULT_EPS,
            threshold: None,
            polarity: None,
            calibration: None,
        }
    }
}

impl DetectorSection {
    pub fn gamma(&self) -> Option<f64> {
        self.clip.then_some(self.gamma)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            kind: self.kind,
            gamma: self.gamma(),
            eps: self.eps,
            threshold: self.threshold,
            polarity: self.polarity.unwrap_or(self.kind.default_polarity()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub registry: Option<PathBuf>,
    pub sentences: Option<PathBuf>,
    pub k_r: usize,
    pub embed_dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub embed_seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        let e = NgramEmbedder::default();
        Self {
            registry: None,
            sentences: None,
            k_r: DEFAULT_K_R,
            embed_dim: e.dim,
            n_min: e.n_min,
            n_max: e.n_max,
            embed_seed: e.seed,
        }
    }
}

impl RouterConfig {
    pub fn embedder(&self) -> NgramEmbedder {
        NgramEmbedder {
            dim: self.embed_dim,
            n_min: self.n_min,
            n_max: self.n_max,
            seed: self.embed_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Tau,
    K,
    Lambda,
    Gamma,
    CorpusSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Empty means the axis default.
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Tau,
            values: Vec::new(),
        }
    }
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Tau => vec![0.1, 0.5, 1.0, 5.0, 10.0, 50.0],
            SweepAxis::K => vec![16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0],
            SweepAxis::Lambda => vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            SweepAxis::Gamma => vec![-20.0, -15.0, -10.0, -7.5, -5.0, -2.5],
            SweepAxis::CorpusSize => vec![1000.0, 3000.0, 10000.0],
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot render config: {e}")))
    }

    /// Applies `section.key=value`, where the value is a TOML literal or a
    /// bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| {
                Error::Config(format!("{key}: {} is not a section", parts[..i].join(".")))
            })?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e| Error::Config(format!("--set {key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.datastore.build_config(self.seed).validate()?;
        self.retrieval.validate()?;
        self.lambda.mode().validate()?;
        self.detector.detector_config().validate()?;
        self.bench.validate()?;
        for (name, seed) in [("bench", self.bench.seed), ("bound", self.bound.seed)] {
            if seed != 0 && seed != self.seed {
                return Err(Error::Config(format!(
                    "{name}.seed is taken from the top-level seed; set seed = {seed} instead"
                )));
            }
        }
        if self.router.k_r == 0
            || self.router.embed_dim == 0
            || self.router.n_min == 0
            || self.router.n_min > self.router.n_max
        {
            return Err(Error::Config(
                "router needs k_r ≥ 1, embed_dim ≥ 1 and 1 ≤ n_min ≤ n_max".into(),
            ));
        }
        if self.provider.order == 0 || !(self.provider.alpha > 0.0) || self.provider.embed_dim == 0
        {
            return Err(Error::Config(
                "provider needs order ≥ 1, alpha > 0 and embed_dim ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            retrieval: self.retrieval.clone(),
            lambda: self.lambda.mode(),
            gamma: self.detector.gamma(),
            eps: self.detector.eps,
        }
    }

    pub fn bench_config(&self) -> SynthBenchConfig {
        SynthBenchConfig {
            seed: self.seed,
            ..self.bench.clone()
        }
    }

    pub fn bound_config(&self) -> BoundConfig {
        BoundConfig {
            seed: self.seed,
            ..self.bound.clone()
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Every configuration key, shown by `--help`.
pub const CONFIG_REFERENCE: &str = "\
CONFIGURATION (TOML, or JSON for *.json; unknown keys are rejected)
  seed                    master seed; also read from KNNPROXY_SEED [0]
  threads                 worker threads, 0 = logical cores [0]
  [provider]              proxy language model
    kind                  toy | file | http [toy]
    train_corpus          toy: JSON-lines corpus the n-gram model is trained on
    order                 toy: n-gram order [3]
    alpha                 toy: additive smoothing [0.1]
    embed_dim             toy/http: context embedding width [64]
    embed_window          toy: context tokens hashed into the embedding [3]
    embed_seed            toy: seed of the embedding projection [0]
    feature_file          file: KNPF1 feature file
    bos_id                id of the begin-of-sequence token [0]
    url                   http: endpoint, else KNNPROXY_LM_URL (token: KNNPROXY_LM_TOKEN)
    vocab_size            http: vocabulary size
    layer                 http: hidden layer for embeddings, -1 = last [-1]
  [reference]             reference model for fast_detect and binoculars;
                          same keys as [provider]; absent = the proxy itself
  [datastore]
    path                  datastore file (metadata in <path>.meta.json)
    window                context window W in tokens [32]
    stride                stride between stored positions [1]
    max_entries           cap on entries, seeded reservoir sample [none]
    index                 exact | approximate [exact]
    lists                 approximate: inverted lists, 0 = round(sqrt N) [0]
    n_probe               approximate: lists probed per query [8]
    slack                 approximate: pruning slack, 0 = exact pruning
  [retrieval]
    selection             adaptive | fixed [adaptive]
    k                     fixed: neighbor count [256]
    tau                   fixed: temperature [5]
    k_grid                adaptive: ascending neighbor counts [16..1024]
    tau_grid              adaptive: ascending temperatures [0.1,0.5,1,5,10,50]
    c                     weight of the locality term of the surrogate [1]
  [lambda]
    mode                  adaptive | fixed [adaptive]
    value                 fixed: weight of the proxy distribution [0.1]
  [detector]
    kind                  likelihood | fast_detect | binoculars [likelihood]
    clip                  clip per-token log-likelihoods at gamma [true]
    gamma                 clip lower bound [-7.5]
    eps                   probability floor before the log [1e-10]
    threshold             decision threshold [none]
    polarity              higher_is_llm | lower_is_llm [per detector]
    calibration           labeled JSON-lines corpus; picks the best-F1 threshold
  [router]
    registry              JSON: expert name -> {datastore, domain}
    sentences             labeled JSON-lines sentences (label = domain)
    k_r                   neighbors in the routing vote [15]
    embed_dim             hashed n-gram embedding width [256]
    n_min                 shortest character n-gram [3]
    n_max                 longest character n-gram [5]
    embed_seed            n-gram hashing seed
  [bench]                 synthetic benchmark (seed comes from the top level)
    vocab_size            synthetic vocabulary size [48]
    chain_support         successors per context in each register [6]
    chain_concentration   Dirichlet concentration of register rows [0.5]
    human_divergence      fraction of contexts where human text departs [0.15]
    source                {order, alpha} of the source model [{3, 0.01}]
    human                 {order, alpha} of the human model [{3, 0.01}]
    proxy                 {order, alpha} of the proxy model [{2, 0.5}]
    train_docs            documents per register for training [200]
    train_doc_len         tokens per training document [100]
    datastore_docs        source documents behind the datastore [200]
    datastore_doc_len     tokens per datastore document [100]
    texts_per_class       evaluated texts per class [500]
    text_len              tokens per evaluated text [40]
    prompt_len            unscored leading tokens [0]
    embed_dim             context embedding width [16]
    embed_window          context tokens in the embedding [3]
    proxy_is_source       control run without a proxy gap [false]
    seed                  must be 0 or equal to the top-level seed
  [bound]                 retrieval error bound experiment
    dim                   key dimension [4]
    vocab_size            source vocabulary [6]
    n_entries             datastore size [5000]
    n_queries             fresh queries [1000]
    delta                 failure probability [0.1]
    k                     neighbors [256]
    tau                   temperature [1]
    weight_scale          std of the softmax weights [1]
    seed                  must be 0 or equal to the top-level seed
  [sweep]
    axis                  tau | k | lambda | gamma | corpus-size [tau]
    values                axis values, empty = axis default []

Any key can be overridden with --set section.key=value.
";
