//! Remote model served over HTTP.
//!
//! Request body: `{"token_ids": [...], "need_embeddings": true, "layer": -1}`.
//! Response body: `{"embeddings": [[f32; d]; T], "log_probs": [[f32; V]; T]}`,
//! one row per position of the request.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LmProvider, LmStep};
use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::prob::{ProbDist, TokenSequence};

pub const LM_URL_ENV: &str = "KNNPROXY_LM_URL";
pub const LM_TOKEN_ENV: &str = "KNNPROXY_LM_TOKEN";

const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_BASE: Duration = Duration::from_millis(100);

#[derive(Debug, Serialize)]
struct StepsRequest<'a> {
    token_ids: &'a [u32],
    need_embeddings: bool,
    layer: i32,
}

#[derive(Debug, Deserialize)]
struct StepsResponse {
    embeddings: Vec<Vec<f32>>,
    log_probs: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct HttpProvider {
    url: String,
    token: Option<String>,
    vocab_size: usize,
    dim: usize,
    layer: i32,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(
        url: impl Into<String>,
        token: Option<String>,
        vocab_size: usize,
        dim: usize,
        layer: i32,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .new_agent();
        Self {
            url: url.into(),
            token,
            vocab_size,
            dim,
            layer,
            agent,
        }
    }

    /// Endpoint and bearer token from `KNNPROXY_LM_URL` / `KNNPROXY_LM_TOKEN`.
    pub fn from_env(vocab_size: usize, dim: usize, layer: i32) -> Result<Self> {
        let url = std::env::var(LM_URL_ENV)
            .map_err(|_| Error::Config(format!("{LM_URL_ENV} is not set")))?;
        let token = std::env::var(LM_TOKEN_ENV).ok();
        Ok(Self::new(url, token, vocab_size, dim, layer))
    }

    fn request_once(
        &self,
        seq: &TokenSequence,
    ) -> std::result::Result<StepsResponse, (bool, String)> {
        let mut req = self.agent.post(&self.url);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", format!("Bearer {tok}"));
        }
        let body = StepsRequest {
            token_ids: seq.ids(),
            need_embeddings: true,
            layer: self.layer,
        };
        match req.send_json(&body) {
            Ok(mut resp) => resp
                .body_mut()
                .read_json::<StepsResponse>()
                .map_err(|e| (false, format!("malformed response: {e}"))),
            // client errors will not improve on retry
            Err(ureq::Error::StatusCode(code)) => {
                Err((code >= 500 || code == 429, format!("HTTP status {code}")))
            }
            Err(e) => Err((true, e.to_string())),
        }
    }
}

impl LmProvider for HttpProvider {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        Fingerprint::default()
            .str("http")
            .str(&self.url)
            .u64(self.layer as u64)
            .u64(self.vocab_size as u64)
            .u64(self.dim as u64)
            .hex()
    }

    fn lm_steps(&self, seq: &TokenSequence) -> Result<Vec<LmStep>> {
        seq.validate(self.vocab_size)?;
        let mut attempt = 0;
        let resp = loop {
            attempt += 1;
            match self.request_once(seq) {
                Ok(r) => break r,
                Err((retryable, reason)) => {
                    if !retryable || attempt >= MAX_ATTEMPTS {
                        return Err(Error::Transport {
                            attempts: attempt,
                            reason,
                        });
                    }
                    tracing::warn!(attempt, %reason, "retrying LM request");
                    thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
                }
            }
        };
        let t = seq.len();
        if resp.embeddings.len() != t || resp.log_probs.len() != t {
            return Err(Error::Validation(format!(
                "server returned {} embeddings / {} distributions for {t} tokens",
                resp.embeddings.len(),
                resp.log_probs.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .zip(resp.log_probs)
            .map(|(embedding, lp)| {
                if embedding.len() != self.dim {
                    return Err(Error::Dimension {
                        expected: self.dim,
                        got: embedding.len(),
                    });
                }
                if lp.len() != self.vocab_size {
                    return Err(Error::Dimension {
                        expected: self.vocab_size,
                        got: lp.len(),
                    });
                }
                Ok(LmStep {
                    embedding,
                    dist: ProbDist::from_log_probs(&lp),
                })
            })
            .collect()
    }
}
