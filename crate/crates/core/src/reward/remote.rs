//! HTTP client for an external reward model.
//!
//! Wire format (one POST per query, JSON both ways):
//!
//! ```text
//! -> {"request_id": "...", "kind": "alignment" | "creativity", "prompt_id": 3,
//!     "candidate": [{"dimension_index": 1, "content": ["ratio-4:3"]}, ...],
//!     "candidate_raw": "<d1> ratio-4:3 </d1> ...",
//!     "reference": [...]}                          // alignment only
//! <- {"request_id": "...", "score_probs": {"0": p0, "1": p1, ..., "5": p5}}
//! ```
//!
//! The request id is a digest of the query content, so a retried request is
//! byte-identical and the server can deduplicate it.

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grammar::{hex_digest, ActionPlan, PlanRecord, TokenId, Vocabulary};
use crate::PromptId;

use super::{OracleError, RewardOracle, ScoreDistribution, STANDARD_SCORE_VALUES};

/// Environment variable holding the bearer token for the remote oracle.
pub const TOKEN_ENV: &str = "AESFORMER_ORACLE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteOracleConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RemoteOracleConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8089/score".into(),
            timeout_ms: 30_000,
            max_retries: 4,
            backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Alignment,
    Creativity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub request_id: String,
    pub kind: QueryKind,
    pub prompt_id: u32,
    pub candidate: PlanRecord,
    pub candidate_raw: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PlanRecord>,
}

impl OracleRequest {
    pub fn new(
        kind: QueryKind,
        prompt: PromptId,
        candidate: &[TokenId],
        reference: Option<&ActionPlan>,
        vocab: &Vocabulary,
    ) -> Self {
        let mut req = OracleRequest {
            request_id: String::new(),
            kind,
            prompt_id: prompt.0,
            candidate: PlanRecord::from_tokens(candidate, vocab),
            candidate_raw: vocab.render(candidate),
            reference: reference.map(|r| PlanRecord::from_plan(r, vocab)),
        };
        let canonical = serde_json::to_vec(&req).expect("request serializes");
        req.request_id = hex_digest(&Sha256::digest(&canonical))[..32].to_string();
        req
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub request_id: String,
    pub score_probs: BTreeMap<String, f64>,
}

impl OracleResponse {
    pub fn into_distribution(self, expected_id: &str) -> Result<ScoreDistribution, OracleError> {
        if self.request_id != expected_id {
            return Err(OracleError::Malformed(format!(
                "response id {} does not match request {}",
                self.request_id, expected_id
            )));
        }
        if self.score_probs.len() != STANDARD_SCORE_VALUES.len() {
            return Err(OracleError::Malformed(format!(
                "expected {} score tokens, got {}",
                STANDARD_SCORE_VALUES.len(),
                self.score_probs.len()
            )));
        }
        let weights = STANDARD_SCORE_VALUES
            .iter()
            .map(|v| {
                let key = format!("{v}");
                self.score_probs
                    .get(&key)
                    .copied()
                    .ok_or_else(|| OracleError::Malformed(format!("missing score token {key:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScoreDistribution::from_weights(
            STANDARD_SCORE_VALUES.to_vec(),
            weights,
        )?)
    }
}

enum Attempt {
    Retry(String),
    Fatal(OracleError),
}

pub struct RemoteRewardOracle {
    config: RemoteOracleConfig,
    vocab: Vocabulary,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteRewardOracle {
    pub fn new(config: RemoteOracleConfig, vocab: Vocabulary) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            vocab,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            agent,
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .config
            .backoff_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.config.max_backoff_ms);
        Duration::from_millis(ms)
    }

    fn send_once(&self, req: &OracleRequest, body: &str) -> Result<ScoreDistribution, Attempt> {
        let mut call = self
            .agent
            .post(&self.config.endpoint)
            .header("content-type", "application/json")
            .header("x-request-id", &req.request_id);
        if let Some(t) = &self.token {
            call = call.header("authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(OracleError::Malformed(format!("HTTP {status}"))));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let parsed: OracleResponse =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(OracleError::Malformed(e.to_string())))?;
        parsed.into_distribution(&req.request_id).map_err(Attempt::Fatal)
    }

    pub fn query(&self, req: &OracleRequest) -> Result<ScoreDistribution, OracleError> {
        let body = serde_json::to_string(req).map_err(|e| OracleError::Malformed(e.to_string()))?;
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff(attempt - 1));
            }
            match self.send_once(req, &body) {
                Ok(d) => return Ok(d),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(OracleError::Unavailable(format!(
            "{} after {} attempts: {last}",
            self.config.endpoint,
            self.config.max_retries + 1
        )))
    }
}

impl RewardOracle for RemoteRewardOracle {
    fn alignment(
        &self,
        prompt: PromptId,
        candidate: &[TokenId],
        reference: &ActionPlan,
    ) -> Result<ScoreDistribution, OracleError> {
        let req = OracleRequest::new(QueryKind::Alignment, prompt, candidate, Some(reference), &self.vocab);
        self.query(&req)
    }

    fn creativity(&self, prompt: PromptId, candidate: &[TokenId]) -> Result<ScoreDistribution, OracleError> {
        let req = OracleRequest::new(QueryKind::Creativity, prompt, candidate, None, &self.vocab);
        self.query(&req)
    }
}
