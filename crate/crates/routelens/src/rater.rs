//! Group rater backed by an HTTP endpoint.
//!
//! Each sampled group is POSTed as JSON:
//! `{"group_index": 3, "tokens": [{"token_id": 17, "context": "..."}]}`.
//! The endpoint answers `{"pass": true}` or `{"pass": false}`. Transport or
//! decoding failures count as a rejection and are tallied.

use std::sync::atomic::{AtomicUsize, Ordering};

use routelens_core::paths::{GroupRater, GroupSample};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize)]
struct RateRequest<'a> {
    group_index: usize,
    tokens: Vec<RateToken<'a>>,
}

#[derive(Debug, Serialize)]
struct RateToken<'a> {
    token_id: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct RateResponse {
    pass: bool,
}

pub struct HttpRater {
    endpoint: String,
    agent: ureq::Agent,
    /// Context string per capture token, if text is available.
    contexts: Vec<Option<String>>,
    failures: AtomicUsize,
}

impl HttpRater {
    pub fn new(endpoint: impl Into<String>, contexts: Vec<Option<String>>) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::Agent::new_with_defaults(),
            contexts,
            failures: AtomicUsize::new(0),
        }
    }

    /// Requests that failed outright.
    pub fn failures(&self) -> usize {
        self.failures.load(Ordering::Relaxed)
    }

    fn request(&self, sample: &GroupSample) -> Result<bool, String> {
        let body = RateRequest {
            group_index: sample.group_index,
            tokens: sample
                .members
                .iter()
                .zip(&sample.token_ids)
                .map(|(&m, &token_id)| RateToken {
                    token_id,
                    context: self.contexts.get(m).and_then(|c| c.as_deref()),
                })
                .collect(),
        };
        let json = serde_json::to_string(&body).map_err(|e| e.to_string())?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(json.as_str())
            .map_err(|e| e.to_string())?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        let parsed: RateResponse = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        Ok(parsed.pass)
    }
}

impl GroupRater for HttpRater {
    fn rate(&self, sample: &GroupSample) -> bool {
        match self.request(sample) {
            Ok(pass) => pass,
            Err(_) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }
}
