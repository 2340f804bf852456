//! Pipeline-side evaluator backed by a running rating service.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use perceptscore_core::evaluators::{check_batch, EvalError, Evaluator, PairQuery, PairResponse};
use reqwest::blocking::Client;

use crate::store::{EnqueueAck, Progress};

/// Posts queries to `/queries`, then polls `/responses` until every query is
/// answered or `timeout` elapses.
pub struct RemoteEvaluator {
    base_url: String,
    client: Client,
    pub poll_interval: Duration,
    pub timeout: Duration,
}

impl RemoteEvaluator {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteEvaluator {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client: Client::new(),
            poll_interval: Duration::from_secs(2),
            timeout: Duration::from_secs(24 * 3600),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll_interval = poll;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    pub fn enqueue(&self, queries: &[PairQuery]) -> Result<EnqueueAck, EvalError> {
        let resp = self
            .client
            .post(self.url("/queries"))
            .json(queries)
            .send()
            .map_err(transport)?;
        if !resp.status().is_success() {
            let status = resp.status();
            let body = resp.text().unwrap_or_default();
            return Err(EvalError::InvalidBatch(format!("service rejected queries ({status}): {body}")));
        }
        resp.json().map_err(transport)
    }

    pub fn responses(&self) -> Result<Vec<PairResponse>, EvalError> {
        self.client
            .get(self.url("/responses"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(transport)
    }

    pub fn progress(&self) -> Result<Progress, EvalError> {
        self.client
            .get(self.url("/progress"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(transport)
    }
}

fn transport(e: reqwest::Error) -> EvalError {
    EvalError::Transport(e.to_string())
}

impl Evaluator for RemoteEvaluator {
    fn evaluate_batch(&self, queries: &[PairQuery]) -> Result<Vec<PairResponse>, EvalError> {
        check_batch(queries)?;
        self.enqueue(queries)?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let mut by_id: HashMap<String, PairResponse> =
                self.responses()?.into_iter().map(|r| (r.query_id.clone(), r)).collect();
            let unanswered: Vec<String> = queries
                .iter()
                .filter(|q| !by_id.contains_key(&q.query_id))
                .map(|q| q.query_id.clone())
                .collect();
            let answered: Vec<PairResponse> = queries.iter().filter_map(|q| by_id.remove(&q.query_id)).collect();
            if unanswered.is_empty() {
                return Ok(answered);
            }
            if Instant::now() >= deadline {
                return Err(EvalError::Timeout { unanswered, answered });
            }
            std::thread::sleep(self.poll_interval.min(deadline.saturating_duration_since(Instant::now())));
        }
    }
}
