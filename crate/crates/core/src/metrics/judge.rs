//! Open-answer judges.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::text::tokenize;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge request failed after {attempts} attempt(s): {message}")]
    Unavailable { attempts: usize, message: String },
    #[error("judge returned an invalid score: {0}")]
    BadScore(String),
}

/// Rates a predicted answer in `[0, 100]`.
pub trait JudgeClient: Sync {
    fn score(&self, question: &str, gt: &str, pred: &str) -> Result<f64, JudgeError>;
}

/// Deterministic lexical proxy: `100 × token F1` over token multisets.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubJudge;

impl JudgeClient for StubJudge {
    fn score(&self, _question: &str, gt: &str, pred: &str) -> Result<f64, JudgeError> {
        Ok(100.0 * token_f1(&tokenize(pred), &tokenize(gt)))
    }
}

/// F1 of the multiset overlap; two empty texts agree perfectly.
pub fn token_f1(pred: &[String], gt: &[String]) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gt {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gt.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    question: &'a str,
    gt: &'a str,
    pred: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    score: f64,
}

/// POSTs `{question, gt, pred}` and reads `{"score": number}`.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    url: String,
    retries: usize,
    client: reqwest::blocking::Client,
}

impl HttpJudge {
    pub fn new(url: impl Into<String>, timeout: Duration, retries: usize) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| JudgeError::Unavailable {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            url: url.into(),
            retries,
            client,
        })
    }

    fn attempt(&self, body: &JudgeRequest<'_>) -> Result<f64, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| e.to_string())?;
        let parsed: JudgeResponse = resp.json().map_err(|e| e.to_string())?;
        Ok(parsed.score)
    }
}

impl JudgeClient for HttpJudge {
    fn score(&self, question: &str, gt: &str, pred: &str) -> Result<f64, JudgeError> {
        let body = JudgeRequest { question, gt, pred };
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(s) if (0.0..=100.0).contains(&s) => return Ok(s),
                Ok(s) => return Err(JudgeError::BadScore(s.to_string())),
                Err(e) => {
                    log::warn!("judge attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(JudgeError::Unavailable {
            attempts,
            message: last,
        })
    }
}
