//! Candidate generation: the JSONL candidate file format, an HTTP client for
//! a sampling endpoint, and a ground-truth oracle for pipeline checks.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::Problem;
use crate::eval::{Candidate, CandidateSet};
use crate::notebook::Notebook;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate candidate set for problem {0}")]
    DuplicateProblem(String),
    #[error("endpoint unreachable after {attempts} attempts: {message}")]
    EndpointUnreachable { attempts: usize, message: String },
    #[error("bad response from endpoint: {0}")]
    BadResponse(String),
    #[error("endpoint returned {got} completions, expected {expected}")]
    ShortResponse { expected: usize, got: usize },
    #[error("auth variable {0} is not set")]
    MissingAuth(String),
    #[error("solution cell {index} out of range for problem {problem_id}")]
    IndexOutOfRange { problem_id: String, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    pub timeout_s: f64,
    pub attempts: usize,
    pub backoff_ms: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n: 100,
            temperature: 0.8,
            top_p: 0.95,
            max_new_tokens: 512,
            endpoint: String::new(),
            auth_env: None,
            timeout_s: 300.0,
            attempts: 3,
            backoff_ms: 500,
        }
    }
}

/// Reads one candidate set per line. Blank lines are skipped.
pub fn load_candidates<R: BufRead>(reader: R) -> Result<Vec<CandidateSet>, GenError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: CandidateSet = serde_json::from_str(&line).map_err(|e| GenError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(set.problem_id.clone()) {
            return Err(GenError::DuplicateProblem(set.problem_id));
        }
        out.push(set);
    }
    Ok(out)
}

pub fn save_candidates<W: Write>(mut writer: W, sets: &[CandidateSet]) -> Result<(), GenError> {
    for set in sets {
        serde_json::to_writer(&mut writer, set).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GenRequest<'a> {
    prompt: &'a str,
    n: usize,
    temperature: f64,
    top_p: f64,
    max_new_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct GenResponse {
    completions: Vec<Candidate>,
}

enum Attempt {
    Retry(String),
    Fatal(GenError),
}

fn post_once(agent: &ureq::Agent, cfg: &GenerationConfig, token: Option<&str>, body: &GenRequest) -> Result<Vec<Candidate>, Attempt> {
    let mut req = agent.post(&cfg.endpoint);
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status().as_u16();
    if status >= 500 {
        return Err(Attempt::Retry(format!("status {status}")));
    }
    if status >= 400 {
        return Err(Attempt::Fatal(GenError::BadResponse(format!("status {status}"))));
    }
    let parsed: GenResponse = resp
        .body_mut()
        .read_json()
        .map_err(|e| Attempt::Fatal(GenError::BadResponse(e.to_string())))?;
    Ok(parsed.completions)
}

/// Samples `cfg.n` completions for one prompt. Transport failures and 5xx
/// responses are retried with exponential backoff.
pub fn http_generate(prompt: &str, cfg: &GenerationConfig) -> Result<Vec<Candidate>, GenError> {
    let token = match &cfg.auth_env {
        Some(var) => Some(std::env::var(var).map_err(|_| GenError::MissingAuth(var.clone()))?),
        None => None,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = GenRequest {
        prompt,
        n: cfg.n,
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        max_new_tokens: cfg.max_new_tokens,
    };
    let attempts = cfg.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        match post_once(&agent, cfg, token.as_deref(), &body) {
            Ok(c) if c.len() < cfg.n => {
                return Err(GenError::ShortResponse {
                    expected: cfg.n,
                    got: c.len(),
                })
            }
            Ok(mut c) => {
                c.truncate(cfg.n);
                return Ok(c);
            }
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(m)) => last = m,
        }
    }
    Err(GenError::EndpointUnreachable {
        attempts,
        message: last,
    })
}

/// Makes a ground-truth solution fail by leaving a bracket open.
pub fn mutate_solution(source: &str) -> String {
    format!("{source}\n(")
}

/// A single candidate holding the notebook's own solution, optionally broken.
pub fn oracle_provider(p: &Problem, nb: &Notebook, mutate: bool) -> Result<CandidateSet, GenError> {
    let cell = nb.cells.get(p.solution_cell_index).ok_or_else(|| GenError::IndexOutOfRange {
        problem_id: p.problem_id.clone(),
        index: p.solution_cell_index,
    })?;
    let text = if mutate {
        mutate_solution(&cell.source)
    } else {
        cell.source.clone()
    };
    Ok(CandidateSet {
        problem_id: p.problem_id.clone(),
        candidates: vec![Candidate::new(text)],
    })
}
