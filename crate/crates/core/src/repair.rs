//! Iterative repair of uncompilable programs through a chat endpoint.

use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatClient, ChatEndpointConfig, ChatMessage};
use crate::compile::{tail_truncate, Compile, CompileResult};
use crate::error::{Error, Result};
use crate::normalize::{NormalizedProgram, END_DOCUMENT};
use crate::prompts;
use crate::record::RepairOutcome;

pub const EMPTY_LOG_PLACEHOLDER: &str = "(the compiler produced no log output)";
pub const TRUNCATION_MARKER: &str = "[... earlier log output truncated ...]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    pub max_iterations: u32,
    /// Prompt attempt k with attempt k-1's candidate and log instead of the originals.
    pub chain: bool,
    pub max_log_bytes: usize,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig {
            max_iterations: 3,
            chain: true,
            max_log_bytes: 8 * 1024,
        }
    }
}

impl RepairConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.max_iterations == 0 {
            problems.push("repair.max_iterations must be >= 1".to_string());
        }
        if self.max_log_bytes < TRUNCATION_MARKER.len() + 16 {
            problems.push("repair.max_log_bytes is too small".to_string());
        }
        problems
    }
}

/// Instantiates the repair template; the embedded log is at most `max_log_bytes` bytes.
pub fn build_repair_prompt(code: &str, log: &str, max_log_bytes: usize) -> String {
    let log = log.trim_end();
    let embedded = if log.trim().is_empty() {
        EMPTY_LOG_PLACEHOLDER.to_string()
    } else if log.len() > max_log_bytes {
        let budget = max_log_bytes.saturating_sub(TRUNCATION_MARKER.len() + 1);
        format!("{TRUNCATION_MARKER}\n{}", tail_truncate(log, budget))
    } else {
        log.to_string()
    };
    prompts::repair_prompt(code, &embedded)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("response contains no recognizable LaTeX")]
pub struct SanitizeError;

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\n(.*?)```").expect("valid regex"))
}

fn command_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\[A-Za-z]+").expect("valid regex"))
}

/// Reduces an endpoint response to the LaTeX it contains.
pub fn sanitize_response(response: &str) -> std::result::Result<String, SanitizeError> {
    let text = if let (Some(start), Some(end)) = (response.find("\\documentclass"), response.rfind(END_DOCUMENT)) {
        if start < end {
            response[start..end + END_DOCUMENT.len()].to_string()
        } else {
            response.trim().to_string()
        }
    } else if let Some(c) = fence_re().captures(response) {
        c[1].trim().to_string()
    } else {
        let t = response.trim();
        let t = t.strip_prefix("```").map_or(t, |r| r.split_once('\n').map_or("", |(_, b)| b));
        t.trim_end().trim_end_matches("```").trim().to_string()
    };
    if command_re().is_match(&text) {
        Ok(text)
    } else {
        Err(SanitizeError)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairAttempt {
    /// 1-based.
    pub iteration: u32,
    pub prompt: String,
    pub response: Option<String>,
    pub candidate_code: Option<String>,
    pub compile: Option<CompileResult>,
    /// Endpoint or sanitation failure, when no candidate was compiled.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairSession {
    pub record_id: String,
    pub attempts: Vec<RepairAttempt>,
    pub max_iterations: u32,
    pub outcome: RepairOutcome,
}

impl RepairSession {
    /// The compiling candidate, if any.
    pub fn repaired_code(&self) -> Option<&str> {
        match self.outcome {
            RepairOutcome::RepairedAt(k) => self.attempts[k as usize - 1].candidate_code.as_deref(),
            _ => None,
        }
    }

    pub fn final_compile(&self) -> Option<&CompileResult> {
        self.attempts.iter().rev().find_map(|a| a.compile.as_ref())
    }
}

/// Runs up to `cfg.max_iterations` prompt/compile rounds, stopping at the first success.
pub fn repair_loop(
    p: &NormalizedProgram,
    first_failure: &CompileResult,
    client: &dyn ChatClient,
    endpoint: &ChatEndpointConfig,
    cfg: &RepairConfig,
    compiler: &dyn Compile,
) -> Result<RepairSession> {
    if first_failure.status.is_ok() {
        return Err(Error::invalid(format!("record {} already compiles", p.record_id)));
    }
    let mut code = p.code.clone();
    let mut log = first_failure.log_text.clone();
    let mut attempts = Vec::new();
    let mut outcome = RepairOutcome::Failed;

    for iteration in 1..=cfg.max_iterations {
        let prompt = build_repair_prompt(&code, &log, cfg.max_log_bytes);
        let request = endpoint.request(vec![ChatMessage::user(prompt.clone())]);
        let mut attempt = RepairAttempt {
            iteration,
            prompt,
            response: None,
            candidate_code: None,
            compile: None,
            error: None,
        };
        let response = match client.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                attempt.error = Some(e.to_string());
                attempts.push(attempt);
                continue;
            }
        };
        attempt.response = Some(response.clone());
        let candidate = match sanitize_response(&response) {
            Ok(c) => c,
            Err(e) => {
                attempt.error = Some(e.to_string());
                attempts.push(attempt);
                continue;
            }
        };
        let result = compiler.compile(&NormalizedProgram::from_code(&p.record_id, candidate.clone()))?;
        let ok = result.status.is_ok();
        if cfg.chain {
            code = candidate.clone();
            log = result.log_text.clone();
        }
        attempt.candidate_code = Some(candidate);
        attempt.compile = Some(result);
        attempts.push(attempt);
        if ok {
            outcome = RepairOutcome::RepairedAt(iteration);
            break;
        }
    }

    Ok(RepairSession {
        record_id: p.record_id.clone(),
        attempts,
        max_iterations: cfg.max_iterations,
        outcome,
    })
}

/// Repairs many records on `jobs` workers; order follows the input.
pub fn repair_all(
    items: &[(NormalizedProgram, CompileResult)],
    client: &dyn ChatClient,
    endpoint: &ChatEndpointConfig,
    cfg: &RepairConfig,
    compiler: &dyn Compile,
    jobs: usize,
) -> Result<Vec<RepairSession>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Infrastructure(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        items
            .par_iter()
            .map(|(p, first)| repair_loop(p, first, client, endpoint, cfg, compiler))
            .collect()
    })
}

/// Entry `i` is the fraction of sessions repaired within `i + 1` iterations.
pub fn cumulative_success(sessions: &[RepairSession], max_iterations: u32) -> Vec<f64> {
    let n = sessions.len().max(1) as f64;
    (1..=max_iterations)
        .map(|i| {
            sessions
                .iter()
                .filter(|s| matches!(s.outcome, RepairOutcome::RepairedAt(k) if k <= i))
                .count() as f64
                / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_placeholder_for_empty_log() {
        let p = build_repair_prompt("X", "  \n", 1000);
        assert!(p.ends_with(&format!("Compilation Error Log:\n{EMPTY_LOG_PLACEHOLDER}")));
    }

    #[test]
    fn long_log_is_tail_truncated() {
        let log = format!("{}THE END", "a".repeat(10_000));
        let p = build_repair_prompt("X", &log, 500);
        let embedded = p.split("Compilation Error Log:\n").nth(1).unwrap();
        assert!(embedded.len() <= 500);
        assert!(embedded.starts_with(TRUNCATION_MARKER));
        assert!(embedded.ends_with("THE END"));
        assert_eq!(p, build_repair_prompt("X", &log, 500));
    }

    #[test]
    fn sanitize_cases() {
        let doc = "\\documentclass[tikz]{standalone}\n\\begin{document}\nx\n\\end{document}";
        assert_eq!(sanitize_response(&format!("```latex\n{doc}\n```")).unwrap(), doc);
        assert_eq!(sanitize_response(doc).unwrap(), doc);
        assert_eq!(sanitize_response(&format!("Sure! Here is the fix: {doc}\nGood luck.")).unwrap(), doc);
        assert_eq!(
            sanitize_response("Try:\n```tex\n\\begin{tikzpicture}\\end{tikzpicture}\n```\n").unwrap(),
            "\\begin{tikzpicture}\\end{tikzpicture}"
        );
        assert!(sanitize_response("I cannot help with that.").is_err());
        assert!(sanitize_response("").is_err());
    }
}
