//! Standalone wrapping, package detection, length filtering and exact dedup.

use std::collections::HashSet;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::ContentHash;

pub const DOCUMENT_CLASS: &str = r"\documentclass[tikz]{standalone}";
pub const BEGIN_DOCUMENT: &str = r"\begin{document}";
pub const END_DOCUMENT: &str = r"\end{document}";

/// The rule table shipped with the crate.
pub const DEFAULT_RULES_TOML: &str = include_str!("../rules/default_packages.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackageRule {
    pub pattern: String,
    pub directive: String,
    #[serde(default)]
    pub priority: i32,
}

#[derive(Debug, Deserialize)]
struct RuleFile {
    #[serde(default)]
    rule: Vec<PackageRule>,
}

/// A validated, compiled rule table.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<(PackageRule, Regex)>,
}

impl RuleSet {
    /// Compiles all rules, reporting every invalid one at once.
    pub fn new(rules: Vec<PackageRule>) -> Result<Self> {
        let mut problems = Vec::new();
        if rules.is_empty() {
            problems.push("rule table is empty".to_string());
        }
        let mut compiled = Vec::with_capacity(rules.len());
        for (idx, rule) in rules.into_iter().enumerate() {
            let directive = rule.directive.trim();
            if directive.is_empty() || directive.contains('\n') {
                problems.push(format!("rule {idx}: directive must be a single non-empty line"));
            }
            match Regex::new(&rule.pattern) {
                Ok(re) => compiled.push((rule, re)),
                Err(e) => problems.push(format!("rule {idx}: pattern does not compile: {e}")),
            }
        }
        if problems.is_empty() {
            Ok(RuleSet { rules: compiled })
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: RuleFile =
            toml::from_str(text).map_err(|e| Error::config(format!("rule file: {e}")))?;
        Self::new(file.rule)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read rule file {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn default_rules() -> Self {
        Self::from_toml(DEFAULT_RULES_TOML).expect("bundled rule table is valid")
    }

    pub fn rules(&self) -> impl Iterator<Item = &PackageRule> {
        self.rules.iter().map(|(r, _)| r)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Preamble lines whose rule matches `body`, ordered by (priority, directive), deduplicated.
pub fn detect_packages(body: &str, rules: &RuleSet) -> Vec<String> {
    let mut hits: Vec<(i32, &str)> = rules
        .rules
        .iter()
        .filter(|(_, re)| re.is_match(body))
        .map(|(rule, _)| (rule.priority, rule.directive.trim()))
        .collect();
    hits.sort();
    let mut seen = HashSet::new();
    hits.into_iter()
        .filter(|(_, d)| seen.insert(*d))
        .map(|(_, d)| d.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedProgram {
    pub record_id: String,
    pub code: String,
    pub packages: Vec<String>,
    pub char_count: usize,
    /// Length of the wrapped environment body; this is what the length filter sees.
    pub body_char_count: usize,
    pub content_hash: ContentHash,
}

impl NormalizedProgram {
    /// Wraps an arbitrary full document (e.g. a repaired candidate) without re-wrapping.
    pub fn from_code(record_id: impl Into<String>, code: impl Into<String>) -> Self {
        let code = code.into();
        let body_char_count = document_body(&code).map_or(code.chars().count(), |b| b.trim().chars().count());
        NormalizedProgram {
            record_id: record_id.into(),
            char_count: code.chars().count(),
            content_hash: ContentHash::of(code.as_bytes()),
            packages: Vec::new(),
            body_char_count,
            code,
        }
    }

    pub fn with_record_id(mut self, id: impl Into<String>) -> Self {
        self.record_id = id.into();
        self
    }
}

/// Text between `\begin{document}` and the last `\end{document}`, if both exist.
pub fn document_body(code: &str) -> Option<&str> {
    let start = code.find(BEGIN_DOCUMENT)? + BEGIN_DOCUMENT.len();
    let end = code.rfind(END_DOCUMENT)?;
    (start <= end).then(|| &code[start..end])
}

/// Builds the standalone document `class + preamble + begin + body + end`, newline separated.
pub fn wrap_standalone(snippet_body: &str, preamble: &[String]) -> NormalizedProgram {
    let mut code = String::with_capacity(snippet_body.len() + 96);
    code.push_str(DOCUMENT_CLASS);
    code.push('\n');
    for line in preamble {
        code.push_str(line);
        code.push('\n');
    }
    code.push_str(BEGIN_DOCUMENT);
    code.push('\n');
    code.push_str(snippet_body);
    code.push('\n');
    code.push_str(END_DOCUMENT);

    let content_hash = ContentHash::of(code.as_bytes());
    NormalizedProgram {
        record_id: content_hash.to_hex()[..16].to_string(),
        char_count: code.chars().count(),
        body_char_count: snippet_body.chars().count(),
        packages: preamble.to_vec(),
        content_hash,
        code,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        LengthBounds { min: 100, max: 4000 }
    }
}

/// Keep iff `min <= body length <= max`.
pub fn length_filter(p: &NormalizedProgram, bounds: LengthBounds) -> bool {
    (bounds.min..=bounds.max).contains(&p.body_char_count)
}

/// Thread-safe seen-set: each hash is admitted at most once.
#[derive(Debug, Default)]
pub struct Deduplicator {
    seen: Mutex<HashSet<ContentHash>>,
    dropped: std::sync::atomic::AtomicUsize,
}

impl Deduplicator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true the first time a hash is offered.
    pub fn admit(&self, hash: &ContentHash) -> bool {
        let fresh = self.seen.lock().expect("dedup lock poisoned").insert(*hash);
        if !fresh {
            self.dropped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        fresh
    }

    pub fn dropped(&self) -> usize {
        self.dropped.load(std::sync::atomic::Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupOutcome {
    pub kept: Vec<NormalizedProgram>,
    pub dropped: usize,
}

/// Keeps the first program for each content hash, preserving order.
pub fn dedup(programs: impl IntoIterator<Item = NormalizedProgram>) -> DedupOutcome {
    let seen = Deduplicator::new();
    let kept = programs
        .into_iter()
        .filter(|p| seen.admit(&p.content_hash))
        .collect();
    DedupOutcome {
        kept,
        dropped: seen.dropped(),
    }
}
