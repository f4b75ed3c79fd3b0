//! Extraction of TikZ environments from raw TeX sources.
//!
//! The scanner is a single forward pass that understands just enough TeX to be
//! useful on messy corpora: escapes (`\%`, `\\`), line comments, `\verb`
//! and opaque verbatim-like environments. Everything else is treated as text.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::record::{SourceDocument, SourceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Tikzpicture,
    Tikzcd,
    Circuitikz,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Tikzpicture => "tikzpicture",
            EnvKind::Tikzcd => "tikzcd",
            EnvKind::Circuitikz => "circuitikz",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tikzpicture" => Some(EnvKind::Tikzpicture),
            "tikzcd" => Some(EnvKind::Tikzcd),
            "circuitikz" => Some(EnvKind::Circuitikz),
            _ => None,
        }
    }
}

/// Environments whose content is literal text: nothing inside is extracted or stripped.
pub const VERBATIM_ENVS: &[&str] = &[
    "verbatim",
    "verbatim*",
    "Verbatim",
    "lstlisting",
    "minted",
    "comment",
    "filecontents",
    "filecontents*",
];

/// Containers whose target environments count as siblings of one figure.
pub const CONTAINER_ENVS: &[&str] = &["figure", "figure*", "subfigure", "minipage", "tabular"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedSnippet {
    pub doc_id: String,
    pub env_kind: EnvKind,
    pub body: String,
    pub byte_span: (usize, usize),
    pub sibling_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// `\begin` without a matching `\end`; the region is skipped.
    UnclosedBegin,
    /// `\end` without an open environment of the same name.
    StrayEnd,
    /// A verbatim-like environment ran to the end of the document.
    UnclosedVerbatim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractDiagnostic {
    pub doc_id: String,
    pub kind: DiagnosticKind,
    pub env: String,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub snippets: Vec<ExtractedSnippet>,
    pub diagnostics: Vec<ExtractDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Begin { name: String, span: Range<usize> },
    End { name: String, span: Range<usize> },
    Comment(Range<usize>),
    /// Verbatim region with no closing `\end`.
    OpenVerbatim { name: String, start: usize },
}

fn is_env_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'*' | b'-' | b'_' | b'@' | b'.')
}

/// Parses `{name}` after `\begin`/`\end`, allowing blanks before the brace.
/// Returns the name and the offset just past `}`.
fn read_env_name(bytes: &[u8], mut i: usize) -> Option<(String, usize)> {
    while i < bytes.len() && matches!(bytes[i], b' ' | b'\t' | b'\r' | b'\n') {
        i += 1;
    }
    if bytes.get(i) != Some(&b'{') {
        return None;
    }
    let start = i + 1;
    let mut j = start;
    while j < bytes.len() && is_env_name_byte(bytes[j]) {
        j += 1;
    }
    if j == start || bytes.get(j) != Some(&b'}') {
        return None;
    }
    let name = std::str::from_utf8(&bytes[start..j]).ok()?.to_string();
    Some((name, j + 1))
}

fn find_verbatim_end(text: &str, from: usize, name: &str) -> Option<Range<usize>> {
    let bytes = text.as_bytes();
    let mut pos = from;
    while let Some(off) = text[pos..].find("\\end") {
        let at = pos + off;
        if let Some((found, end)) = read_env_name(bytes, at + 4) {
            if found == name {
                return Some(at..end);
            }
        }
        pos = at + 4;
    }
    None
}

fn scan(text: &str) -> Vec<Event> {
    let bytes = text.as_bytes();
    let mut events = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' => {
                let end = memchr_newline(bytes, i);
                events.push(Event::Comment(i..end));
                i = end;
            }
            b'\\' => {
                let mut j = i + 1;
                while j < bytes.len() && bytes[j].is_ascii_alphabetic() {
                    j += 1;
                }
                if j == i + 1 {
                    // control symbol such as \% or \\ ; skip the escaped byte
                    i = (i + 2).min(bytes.len());
                    // keep i on a char boundary when the escaped char is multibyte
                    while i < bytes.len() && !text.is_char_boundary(i) {
                        i += 1;
                    }
                    continue;
                }
                let word = &text[i + 1..j];
                match word {
                    "begin" | "end" => match read_env_name(bytes, j) {
                        Some((name, end)) => {
                            if word == "begin" && VERBATIM_ENVS.contains(&name.as_str()) {
                                match find_verbatim_end(text, end, &name) {
                                    Some(close) => i = close.end,
                                    None => {
                                        events.push(Event::OpenVerbatim { name, start: i });
                                        i = bytes.len();
                                    }
                                }
                                continue;
                            }
                            let span = i..end;
                            events.push(if word == "begin" {
                                Event::Begin { name, span }
                            } else {
                                Event::End { name, span }
                            });
                            i = end;
                        }
                        None => i = j,
                    },
                    "verb" => {
                        let mut k = j;
                        if bytes.get(k) == Some(&b'*') {
                            k += 1;
                        }
                        match bytes.get(k) {
                            Some(&delim) if !delim.is_ascii_alphabetic() && delim.is_ascii() && delim > b' ' => {
                                let close = bytes[k + 1..]
                                    .iter()
                                    .position(|&b| b == delim || b == b'\n')
                                    .map(|p| k + 1 + p);
                                i = match close {
                                    Some(c) if bytes[c] == delim => c + 1,
                                    Some(c) => c,
                                    None => bytes.len(),
                                };
                            }
                            _ => i = j,
                        }
                    }
                    _ => i = j,
                }
            }
            _ => i += 1,
        }
    }
    events
}

fn memchr_newline(bytes: &[u8], from: usize) -> usize {
    bytes[from..]
        .iter()
        .position(|&b| b == b'\n')
        .map_or(bytes.len(), |p| from + p)
}

/// Removes every unescaped `%` up to (not including) the next newline.
/// Verbatim-like regions are copied untouched.
pub fn strip_comments(body: &str) -> String {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for ev in scan(body) {
        if let Event::Comment(r) = ev {
            out.push_str(&body[last..r.start]);
            last = r.end;
        }
    }
    out.push_str(&body[last..]);
    out
}

/// True when the (comment-stripped) body depends on files outside itself.
pub fn has_external_refs(body: &str) -> bool {
    use std::sync::OnceLock;
    static DIRECT: OnceLock<regex::Regex> = OnceLock::new();
    static TABLE_READ: OnceLock<regex::Regex> = OnceLock::new();
    static ADDPLOT: OnceLock<regex::Regex> = OnceLock::new();

    let direct = DIRECT.get_or_init(|| {
        regex::Regex::new(r"\\(?:input|include|includegraphics|includestandalone|lstinputlisting)\b")
            .expect("static regex")
    });
    if direct.is_match(body) {
        return true;
    }
    let table_read = TABLE_READ
        .get_or_init(|| regex::Regex::new(r"\\pgfplotstableread\s*(?:\[[^\]]*\])?\s*\{([^{}]*)\}").expect("static regex"));
    if table_read.captures_iter(body).any(|c| looks_like_file_name(&c[1])) {
        return true;
    }
    let addplot = ADDPLOT.get_or_init(|| {
        regex::Regex::new(
            r"\\addplot3?\s*\+?\s*(?:\[[^\]]*\])?\s*(?:table|file)\s*(?:\[[^\]]*\])?\s*\{([^{}]*)\}",
        )
        .expect("static regex")
    });
    addplot.captures_iter(body).any(|c| looks_like_file_name(&c[1]))
}

/// A braced argument names a file when it is a single bare path, not inline data or a macro.
fn looks_like_file_name(arg: &str) -> bool {
    let arg = arg.trim();
    !arg.is_empty()
        && !arg.starts_with('\\')
        && !arg.chars().any(char::is_whitespace)
        && arg.chars().any(|c| c.is_ascii_alphabetic())
}

struct Pair {
    name: String,
    span: Range<usize>,
}

/// Stack-matches `\begin`/`\end` events restricted to names accepted by `keep`.
/// Unmatched begins are reported and dropped; matched pairs never cross.
fn match_pairs(
    events: &[Event],
    keep: impl Fn(&str) -> bool,
    mut diag: impl FnMut(DiagnosticKind, &str, usize),
) -> Vec<Pair> {
    let mut stack: Vec<(String, usize)> = Vec::new();
    let mut pairs = Vec::new();
    for ev in events {
        match ev {
            Event::Begin { name, span } if keep(name) => stack.push((name.clone(), span.start)),
            Event::End { name, span } if keep(name) => {
                match stack.iter().rposition(|(n, _)| n == name) {
                    Some(k) => {
                        for (open, at) in stack.drain(k + 1..) {
                            diag(DiagnosticKind::UnclosedBegin, &open, at);
                        }
                        let (_, start) = stack.pop().expect("position found");
                        pairs.push(Pair {
                            name: name.clone(),
                            span: start..span.end,
                        });
                    }
                    None => diag(DiagnosticKind::StrayEnd, name, span.start),
                }
            }
            _ => {}
        }
    }
    for (open, at) in stack {
        diag(DiagnosticKind::UnclosedBegin, &open, at);
    }
    pairs.sort_by_key(|p| (p.span.start, std::cmp::Reverse(p.span.end)));
    pairs
}

/// Drops pairs nested inside an earlier pair. Input must be sorted by start,
/// longest first on ties.
fn outermost(pairs: Vec<Pair>) -> Vec<Pair> {
    let mut out: Vec<Pair> = Vec::new();
    for p in pairs {
        if out.last().is_some_and(|last| p.span.start < last.span.end) {
            continue;
        }
        out.push(p);
    }
    out
}

/// Extracts every outermost balanced tikzpicture / tikzcd / circuitikz environment.
pub fn extract_environments(doc: &SourceDocument) -> Extraction {
    let text = doc.raw_text.as_str();
    let events = scan(text);
    let mut diagnostics = Vec::new();

    for ev in &events {
        if let Event::OpenVerbatim { name, start } = ev {
            diagnostics.push(ExtractDiagnostic {
                doc_id: doc.id.clone(),
                kind: DiagnosticKind::UnclosedVerbatim,
                env: name.clone(),
                byte_offset: *start,
            });
        }
    }

    let targets = match_pairs(
        &events,
        |n| EnvKind::from_name(n).is_some(),
        |kind, env, at| {
            diagnostics.push(ExtractDiagnostic {
                doc_id: doc.id.clone(),
                kind,
                env: env.to_string(),
                byte_offset: at,
            })
        },
    );
    let targets = outermost(targets);

    // Container mismatches are common and harmless; they are not reported.
    let containers = outermost(match_pairs(&events, |n| CONTAINER_ENVS.contains(&n), |_, _, _| {}));

    let mut per_container: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    let snippets = targets
        .into_iter()
        .map(|p| {
            let container = containers
                .iter()
                .position(|c| c.span.start <= p.span.start && p.span.end <= c.span.end);
            let counter = per_container.entry(container).or_insert(0);
            let sibling_index = if container.is_some() { *counter } else { 0 };
            *counter += 1;
            ExtractedSnippet {
                doc_id: doc.id.clone(),
                env_kind: EnvKind::from_name(&p.name).expect("filtered to targets"),
                body: text[p.span.clone()].to_string(),
                byte_span: (p.span.start, p.span.end),
                sibling_index,
                source: Some(doc.meta()),
            }
        })
        .collect();

    diagnostics.sort_by_key(|d| d.byte_offset);
    Extraction {
        snippets,
        diagnostics,
    }
}

/// Checks that `body` is exactly one balanced target environment.
pub fn is_balanced_environment(body: &str) -> bool {
    let events = scan(body);
    let mut errors = 0usize;
    let pairs = match_pairs(&events, |n| EnvKind::from_name(n).is_some(), |_, _, _| errors += 1);
    errors == 0 && pairs.first().is_some_and(|p| p.span == (0..body.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::SourceKind;

    fn doc(text: &str) -> SourceDocument {
        SourceDocument::from_bytes("doc", SourceKind::Arxiv, text.as_bytes(), "origin")
    }

    #[test]
    fn single_tikzpicture() {
        let text = r"\begin{tikzpicture}\draw(0,0)--(1,1);\end{tikzpicture}";
        let ex = extract_environments(&doc(text));
        assert_eq!(ex.snippets.len(), 1);
        assert_eq!(ex.snippets[0].env_kind, EnvKind::Tikzpicture);
        assert_eq!(ex.snippets[0].body, text);
        assert!(ex.diagnostics.is_empty());
    }

    #[test]
    fn figure_with_two_pictures_gets_sibling_indices() {
        let text = "\\begin{figure}\n\\begin{tikzpicture}\\draw (0,0)--(1,0);\\end{tikzpicture}\n\\hfill\n\\begin{tikzpicture}\\fill (0,0) circle (1);\\end{tikzpicture}\n\\caption{Two}\\end{figure}";
        let ex = extract_environments(&doc(text));
        let idx: Vec<_> = ex.snippets.iter().map(|s| s.sibling_index).collect();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn circuitikz_dispatch() {
        let ex = extract_environments(&doc(r"x \begin{circuitikz}\draw (0,0) to[R] (2,0);\end{circuitikz} y"));
        assert_eq!(ex.snippets.len(), 1);
        assert_eq!(ex.snippets[0].env_kind, EnvKind::Circuitikz);
    }

    #[test]
    fn nested_pictures_emit_outermost_only() {
        let text = r"\begin{tikzpicture}\node {\begin{tikzpicture}\draw (0,0) -- (1,1);\end{tikzpicture}};\end{tikzpicture}";
        let ex = extract_environments(&doc(text));
        assert_eq!(ex.snippets.len(), 1);
        assert_eq!(ex.snippets[0].byte_span, (0, text.len()));
    }

    #[test]
    fn unbalanced_begin_is_skipped_with_diagnostic() {
        let text = "\\begin{tikzpicture}\\draw (0,0);\n\n\\begin{tikzcd} A \\arrow[r] & B \\end{tikzcd}";
        let ex = extract_environments(&doc(text));
        assert_eq!(ex.snippets.len(), 1);
        assert_eq!(ex.snippets[0].env_kind, EnvKind::Tikzcd);
        assert_eq!(ex.diagnostics.len(), 1);
        assert_eq!(ex.diagnostics[0].kind, DiagnosticKind::UnclosedBegin);
        assert_eq!(ex.diagnostics[0].byte_offset, 0);
    }

    #[test]
    fn stray_end_is_reported() {
        let ex = extract_environments(&doc(r"text \end{tikzpicture} more"));
        assert!(ex.snippets.is_empty());
        assert_eq!(ex.diagnostics[0].kind, DiagnosticKind::StrayEnd);
    }

    #[test]
    fn commented_and_verbatim_environments_are_ignored() {
        let text = "% \\begin{tikzpicture}\\end{tikzpicture}\n\\begin{verbatim}\n\\begin{tikzpicture}\\end{tikzpicture}\n\\end{verbatim}\n\\verb|\\begin{tikzpicture}|";
        let ex = extract_environments(&doc(text));
        assert!(ex.snippets.is_empty(), "{:?}", ex.snippets);
        assert!(ex.diagnostics.is_empty());
    }

    #[test]
    fn optional_arguments_stay_in_body() {
        let text = r"\begin{tikzpicture}[scale=2]\draw (0,0) -- (1,0);\end{tikzpicture}";
        let ex = extract_environments(&doc(text));
        assert!(ex.snippets[0].body.starts_with(r"\begin{tikzpicture}[scale=2]"));
    }

    #[test]
    fn span_matches_body_with_multibyte_text() {
        let text = "Ünïcödé → \\begin{tikzpicture}\\node {ä};\\end{tikzpicture} ✓";
        let d = doc(text);
        let ex = extract_environments(&d);
        let (s, e) = ex.snippets[0].byte_span;
        assert_eq!(&d.raw_text[s..e], ex.snippets[0].body);
    }

    #[test]
    fn strip_comment_examples() {
        assert_eq!(strip_comments("a % note\nb"), "a \nb");
        assert_eq!(strip_comments("50\\% done"), "50\\% done");
        assert_eq!(strip_comments(""), "");
        // escaped backslash followed by a real comment
        assert_eq!(strip_comments("x\\\\% gone\ny"), "x\\\\\ny");
        assert_eq!(strip_comments("last % no newline"), "last ");
    }

    #[test]
    fn strip_comments_leaves_verbatim_alone() {
        let text = "\\begin{lstlisting}\n50% literal\n\\end{lstlisting} % gone";
        assert_eq!(strip_comments(text), "\\begin{lstlisting}\n50% literal\n\\end{lstlisting} ");
    }

    #[test]
    fn external_refs() {
        assert!(has_external_refs(r"\node {\includegraphics{fig.png}};"));
        assert!(has_external_refs(r"\input{preamble}"));
        assert!(has_external_refs(r"\include{chapter}"));
        assert!(has_external_refs(r"\includestandalone{sub}"));
        assert!(has_external_refs(r"\lstinputlisting{code.py}"));
        assert!(has_external_refs(r"\pgfplotstableread{data.dat}\loadedtable"));
        assert!(has_external_refs(r"\addplot table [x=a, y=b] {results.csv};"));
        assert!(has_external_refs(r"\addplot+[mark=*] table {results.csv};"));
        assert!(!has_external_refs(r"\draw (0,0) -- (1,1); \node at (0,0) {input};"));
        assert!(!has_external_refs(r"\addplot table {x y
0 1
1 2
};"));
        assert!(!has_external_refs(r"\addplot table {\loadedtable};"));
        assert!(!has_external_refs(r"\inputlineno"));
    }

    #[test]
    fn balanced_check() {
        assert!(is_balanced_environment(r"\begin{tikzpicture}\end{tikzpicture}"));
        assert!(!is_balanced_environment(r"\begin{tikzpicture}"));
        assert!(!is_balanced_environment(r"\begin{tikzpicture}\end{tikzpicture} x"));
    }
}
