//! TeX tokenization, TeX edit distance, compilation rate, average tokens and the AVG aggregate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Command,
    BeginGroup,
    EndGroup,
    MathShift,
    TextWord,
    Number,
    Symbol,
    WhitespaceCollapsed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TexToken {
    pub kind: TokenKind,
    pub lexeme: String,
}

/// Lexes TeX source. Whitespace runs become a single `" "` token.
pub fn tex_tokenize(code: &str) -> Vec<TexToken> {
    let chars: Vec<(usize, char)> = code.char_indices().collect();
    let slice = |a: usize, b: usize| -> &str {
        let start = chars[a].0;
        let end = chars.get(b).map_or(code.len(), |c| c.0);
        &code[start..end]
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        let (kind, end) = if c == '\\' {
            let mut j = i + 1;
            if j < chars.len() && chars[j].1.is_ascii_alphabetic() {
                while j < chars.len() && chars[j].1.is_ascii_alphabetic() {
                    j += 1;
                }
            } else if j < chars.len() {
                j += 1;
            }
            (TokenKind::Command, j)
        } else if c.is_whitespace() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            out.push(TexToken {
                kind: TokenKind::WhitespaceCollapsed,
                lexeme: " ".into(),
            });
            i = j;
            continue;
        } else if c.is_ascii_digit() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_ascii_digit() {
                j += 1;
            }
            if j + 1 < chars.len() && chars[j].1 == '.' && chars[j + 1].1.is_ascii_digit() {
                j += 1;
                while j < chars.len() && chars[j].1.is_ascii_digit() {
                    j += 1;
                }
            }
            (TokenKind::Number, j)
        } else if c.is_alphabetic() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_alphabetic() {
                j += 1;
            }
            (TokenKind::TextWord, j)
        } else {
            let kind = match c {
                '{' => TokenKind::BeginGroup,
                '}' => TokenKind::EndGroup,
                '$' => TokenKind::MathShift,
                _ => TokenKind::Symbol,
            };
            (kind, i + 1)
        };
        out.push(TexToken {
            kind,
            lexeme: slice(i, end).to_string(),
        });
        i = end;
    }
    out
}

/// Non-whitespace lexemes, the input to the edit distance.
pub fn ted_tokens(code: &str) -> Vec<String> {
    tex_tokenize(code)
        .into_iter()
        .filter(|t| t.kind != TokenKind::WhitespaceCollapsed)
        .map(|t| t.lexeme)
        .collect()
}

/// Levenshtein distance with unit costs, two-row dynamic program.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token edit distance normalized by the longer sequence; 0 when both are empty.
pub fn ted_sequences<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / n as f64
    }
}

pub fn ted(a: &str, b: &str) -> f64 {
    ted_sequences(&ted_tokens(a), &ted_tokens(b))
}

pub trait TokenCounter: Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Counts non-whitespace lexer tokens.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexerTokenCounter;

impl TokenCounter for LexerTokenCounter {
    fn name(&self) -> &str {
        "tex-lexer"
    }

    fn count(&self, text: &str) -> usize {
        tex_tokenize(text)
            .iter()
            .filter(|t| t.kind != TokenKind::WhitespaceCollapsed)
            .count()
    }
}

pub fn avg_tokens<S: AsRef<str>>(outputs: &[S], counter: &dyn TokenCounter) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::invalid("average tokens of an empty output list is undefined"));
    }
    let total: usize = outputs.iter().map(|o| counter.count(o.as_ref())).sum();
    Ok(total as f64 / outputs.len() as f64)
}

/// `(m1 + m2 + (1 - ted)) / 3`.
pub fn avg_score(m1: f64, m2: f64, mean_ted: f64) -> f64 {
    (m1 + m2 + (1.0 - mean_ted)) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInput {
    pub record_id: String,
    /// `None` when the model produced no output.
    pub prediction: Option<String>,
    pub reference: String,
    pub compiled: bool,
    #[serde(default)]
    pub external_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub record_id: String,
    pub ted: f64,
    pub compiled: bool,
    pub token_count: usize,
    pub external_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub counter: String,
    pub score_pair: [String; 2],
    pub per_sample: Vec<SampleRow>,
    pub samples: usize,
    pub compile_rate: f64,
    pub avg_tokens: f64,
    pub mean_ted: f64,
    pub mean_scores: BTreeMap<String, f64>,
    pub avg: Option<f64>,
    /// Why `avg` is absent.
    pub missing: Option<String>,
}

/// Builds the report; rows are ordered by record_id so results do not depend on input order.
pub fn aggregate(
    inputs: &[SampleInput],
    score_pair: [&str; 2],
    counter: &dyn TokenCounter,
) -> Result<MetricReport> {
    if inputs.is_empty() {
        return Err(Error::invalid("cannot aggregate zero samples"));
    }
    let mut rows: Vec<SampleRow> = inputs
        .iter()
        .map(|s| {
            let (ted_value, tokens, compiled) = match &s.prediction {
                Some(p) => (ted(p, &s.reference), counter.count(p), s.compiled),
                None => (1.0, 0, false),
            };
            SampleRow {
                record_id: s.record_id.clone(),
                ted: ted_value,
                compiled,
                token_count: tokens,
                external_scores: s.external_scores.clone(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.record_id.cmp(&b.record_id));

    let n = rows.len() as f64;
    let compile_rate = rows.iter().filter(|r| r.compiled).count() as f64 / n;
    let avg_tokens = rows.iter().map(|r| r.token_count).sum::<usize>() as f64 / n;
    let mean_ted = rows.iter().map(|r| r.ted).sum::<f64>() / n;

    let mut mean_scores = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> = rows.iter().flat_map(|r| r.external_scores.keys()).collect();
    for name in names {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.external_scores.get(name).copied()).collect();
        if vals.len() == rows.len() {
            mean_scores.insert(name.clone(), vals.iter().sum::<f64>() / n);
        }
    }

    let mut missing = Vec::new();
    for name in score_pair {
        let absent = rows.iter().filter(|r| !r.external_scores.contains_key(name)).count();
        if absent > 0 {
            missing.push(format!("external score {name:?} missing for {absent} of {} samples", rows.len()));
        }
    }
    let avg = if missing.is_empty() {
        Some(avg_score(mean_scores[score_pair[0]], mean_scores[score_pair[1]], mean_ted))
    } else {
        None
    };

    Ok(MetricReport {
        counter: counter.name().to_string(),
        score_pair: score_pair.map(String::from),
        samples: rows.len(),
        per_sample: rows,
        compile_rate,
        avg_tokens,
        mean_ted,
        mean_scores,
        avg,
        missing: (!missing.is_empty()).then(|| missing.join("; ")),
    })
}

impl MetricReport {
    pub fn render_table(&self) -> String {
        let [m1, m2] = &self.score_pair;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "| {m1} | {m2} | TED | AVG | CR | AT ({}) |", self.counter);
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {} | {:.3} | {:.1} |",
            fmt(self.mean_scores.get(m1).copied()),
            fmt(self.mean_scores.get(m2).copied()),
            self.mean_ted,
            fmt(self.avg),
            self.compile_rate,
            self.avg_tokens
        );
        if let Some(why) = &self.missing {
            let _ = writeln!(s, "\nAVG omitted: {why}");
        }
        s
    }
}

/// Reads per-record external scores from CSV (header `record_id,<name>...`) or JSONL
/// (`{"record_id": ..., "<name>": <number>, ...}`), chosen by file extension.
pub fn load_external_scores(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut out = BTreeMap::new();
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let headers = reader.headers().map_err(|e| Error::invalid(e.to_string()))?.clone();
        let id_col = headers
            .iter()
            .position(|h| h == "record_id")
            .ok_or_else(|| Error::invalid(format!("{}: no record_id column", path.display())))?;
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::invalid(e.to_string()))?;
            let mut scores = BTreeMap::new();
            for (i, h) in headers.iter().enumerate() {
                if i == id_col || row[i].trim().is_empty() {
                    continue;
                }
                let v: f64 = row[i].trim().parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 2,
                    message: format!("column {h}: {:?} is not a number", &row[i]),
                })?;
                scores.insert(h.to_string(), v);
            }
            out.insert(row[id_col].to_string(), scores);
        }
    } else {
        let rows = crate::store::read_jsonl::<serde_json::Map<String, serde_json::Value>>(path, crate::store::Strictness::Strict)?;
        for (line, mut row) in rows.items.into_iter().enumerate() {
            let id = row
                .remove("record_id")
                .and_then(|v| v.as_str().map(str::to_string))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    message: "missing string record_id".into(),
                })?;
            let scores = row.into_iter().filter_map(|(k, v)| v.as_f64().map(|v| (k, v))).collect();
            out.insert(id, scores);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexemes(s: &str) -> Vec<String> {
        ted_tokens(s)
    }

    #[test]
    fn lexer_examples() {
        assert_eq!(lexemes("\\draw (0,0);"), ["\\draw", "(", "0", ",", "0", ")", ";"]);
        assert!(tex_tokenize("").is_empty());
        let t = tex_tokenize("\\%");
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].kind, TokenKind::Command);
        assert_eq!(t[0].lexeme, "\\%");
        assert_eq!(lexemes("x=1.25cm"), ["x", "=", "1.25", "cm"]);
        assert_eq!(lexemes("3.x"), ["3", ".", "x"]);
        let kinds: Vec<TokenKind> = tex_tokenize("{$a$}").iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            [TokenKind::BeginGroup, TokenKind::MathShift, TokenKind::TextWord, TokenKind::MathShift, TokenKind::EndGroup]
        );
        assert_eq!(tex_tokenize("\\").len(), 1);
    }

    #[test]
    fn ted_examples() {
        assert_eq!(ted("\\draw (0,0);", "\\draw   (0,0);"), 0.0);
        assert_eq!(ted("", "\\draw"), 1.0);
        assert_eq!(ted("", ""), 0.0);
        assert_eq!(ted("a b c d", "a b x d"), 0.25);
    }

    #[test]
    fn avg_tokens_examples() {
        struct Fixed;
        impl TokenCounter for Fixed {
            fn name(&self) -> &str {
                "len"
            }
            fn count(&self, text: &str) -> usize {
                text.len()
            }
        }
        assert_eq!(avg_tokens(&["x".repeat(10), "x".repeat(20)], &Fixed).unwrap(), 15.0);
        assert_eq!(avg_tokens(&["abc"], &Fixed).unwrap(), 3.0);
        assert!(avg_tokens::<&str>(&[], &Fixed).is_err());
    }

    fn sample(id: &str, pred: Option<&str>, reference: &str, scores: &[(&str, f64)]) -> SampleInput {
        SampleInput {
            record_id: id.into(),
            prediction: pred.map(String::from),
            reference: reference.into(),
            compiled: pred.is_some(),
            external_scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn aggregate_formula_and_missing() {
        let inputs = [
            sample("a", Some("\\draw"), "\\draw", &[("clip", 1.0), ("dsim", 1.0)]),
            sample("b", None, "\\draw", &[("clip", 0.0), ("dsim", 0.0)]),
        ];
        let r = aggregate(&inputs, ["clip", "dsim"], &LexerTokenCounter).unwrap();
        assert_eq!(r.mean_ted, 0.5);
        assert_eq!(r.compile_rate, 0.5);
        assert!((r.avg.unwrap() - 0.5).abs() < 1e-12);
        assert!(r.render_table().contains("| 0.500 |"));

        let partial = [sample("a", Some("x"), "x", &[("clip", 1.0)])];
        let r = aggregate(&partial, ["clip", "dsim"], &LexerTokenCounter).unwrap();
        assert!(r.avg.is_none());
        assert!(r.missing.unwrap().contains("dsim"));
    }

    #[test]
    fn aggregate_bounds() {
        let perfect = [sample("a", Some("x y"), "x y", &[("m1", 1.0), ("m2", 1.0)])];
        assert_eq!(aggregate(&perfect, ["m1", "m2"], &LexerTokenCounter).unwrap().avg, Some(1.0));
        let floor = [sample("a", None, "x y", &[("m1", 0.0), ("m2", 0.0)])];
        assert_eq!(aggregate(&floor, ["m1", "m2"], &LexerTokenCounter).unwrap().avg, Some(0.0));
    }

    #[test]
    fn external_scores_csv_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("s.csv");
        std::fs::write(&csv_path, "record_id,clip,dsim\nr1,0.5,0.25\nr2,0.1,\n").unwrap();
        let s = load_external_scores(&csv_path).unwrap();
        assert_eq!(s["r1"]["dsim"], 0.25);
        assert!(!s["r2"].contains_key("dsim"));
        let jl = dir.path().join("s.jsonl");
        std::fs::write(&jl, "{\"record_id\":\"r1\",\"clip\":0.5}\n").unwrap();
        assert_eq!(load_external_scores(&jl).unwrap()["r1"]["clip"], 0.5);
        std::fs::write(&csv_path, "record_id,clip\nr1,abc\n").unwrap();
        assert!(load_external_scores(&csv_path).is_err());
    }
}
