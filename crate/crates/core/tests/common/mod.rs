#![allow(dead_code)]

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tikzkit_core::decontam::{SplitPolicy, Splits};
use tikzkit_core::grpo::{GrpoConfig, Rollout};
use tikzkit_core::metrics::ted_tokens;
use tikzkit_core::normalize::{document_body, wrap_standalone};
use tikzkit_core::record::{CompileStatus, License, SourceDocument, SourceKind, SourceMeta, TikZRecord};
use tikzkit_core::reward::{Matrix, PatchEmbeddingSet};

pub fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn tikzjax_installed() -> bool {
    workspace().join("tools/tikzjax/node_modules/node-tikzjax").exists()
}

/// Transportation LP with uniform marginals, solved by a generic simplex.
pub fn lp_transport_cost(d: &Matrix) -> f64 {
    let (n, m) = (d.rows, d.cols);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = (0..n)
        .map(|i| (0..m).map(|j| lp.add_var(d.at(i, j), (0.0, f64::INFINITY))).collect())
        .collect();
    for row in &vars {
        let terms: Vec<_> = row.iter().map(|v| (*v, 1.0)).collect();
        lp.add_constraint(&terms, ComparisonOp::Eq, 1.0 / n as f64);
    }
    for j in 0..m {
        let terms: Vec<_> = vars.iter().map(|row| (row[j], 1.0)).collect();
        lp.add_constraint(&terms, ComparisonOp::Eq, 1.0 / m as f64);
    }
    lp.solve().expect("transportation LP is feasible").objective()
}

pub fn random_unit_free_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-4 {
            return v;
        }
    }
}

pub fn random_set(rng: &mut ChaCha8Rng, max_len: usize, dim: usize) -> PatchEmbeddingSet {
    let n = rng.random_range(1..=max_len);
    PatchEmbeddingSet::new((0..n).map(|_| random_unit_free_vector(rng, dim)).collect()).unwrap()
}

/// Direct `1 - cos` matrix, clipped to [0, 2].
pub fn cosine_oracle(x: &PatchEmbeddingSet, y: &PatchEmbeddingSet) -> Matrix {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut data = Vec::new();
    for a in x.patches() {
        for b in y.patches() {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            data.push((1.0 - dot / (norm(a) * norm(b))).clamp(0.0, 2.0));
        }
    }
    Matrix::new(x.len(), y.len(), data).unwrap()
}

/// Classic Wagner-Fischer table over the full matrix.
pub fn edit_distance_dp<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

pub fn normalized_dp<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        0.0
    } else {
        edit_distance_dp(a, b) as f64 / n as f64
    }
}

/// Target environments found by a plain begin/end stack; outermost spans only.
pub fn stack_scan(text: &str) -> Vec<(usize, usize)> {
    let re = regex::Regex::new(r"\\(begin|end)\{([^}]*)\}").unwrap();
    let targets = ["tikzpicture", "tikzcd", "circuitikz"];
    let mut stack: Vec<(String, usize)> = Vec::new();
    let mut out = Vec::new();
    for c in re.captures_iter(text) {
        let whole = c.get(0).unwrap();
        let name = c[2].to_string();
        if !targets.contains(&name.as_str()) {
            continue;
        }
        if &c[1] == "begin" {
            stack.push((name, whole.start()));
        } else if let Some((open, start)) = stack.pop() {
            assert_eq!(open, name, "oracle expects balanced input");
            if stack.is_empty() {
                out.push((start, whole.end()));
            }
        }
    }
    out
}

/// Every n-gram window of a token list.
pub fn windows(tokens: &[String], n: usize) -> HashSet<Vec<String>> {
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

pub fn objective(group: &[Rollout], cfg: &GrpoConfig) -> f64 {
    tikzkit_core::grpo::grpo_objective(group, cfg).unwrap().objective
}

/// Central differences of the objective with respect to every `logp_new` entry.
pub fn finite_difference_gradient(group: &[Rollout], cfg: &GrpoConfig, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..group.len() {
        let mut row = Vec::new();
        for t in 0..group[i].token_count() {
            let mut plus = group.to_vec();
            plus[i].logp_new[t] += h;
            let mut minus = group.to_vec();
            minus[i].logp_new[t] -= h;
            row.push((objective(&plus, cfg) - objective(&minus, cfg)) / (2.0 * h));
        }
        out.push(row);
    }
    out
}

/// A random group whose log-ratios sit at least `margin` away from both clip edges.
pub fn random_group(rng: &mut ChaCha8Rng, cfg: &GrpoConfig, with_ref: bool, margin: f64) -> Vec<Rollout> {
    let g = rng.random_range(2..=8);
    let lo = (1.0 - cfg.eps_low).ln();
    let hi = (1.0 + cfg.eps_high).ln();
    let mut group = Vec::new();
    for _ in 0..g {
        let t = rng.random_range(1..=16);
        let mut new = Vec::new();
        let mut old = Vec::new();
        for _ in 0..t {
            let o: f64 = rng.random_range(-6.0..-0.5);
            let delta = loop {
                let d: f64 = rng.random_range(-0.5..0.5);
                if (d - lo).abs() > margin && (d - hi).abs() > margin {
                    break d;
                }
            };
            old.push(o);
            new.push(o + delta);
        }
        let reference = with_ref.then(|| new.iter().map(|n| n + rng.random_range(-0.3..0.3)).map(|v: f64| v.min(-1e-3)).collect());
        group.push(Rollout {
            logp_new: new,
            logp_old: old,
            logp_ref: reference,
            reward: (rng.random_range(0..5) as f64) / 4.0,
            truncated: false,
        });
    }
    if group.iter().all(|r| r.reward == group[0].reward) {
        group[0].reward = 1.0 - group[0].reward.min(0.5);
    }
    group
}

pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let diff: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Compiles any program that does not contain the marker `BROKEN`.
pub struct MarkerCompiler;

impl tikzkit_core::compile::Compile for MarkerCompiler {
    fn compile(
        &self,
        p: &tikzkit_core::normalize::NormalizedProgram,
    ) -> tikzkit_core::error::Result<tikzkit_core::compile::CompileResult> {
        use tikzkit_core::record::CompileStatus;
        let broken = p.code.contains("BROKEN");
        Ok(tikzkit_core::compile::CompileResult {
            record_id: p.record_id.clone(),
            status: if broken { CompileStatus::CompileError } else { CompileStatus::Ok },
            log_text: if broken { "! Undefined control sequence.\nl.4 BROKEN".into() } else { String::new() },
            duration_ms: 0,
            artifact_path: None,
        })
    }
}

fn fenced(code: &str) -> String {
    format!("Here is the fix.\n```latex\n{code}\n```\n")
}

/// Repair session against a scripted endpoint whose candidates compile from attempt `fix_at` on.
pub fn scripted_session(fix_at: Option<u32>, max_iterations: u32) -> (tikzkit_core::repair::RepairSession, usize) {
    use tikzkit_core::chat::{ChatEndpointConfig, ScriptedClient};
    use tikzkit_core::compile::Compile;
    use tikzkit_core::repair::{repair_loop, RepairConfig};
    let broken = wrap_standalone("\\begin{tikzpicture}\nBROKEN\n\\draw (0,0) -- (1,1);\n\\end{tikzpicture}", &[]);
    let fixed = wrap_standalone("\\begin{tikzpicture}\n\\draw (0,0) -- (1,1);\n\\end{tikzpicture}", &[]);
    let script = (1..=max_iterations).map(|k| {
        Ok(if fix_at.is_some_and(|f| k >= f) {
            fenced(&fixed.code)
        } else {
            fenced(&broken.code.replace("BROKEN", &format!("BROKEN{k}")))
        })
    });
    let client = ScriptedClient::new(script);
    let first = MarkerCompiler.compile(&broken).unwrap();
    let cfg = RepairConfig {
        max_iterations,
        ..RepairConfig::default()
    };
    let session = repair_loop(&broken, &first, &client, &ChatEndpointConfig::default(), &cfg, &MarkerCompiler).unwrap();
    (session, client.requests().len())
}

pub const KINDS: [&str; 3] = ["tikzpicture", "tikzcd", "circuitikz"];

pub fn picture(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let kind = KINDS[rng.random_range(0..KINDS.len())];
    let mut s = format!("\\begin{{{kind}}}\n\\draw (0,0) -- ({},1);\n", rng.random_range(0..9));
    if depth < 2 && rng.random_bool(0.3) {
        s.push_str(&format!("\\node at (1,1) {{{}}};\n", picture(rng, depth + 1)));
    }
    if rng.random_bool(0.3) {
        s.push_str("\\node {50\\% done};\n");
    }
    s.push_str(&format!("\\end{{{kind}}}"));
    s
}

/// A document with planted environments; returns the text and the planted count.
pub fn planted_document(rng: &mut ChaCha8Rng) -> (String, usize) {
    let mut text = String::from("\\documentclass{article}\n\\usepackage{tikz}\n\\begin{document}\nIntro text.\n");
    let mut planted = 0;
    for _ in 0..rng.random_range(1..6) {
        match rng.random_range(0..4) {
            0 => {
                text.push_str(&picture(rng, 0));
                planted += 1;
            }
            1 => {
                text.push_str("\\begin{figure}\n\\centering\n");
                for _ in 0..rng.random_range(2..4) {
                    text.push_str(&format!(
                        "\\begin{{subfigure}}{{0.3\\linewidth}}\n{}\n\\end{{subfigure}}\n",
                        picture(rng, 0)
                    ));
                    planted += 1;
                }
                text.push_str("\\caption{Panels.}\n\\end{figure}\n");
            }
            2 => {
                text.push_str(&format!("\\begin{{figure}}\n{}\n\\caption{{One.}}\n\\end{{figure}}\n", picture(rng, 0)));
                planted += 1;
            }
            _ => text.push_str("\\begin{itemize}\n\\item text\n\\end{itemize}\n"),
        }
        text.push('\n');
    }
    text.push_str("\\end{document}\n");
    (text, planted)
}

pub fn document(id: usize, text: String) -> SourceDocument {
    SourceDocument::from_bytes(format!("d{id:03}"), SourceKind::Arxiv, text.as_bytes(), format!("o{id}"))
}

pub const LINES: [&str; 6] = [
    "\\draw[thick] (0,0) -- (1,1) -- (2,0) -- cycle;",
    "\\node[draw, circle] at (3,1) {$x$};",
    "\\fill[red] (1,2) circle (0.2);",
    "\\draw[->] (0,0) to[bend left] (4,0);",
    "\\node at (2,2) {label};",
    "\\draw (0,3) rectangle (1,4);",
];

pub fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<TikZRecord> {
    (0..n)
        .map(|i| {
            let mut body = String::from("\\begin{tikzpicture}\n");
            for _ in 0..rng.random_range(1..4) {
                if rng.random_bool(0.4) {
                    body.push_str(LINES[rng.random_range(0..LINES.len())]);
                } else {
                    body.push_str(&format!("\\draw ({},{}) -- ({},{});", i, rng.random_range(0..99), rng.random_range(0..99), i));
                }
                body.push('\n');
            }
            body.push_str("\\end{tikzpicture}");
            let meta = SourceMeta {
                source_kind: SourceKind::Arxiv,
                origin_key: format!("o{}", rng.random_range(0..n / 3)),
                license: License::PermissiveCc,
                date: NaiveDate::from_ymd_opt(2025, 1, 1)
                    .unwrap()
                    .checked_add_days(chrono::Days::new(rng.random_range(0..365))),
            };
            let mut r = TikZRecord::new(format!("r{i:03}"), &meta, wrap_standalone(&body, &["\\usepackage{tikz}".into()]).code);
            if rng.random_bool(0.8) {
                r.compile_status = Some(CompileStatus::Ok);
                r.description = Some("A small drawing with lines and nodes.".into());
            }
            r
        })
        .collect()
}

pub fn body_tokens(r: &TikZRecord) -> Vec<String> {
    ted_tokens(document_body(&r.code).unwrap())
}

/// Brute-force check that no test n-gram occurs in any train record.
pub fn shared_ngrams(s: &Splits, n: usize) -> usize {
    let mut shared = 0;
    for t in &s.test {
        let tw = windows(&body_tokens(t), n);
        for tr in &s.train {
            shared += body_tokens(tr).windows(n).filter(|w| tw.contains(&w.to_vec())).count();
        }
    }
    shared
}

pub fn policy() -> SplitPolicy {
    SplitPolicy {
        test_after_date: NaiveDate::from_ymd_opt(2025, 6, 30).unwrap(),
        ngram_n: 8,
        ..SplitPolicy::default()
    }
}

/// A tikzpicture body of exactly `len` characters.
pub fn body_of_len(len: usize) -> String {
    let open = "\\begin{tikzpicture}\n";
    let close = "\n\\end{tikzpicture}";
    let fill = len - open.len() - close.len();
    format!("{open}{}{close}", "%".repeat(fill))
}
