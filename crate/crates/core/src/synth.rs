//! Seeded synthetic TeX corpus covering every pipeline path: clean figures, repairable
//! and unrepairable faults, duplicates, external files, length outliers, blank
//! pictures, unbalanced environments and documents without figures.

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::record::{License, SourceDocument, SourceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocCategory {
    Clean,
    CommutativeDiagram,
    Circuit,
    TwoPanelFigure,
    SingleFault,
    DoubleFault,
    Unrepairable,
    ExactDuplicate,
    NearDuplicate,
    ExternalFile,
    TooShort,
    TooLong,
    NoFigure,
    Unbalanced,
    BlankPicture,
}

/// Category mix of the default 200-document corpus.
pub const DEFAULT_MIX: [(DocCategory, usize); 15] = [
    (DocCategory::Clean, 58),
    (DocCategory::CommutativeDiagram, 9),
    (DocCategory::Circuit, 8),
    (DocCategory::TwoPanelFigure, 12),
    (DocCategory::SingleFault, 14),
    (DocCategory::DoubleFault, 4),
    (DocCategory::Unrepairable, 4),
    (DocCategory::ExactDuplicate, 10),
    (DocCategory::NearDuplicate, 10),
    (DocCategory::ExternalFile, 15),
    (DocCategory::TooShort, 15),
    (DocCategory::TooLong, 5),
    (DocCategory::NoFigure, 20),
    (DocCategory::Unbalanced, 10),
    (DocCategory::BlankPicture, 6),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDocument {
    pub category: DocCategory,
    pub document: SourceDocument,
}

const COLORS: [&str; 6] = ["red", "blue", "black", "green!60!black", "orange", "violet"];
const LABELS: [&str; 8] = ["x", "y", "f", "g", "A", "B", "\\alpha", "\\beta"];
const WORDS: [&str; 12] = [
    "We", "study", "the", "graph", "shown", "below", "which", "summarizes", "our", "model", "and", "its",
];

fn coord(rng: &mut ChaCha8Rng) -> String {
    format!(
        "({:.1},{:.1})",
        rng.random_range(-40..=40) as f64 / 10.0,
        rng.random_range(-30..=30) as f64 / 10.0
    )
}

fn shape_line(rng: &mut ChaCha8Rng) -> String {
    let c = COLORS[rng.random_range(0..COLORS.len())];
    match rng.random_range(0..5) {
        0 => format!("\\draw[{c}] {} rectangle {};", coord(rng), coord(rng)),
        1 => format!("\\draw[{c}, thick] {} circle ({}.{});", coord(rng), rng.random_range(0..2), rng.random_range(1..10)),
        2 => format!(
            "\\node[draw, fill={c}!{}] at {} {{${}$}};",
            rng.random_range(5..95),
            coord(rng),
            LABELS[rng.random_range(0..LABELS.len())]
        ),
        3 => format!(
            "\\draw[->, {c}] {} -- {} node[midway, above] {{${}$}};",
            coord(rng),
            coord(rng),
            LABELS[rng.random_range(0..LABELS.len())]
        ),
        _ => format!("\\fill[{c}] {} circle (0.{});", coord(rng), rng.random_range(1..4)),
    }
}

fn picture_lines(rng: &mut ChaCha8Rng, min_chars: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let n = rng.random_range(3..7);
    while lines.len() < n || lines.iter().map(|l: &String| l.len() + 1).sum::<usize>() < min_chars {
        lines.push(shape_line(rng));
    }
    lines
}

fn tikzpicture(options: Option<&str>, lines: &[String]) -> String {
    let mut s = String::from("\\begin{tikzpicture}");
    if let Some(o) = options {
        s.push_str(&format!("[{o}]"));
    }
    s.push('\n');
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s.push_str("\\end{tikzpicture}");
    s
}

fn clean_picture(rng: &mut ChaCha8Rng) -> String {
    let mut lines = picture_lines(rng, 120);
    if rng.random_bool(0.3) {
        let at = rng.random_range(0..lines.len());
        lines[at].push_str(" % adjust later");
    }
    let opts = rng.random_bool(0.3).then(|| format!("scale={}", rng.random_range(1..3)));
    tikzpicture(opts.as_deref(), &lines)
}

fn commutative_diagram(rng: &mut ChaCha8Rng) -> String {
    let l = |rng: &mut ChaCha8Rng| LABELS[rng.random_range(0..LABELS.len())];
    let objs: Vec<String> = (0..4).map(|i| format!("X_{{{}}}", i + rng.random_range(0..9))).collect();
    format!(
        "\\begin{{tikzcd}}\n{} \\arrow[r, \"{}\"] \\arrow[d, \"{}\"'] & {} \\arrow[d, \"{}\"] \\\\\n{} \\arrow[r, \"{}\"'] & {}\n\\end{{tikzcd}}",
        objs[0],
        l(rng),
        l(rng),
        objs[1],
        l(rng),
        objs[2],
        l(rng),
        objs[3]
    )
}

fn circuit(rng: &mut ChaCha8Rng) -> String {
    let parts = ["R", "C", "L"];
    let a = parts[rng.random_range(0..3)];
    let b = parts[rng.random_range(0..3)];
    let w = rng.random_range(2..5);
    format!(
        "\\begin{{circuitikz}}\n\\draw (0,0) to[{a}, l=${a}_{}$] ({w},0) to[{b}, l=${b}_{}$] ({w},-2) -- (0,-2) to[battery1, l=$V$] (0,0);\n\\end{{circuitikz}}",
        rng.random_range(1..9),
        rng.random_range(1..9)
    )
}

fn fault_line(rng: &mut ChaCha8Rng) -> String {
    const NAMES: [&str; 6] = ["mysterymacro", "drawfancy", "undefinedstyle", "customarrow", "plotthing", "labelset"];
    format!("\\{}{{{}}}", NAMES[rng.random_range(0..NAMES.len())], rng.random_range(0..100))
}

fn faulty_picture(rng: &mut ChaCha8Rng, faults: usize) -> String {
    let mut lines = picture_lines(rng, 120);
    for _ in 0..faults {
        let at = rng.random_range(0..=lines.len());
        lines.insert(at, fault_line(rng));
    }
    tikzpicture(None, &lines)
}

fn unrepairable_picture(rng: &mut ChaCha8Rng) -> String {
    let mut lines = picture_lines(rng, 120);
    let last = lines.last_mut().expect("non-empty");
    last.pop();
    tikzpicture(None, &lines)
}

fn blank_picture(rng: &mut ChaCha8Rng) -> String {
    let lines: Vec<String> = (0..6)
        .map(|i| format!("\\coordinate (p{i}) at {};", coord(rng)))
        .collect();
    tikzpicture(None, &lines)
}

fn prose(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut s: Vec<&str> = (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    s.push("results.");
    s.join(" ")
}

fn figure(rng: &mut ChaCha8Rng, pictures: &[String]) -> String {
    let mut s = String::from("\\begin{figure}[t]\n\\centering\n");
    for (i, p) in pictures.iter().enumerate() {
        if pictures.len() > 1 {
            s.push_str("\\begin{subfigure}{0.45\\linewidth}\n");
        }
        s.push_str(p);
        s.push('\n');
        if pictures.len() > 1 {
            s.push_str(&format!("\\caption{{Panel {}}}\n\\end{{subfigure}}\n", i + 1));
        }
    }
    s.push_str(&format!("\\caption{{{}}}\n\\end{{figure}}", prose(rng, 6)));
    s
}

fn paper(rng: &mut ChaCha8Rng, packages: &[&str], body: &str) -> String {
    let mut s = String::from("\\documentclass{article}\n\\usepackage{tikz}\n");
    for p in packages {
        s.push_str(&format!("\\usepackage{{{p}}}\n"));
    }
    s.push_str("\\begin{document}\n");
    s.push_str(&prose(rng, 20));
    s.push_str("\n\n");
    s.push_str(body);
    s.push_str("\n\n");
    s.push_str(&prose(rng, 12));
    s.push_str("\n\\end{document}\n");
    s
}

const SOURCES: [(SourceKind, &str); 5] = [
    (SourceKind::Arxiv, "arxiv"),
    (SourceKind::Github, "github"),
    (SourceKind::Texse, "texse"),
    (SourceKind::Synthetic, "synthetic"),
    (SourceKind::Curated, "curated"),
];

/// Deterministic corpus for `seed` with the given category mix.
pub fn generate(seed: u64, mix: &[(DocCategory, usize)]) -> Vec<SynthDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut categories: Vec<DocCategory> = mix.iter().flat_map(|(c, n)| std::iter::repeat_n(*c, *n)).collect();
    categories.shuffle(&mut rng);

    let mut clean_bodies: Vec<String> = Vec::new();
    let mut docs = Vec::with_capacity(categories.len());
    let start = NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date");
    for (i, cat) in categories.iter().enumerate() {
        let body = match cat {
            DocCategory::Clean => {
                let p = clean_picture(&mut rng);
                clean_bodies.push(p.clone());
                figure(&mut rng, &[p])
            }
            DocCategory::CommutativeDiagram => {
                let p = commutative_diagram(&mut rng);
                figure(&mut rng, &[p])
            }
            DocCategory::Circuit => {
                let p = circuit(&mut rng);
                figure(&mut rng, &[p])
            }
            DocCategory::TwoPanelFigure => {
                let a = clean_picture(&mut rng);
                let b = clean_picture(&mut rng);
                figure(&mut rng, &[a, b])
            }
            DocCategory::SingleFault => {
                let p = faulty_picture(&mut rng, 1);
                figure(&mut rng, &[p])
            }
            DocCategory::DoubleFault => {
                let p = faulty_picture(&mut rng, 2);
                figure(&mut rng, &[p])
            }
            DocCategory::Unrepairable => {
                let p = unrepairable_picture(&mut rng);
                figure(&mut rng, &[p])
            }
            DocCategory::ExactDuplicate | DocCategory::NearDuplicate => {
                let p = match clean_bodies.choose(&mut rng) {
                    Some(p) if *cat == DocCategory::ExactDuplicate => p.clone(),
                    Some(p) => p.replacen("\\end{tikzpicture}", "\\draw[gray] (0,0) -- (0.5,0.5);\n\\end{tikzpicture}", 1),
                    None => clean_picture(&mut rng),
                };
                figure(&mut rng, &[p])
            }
            DocCategory::ExternalFile => {
                let lines = picture_lines(&mut rng, 80);
                let mut lines = lines;
                lines.push("\\node at (0,0) {\\includegraphics[width=2cm]{logo.png}};".into());
                figure(&mut rng, &[tikzpicture(None, &lines)])
            }
            DocCategory::TooShort => figure(&mut rng, &["\\begin{tikzpicture}\n\\draw (0,0) -- (1,1);\n\\end{tikzpicture}".into()]),
            DocCategory::TooLong => {
                let lines: Vec<String> = (0..110).map(|_| shape_line(&mut rng)).collect();
                figure(&mut rng, &[tikzpicture(None, &lines)])
            }
            DocCategory::NoFigure => {
                let mut s = prose(&mut rng, 30);
                if rng.random_bool(0.5) {
                    s.push_str("\n\\begin{verbatim}\n\\begin{tikzpicture} \\draw (0,0); \\end{tikzpicture}\n\\end{verbatim}");
                }
                s
            }
            DocCategory::Unbalanced => {
                let good = clean_picture(&mut rng);
                clean_bodies.push(good.clone());
                format!("{}\n\n\\begin{{tikzpicture}}\n{}\n", figure(&mut rng, &[good]), shape_line(&mut rng))
            }
            DocCategory::BlankPicture => {
                let p = blank_picture(&mut rng);
                figure(&mut rng, &[p])
            }
        };
        let packages: &[&str] = match cat {
            DocCategory::CommutativeDiagram => &["tikz-cd"],
            DocCategory::Circuit => &["circuitikz"],
            DocCategory::TwoPanelFigure => &["subcaption"],
            _ => &[],
        };
        let raw_text = if *cat == DocCategory::Unbalanced {
            // the stray \begin must reach the end of the file
            let mut s = paper(&mut rng, packages, "");
            s.push_str(&body);
            s
        } else {
            paper(&mut rng, packages, &body)
        };
        let (kind, prefix) = SOURCES[rng.random_range(0..SOURCES.len())];
        let license = match rng.random_range(0..100) {
            0..35 => License::PermissiveCc,
            35..75 => License::NonexclusiveDist,
            _ => License::Unknown,
        };
        let date = start + chrono::Days::new(rng.random_range(0..1090));
        let origin = format!("{prefix}-{:03}", rng.random_range(0..150));
        docs.push(SynthDocument {
            category: *cat,
            document: SourceDocument {
                id: format!("doc{i:03}"),
                source_kind: kind,
                raw_text,
                date: Some(date),
                license,
                origin_key: origin,
            },
        });
    }
    docs
}

pub fn default_corpus(seed: u64) -> Vec<SynthDocument> {
    generate(seed, &DEFAULT_MIX)
}
