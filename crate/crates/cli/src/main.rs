use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tikzkit_core::error::{Error, Result};
use tikzkit_core::grpo;
use tikzkit_core::metrics::{aggregate, load_external_scores, LexerTokenCounter, SampleInput};
use tikzkit_core::pipeline::{Pipeline, PipelineConfig, RewardTask, Stage};
use tikzkit_core::prompts::generation_prompt;
use tikzkit_core::store::{self, corpus_stats, Strictness};
use tikzkit_core::synth;

#[derive(Parser)]
#[command(name = "tikzkit", version, about = "TikZ corpus, compile, repair, reward and evaluation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use the offline heuristic endpoints instead of HTTP.
    #[arg(long, global = true)]
    mock_endpoints: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Every enabled stage; --output is the run directory.
    All,
    Extract,
    Normalize,
    Compile,
    Repair,
    Describe,
    Split,
    /// Score rollouts: JSONL of {id, code, reference}.
    Reward,
    /// Advantages, objective and gradients for rollout groups (JSONL or binary).
    GrpoScore,
    /// Code metrics over JSONL samples {record_id, prediction, reference, compiled}.
    Evaluate {
        /// External per-sample scores (CSV or JSONL with a record_id column).
        #[arg(long)]
        scores: Option<PathBuf>,
        /// The two score names averaged with 1 - TED.
        #[arg(long, value_delimiter = ',', default_value = "CLIP,DSim")]
        score_pair: Vec<String>,
    },
    /// Corpus statistics of a record file.
    Stats,
    /// Generation prompt for one description, or for every described record in --input.
    Prompt {
        #[arg(long)]
        description: Option<String>,
    },
    /// Write the seeded synthetic fixture corpus.
    Synth {
        #[arg(long, default_value_t = 200)]
        docs: usize,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    status: &'static str,
    kind: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let violations = match &e {
                Error::Config(v) => v.clone(),
                _ => Vec::new(),
            };
            let report = ErrorReport {
                status: "error",
                kind: e.kind(),
                message: e.to_string(),
                violations,
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut c = PipelineConfig::default();
            c.resolve_paths(&std::env::current_dir()?);
            c
        }
    };
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.mock_endpoints |= g.mock_endpoints;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::config(format!("--{flag} is required for this command")))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn write_or_print<T: Serialize>(v: &T, output: &Option<PathBuf>) -> Result<()> {
    match output {
        Some(p) => {
            fs::write(p, serde_json::to_vec_pretty(v)?)?;
            Ok(())
        }
        None => print_json(v),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let stage = match &cli.command {
        Cmd::Extract => Some(Stage::Extract),
        Cmd::Normalize => Some(Stage::Normalize),
        Cmd::Compile => Some(Stage::Compile),
        Cmd::Repair => Some(Stage::Repair),
        Cmd::Describe => Some(Stage::Describe),
        Cmd::Split => Some(Stage::Split),
        _ => None,
    };
    if let Some(stage) = stage {
        let mut cfg = load_config(g)?;
        let input = required(&g.input, "input")?.to_path_buf();
        let output = required(&g.output, "output")?.to_path_buf();
        cfg.input = input.clone();
        cfg.restrict_to(&[stage]);
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let pipeline = Pipeline::new(cfg)?;
        return print_json(&pipeline.run_stage(stage, &input, &output)?);
    }

    match &cli.command {
        Cmd::All => {
            let mut cfg = load_config(g)?;
            if let Some(i) = &g.input {
                cfg.input = i.clone();
            }
            if let Some(o) = &g.output {
                cfg.output = o.clone();
            }
            print_json(&Pipeline::new(cfg)?.run_all()?)
        }
        Cmd::Reward => {
            let mut cfg = load_config(g)?;
            cfg.restrict_to(&[]);
            let input = required(&g.input, "input")?;
            let tasks: Vec<RewardTask> = store::read_jsonl(input, Strictness::Strict)?.items;
            let pipeline = Pipeline::new(cfg)?;
            let base = input.parent().unwrap_or(Path::new("."));
            let rows = pipeline.score_rewards(&tasks, base)?;
            match &g.output {
                Some(o) => store::write_jsonl(&rows, o).map(|_| ()),
                None => print_json(&rows),
            }
        }
        Cmd::GrpoScore => {
            let mut cfg = load_config(g)?;
            cfg.restrict_to(&[]);
            cfg.validate()?;
            let input = required(&g.input, "input")?;
            let groups = grpo::read_batch(fs::File::open(input)?)?;
            let scores = groups
                .iter()
                .map(|grp| grpo::score_group(grp, &cfg.grpo))
                .collect::<Result<Vec<_>>>()?;
            match &g.output {
                Some(o) if o.extension().is_some_and(|e| e == "bin") => {
                    fs::write(o, grpo::encode_scores(&scores))?;
                    Ok(())
                }
                Some(o) => grpo::write_scores_jsonl(&scores, fs::File::create(o)?),
                None => grpo::write_scores_jsonl(&scores, std::io::stdout().lock()),
            }
        }
        Cmd::Evaluate { scores, score_pair } => {
            let input = required(&g.input, "input")?;
            let mut samples: Vec<SampleInput> = store::read_jsonl(input, Strictness::Strict)?.items;
            if let Some(path) = scores {
                let external = load_external_scores(path)?;
                for s in &mut samples {
                    if let Some(m) = external.get(&s.record_id) {
                        s.external_scores.extend(m.iter().map(|(k, v)| (k.clone(), *v)));
                    }
                }
            }
            let [a, b] = score_pair.as_slice() else {
                return Err(Error::config("--score-pair needs exactly two names"));
            };
            let report = aggregate(&samples, [a, b], &LexerTokenCounter)?;
            eprintln!("{}", report.render_table());
            write_or_print(&report, &g.output)
        }
        Cmd::Stats => {
            let input = required(&g.input, "input")?;
            let records = store::read_records(input, Strictness::Strict)?.items;
            write_or_print(&corpus_stats(&records), &g.output)
        }
        Cmd::Prompt { description } => {
            if let Some(d) = description {
                print!("{}", generation_prompt(d));
                return Ok(());
            }
            let input = required(&g.input, "input")?;
            let records = store::read_records(input, Strictness::Strict)?.items;
            #[derive(Serialize)]
            struct PromptRow {
                record_id: String,
                prompt: String,
            }
            let rows: Vec<PromptRow> = records
                .iter()
                .filter_map(|r| {
                    Some(PromptRow {
                        record_id: r.record_id.clone(),
                        prompt: generation_prompt(r.description.as_deref()?),
                    })
                })
                .collect();
            match &g.output {
                Some(o) => store::write_jsonl(&rows, o).map(|_| ()),
                None => {
                    for r in &rows {
                        println!("{}", serde_json::to_string(r)?);
                    }
                    Ok(())
                }
            }
        }
        Cmd::Synth { docs } => {
            let output = required(&g.output, "output")?;
            let mix = scaled_mix(*docs);
            let corpus = synth::generate(g.seed.unwrap_or(0), &mix);
            let documents: Vec<_> = corpus.iter().map(|d| d.document.clone()).collect();
            store::write_jsonl(&documents, output)?;
            #[derive(Serialize)]
            struct Category<'a> {
                id: &'a str,
                category: synth::DocCategory,
            }
            let cats: Vec<Category> = corpus
                .iter()
                .map(|d| Category {
                    id: &d.document.id,
                    category: d.category,
                })
                .collect();
            store::write_jsonl(&cats, &tikzkit_core::pipeline::side_path(output, "categories.jsonl"))?;
            Ok(())
        }
        _ => unreachable!("stage commands handled above"),
    }
}

/// The default category mix rescaled to `docs` documents.
fn scaled_mix(docs: usize) -> Vec<(synth::DocCategory, usize)> {
    let total: usize = synth::DEFAULT_MIX.iter().map(|(_, n)| n).sum();
    if docs == total {
        return synth::DEFAULT_MIX.to_vec();
    }
    let mut mix: Vec<(synth::DocCategory, usize)> = synth::DEFAULT_MIX
        .iter()
        .map(|(c, n)| (*c, n * docs / total))
        .collect();
    let assigned: usize = mix.iter().map(|(_, n)| n).sum();
    mix[0].1 += docs - assigned;
    mix
}
