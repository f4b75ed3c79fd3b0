//! Stage orchestration: configuration, per-stage manifests and the one-shot run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chat::{mock::HeuristicEndpoint, ChatClient, ChatEndpointConfig, HttpChatClient};
use crate::compile::{CompileHarness, CompileResult, SandboxConfig};
use crate::decontam::{build_splits, SplitPolicy};
use crate::describe::{describe_all, DescribeConfig, Validation};
use crate::error::{Error, Result};
use crate::extract::{extract_environments, has_external_refs, strip_comments, ExtractDiagnostic};
use crate::grpo::GrpoConfig;
use crate::normalize::{dedup, detect_packages, length_filter, wrap_standalone, LengthBounds, NormalizedProgram, RuleSet};
use crate::record::{ContentHash, RepairOutcome, SourceDocument, SourceKind, TikZRecord};
use crate::repair::{repair_all, RepairConfig, RepairSession};
use crate::reward::{ProviderConfig, RewardConfig};
use crate::store::{self, corpus_stats, ArtifactCache, Strictness};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub extract: bool,
    pub normalize: bool,
    pub compile: bool,
    pub repair: bool,
    pub describe: bool,
    pub split: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            extract: true,
            normalize: true,
            compile: true,
            repair: true,
            describe: true,
            split: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompilePreset {
    /// `compiler_command` and friends as written in the section.
    Custom,
    /// The bundled WebAssembly TeX driver in `driver_dir`.
    Tikzjax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileSection {
    pub preset: CompilePreset,
    pub driver_dir: PathBuf,
    #[serde(flatten)]
    pub sandbox: SandboxConfig,
}

impl Default for CompileSection {
    fn default() -> Self {
        CompileSection {
            preset: CompilePreset::Custom,
            driver_dir: PathBuf::from("tools/tikzjax"),
            sandbox: SandboxConfig::default(),
        }
    }
}

impl CompileSection {
    /// The effective sandbox: preset commands combined with the section's limits.
    pub fn resolve(&self) -> SandboxConfig {
        match self.preset {
            CompilePreset::Custom => self.sandbox.clone(),
            CompilePreset::Tikzjax => {
                let base = SandboxConfig::tikzjax(&self.driver_dir);
                SandboxConfig {
                    compiler_command: base.compiler_command,
                    worker_command: base.worker_command,
                    output_format: base.output_format,
                    rasterizer_command: base.rasterizer_command,
                    font_dirs: base.font_dirs.into_iter().chain(self.sandbox.font_dirs.clone()).collect(),
                    ..self.sandbox.clone()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractSection {
    /// Source kind given to `.tex` files when the input is a directory.
    pub directory_source_kind: SourceKind,
}

impl Default for ExtractSection {
    fn default() -> Self {
        ExtractSection {
            directory_source_kind: SourceKind::Curated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Corpus: a JSONL file of source documents or a directory of `.tex` files.
    pub input: PathBuf,
    /// Directory receiving every stage output.
    pub output: PathBuf,
    /// Artifact cache; defaults to `<output>/artifacts`.
    pub cache_dir: Option<PathBuf>,
    /// Package-rule TOML; the bundled rules are used when absent.
    pub rules: Option<PathBuf>,
    pub jobs: usize,
    pub seed: u64,
    pub mock_endpoints: bool,
    pub stages: StageToggles,
    pub extract: ExtractSection,
    pub filter: LengthBounds,
    pub compile: CompileSection,
    pub repair: RepairConfig,
    pub repair_endpoint: ChatEndpointConfig,
    pub describe: DescribeConfig,
    pub describe_endpoint: ChatEndpointConfig,
    pub split: SplitPolicy,
    pub reward: RewardConfig,
    pub embedding: ProviderConfig,
    pub grpo: GrpoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: PathBuf::from("corpus.jsonl"),
            output: PathBuf::from("out"),
            cache_dir: None,
            rules: None,
            jobs: 1,
            seed: 0,
            mock_endpoints: false,
            stages: StageToggles::default(),
            extract: ExtractSection::default(),
            filter: LengthBounds::default(),
            compile: CompileSection::default(),
            repair: RepairConfig::default(),
            repair_endpoint: ChatEndpointConfig::default(),
            describe: DescribeConfig::default(),
            describe_endpoint: ChatEndpointConfig::default(),
            split: SplitPolicy::default(),
            reward: RewardConfig::default(),
            embedding: ProviderConfig::default(),
            grpo: GrpoConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.input);
        resolve(base, &mut self.output);
        resolve(base, &mut self.compile.driver_dir);
        for p in [&mut self.cache_dir, &mut self.rules].into_iter().flatten() {
            resolve(base, p);
        }
        for d in &mut self.compile.sandbox.font_dirs {
            resolve(base, d);
        }
    }

    /// Enables exactly `stages`; validation then ignores the sections of the others.
    pub fn restrict_to(&mut self, stages: &[Stage]) {
        let on = |s: Stage| stages.contains(&s);
        self.stages = StageToggles {
            extract: on(Stage::Extract),
            normalize: on(Stage::Normalize),
            compile: on(Stage::Compile),
            repair: on(Stage::Repair),
            describe: on(Stage::Describe),
            split: on(Stage::Split),
        };
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output.join("artifacts"))
    }

    /// Every violation, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.stages.extract && !self.input.exists() {
            p.push(format!("input {} does not exist", self.input.display()));
        }
        if let Some(r) = &self.rules {
            if !r.exists() {
                p.push(format!("rules file {} does not exist", r.display()));
            }
        }
        if self.jobs == 0 {
            p.push("jobs must be >= 1".to_string());
        }
        if self.filter.min > self.filter.max {
            p.push("filter.min must be <= filter.max".to_string());
        }
        if self.compile.preset == CompilePreset::Tikzjax && !self.compile.driver_dir.join("compile.js").exists() {
            p.push(format!(
                "compile.driver_dir {} does not contain compile.js",
                self.compile.driver_dir.display()
            ));
        }
        if let Err(Error::Config(v)) = self.compile.resolve().validate() {
            p.extend(v);
        }
        p.extend(self.repair.problems());
        if self.describe.min_chars == 0 {
            p.push("describe.min_chars must be >= 1".to_string());
        }
        if !self.mock_endpoints {
            if self.stages.repair {
                p.extend(self.repair_endpoint.problems("repair_endpoint"));
            }
            if self.stages.describe {
                p.extend(self.describe_endpoint.problems("describe_endpoint"));
            }
        }
        p.extend(self.split.problems());
        p.extend(self.reward.problems());
        p.extend(self.embedding.problems("embedding"));
        p.extend(self.grpo.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Normalize,
    Compile,
    Repair,
    Describe,
    Split,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Extract,
        Stage::Normalize,
        Stage::Compile,
        Stage::Repair,
        Stage::Describe,
        Stage::Split,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Normalize => "normalize",
            Stage::Compile => "compile",
            Stage::Repair => "repair",
            Stage::Describe => "describe",
            Stage::Split => "split",
        }
    }

    pub fn file_name(self) -> String {
        let idx = Stage::ALL.iter().position(|s| *s == self).expect("listed") + 1;
        format!("{idx:02}_{}.jsonl", self.name())
    }

    fn enabled(self, t: &StageToggles) -> bool {
        match self {
            Stage::Extract => t.extract,
            Stage::Normalize => t.normalize,
            Stage::Compile => t.compile,
            Stage::Repair => t.repair,
            Stage::Describe => t.describe,
            Stage::Split => t.split,
        }
    }
}

/// Companion file: `<output>.<suffix>`.
pub fn side_path(output: &Path, suffix: &str) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub input_sha256: String,
    pub config_sha256: String,
    pub output_sha256: String,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub output: PathBuf,
    pub counts: BTreeMap<String, usize>,
    /// The stage was skipped because its manifest matched.
    pub resumed: bool,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

fn sha_file(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tex"))
            .collect();
        entries.sort();
        let mut bytes = Vec::new();
        for e in entries {
            bytes.extend_from_slice(e.file_name().unwrap_or_default().as_encoded_bytes());
            bytes.extend_from_slice(ContentHash::of(&fs::read(&e)?).to_hex().as_bytes());
        }
        return Ok(ContentHash::of(&bytes).to_hex());
    }
    Ok(ContentHash::of(&fs::read(path)?).to_hex())
}

fn sha_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(ContentHash::of(&serde_json::to_vec(v)?).to_hex())
}

fn count_map(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

struct StageOutput {
    records: Vec<TikZRecord>,
    sides: Vec<(&'static str, Vec<u8>)>,
    counts: BTreeMap<String, usize>,
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for i in items {
        serde_json::to_writer(&mut out, i)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Compile results without wall-clock fields, so stage outputs are reproducible.
fn stable(mut r: CompileResult) -> CompileResult {
    r.duration_ms = 0;
    r
}

pub struct Pipeline {
    cfg: PipelineConfig,
    rules: RuleSet,
    harness: std::sync::OnceLock<CompileHarness>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let rules = match &cfg.rules {
            Some(p) => RuleSet::load(p)?,
            None => RuleSet::default_rules(),
        };
        Ok(Pipeline {
            cfg,
            rules,
            harness: std::sync::OnceLock::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn harness(&self) -> Result<&CompileHarness> {
        if let Some(h) = self.harness.get() {
            return Ok(h);
        }
        let h = CompileHarness::new(self.cfg.compile.resolve(), self.cfg.cache_root())?;
        Ok(self.harness.get_or_init(|| h))
    }

    fn client(&self, endpoint: &ChatEndpointConfig) -> Result<Box<dyn ChatClient>> {
        if self.cfg.mock_endpoints {
            Ok(Box::new(HeuristicEndpoint::new()))
        } else {
            Ok(Box::new(HttpChatClient::new(endpoint.clone())?))
        }
    }

    fn stage_config_digest(&self, stage: Stage) -> Result<String> {
        let c = &self.cfg;
        let v = match stage {
            Stage::Extract => serde_json::json!({ "extract": c.extract }),
            Stage::Normalize => serde_json::json!({
                "filter": c.filter,
                "rules": self.rules.rules().map(|r| serde_json::to_value(r)).collect::<std::result::Result<Vec<_>, _>>()?,
            }),
            Stage::Compile => serde_json::json!({ "compile": c.compile.resolve() }),
            Stage::Repair => serde_json::json!({
                "compile": c.compile.resolve(), "repair": c.repair,
                "endpoint": c.repair_endpoint, "mock": c.mock_endpoints,
            }),
            Stage::Describe => serde_json::json!({
                "describe": c.describe, "endpoint": c.describe_endpoint, "mock": c.mock_endpoints,
            }),
            Stage::Split => serde_json::json!({ "split": c.split, "seed": c.seed }),
        };
        sha_json(&v)
    }

    /// Runs one stage from `input` to `output`, skipping it when the manifest still matches.
    pub fn run_stage(&self, stage: Stage, input: &Path, output: &Path) -> Result<StageReport> {
        let input_sha = sha_file(input)
            .map_err(|e| Error::invalid(format!("cannot read stage input {}: {e}", input.display())))?;
        let config_sha = self.stage_config_digest(stage)?;
        let manifest_path = side_path(output, "manifest.json");
        if let Ok(bytes) = fs::read(&manifest_path) {
            if let Ok(m) = serde_json::from_slice::<StageManifest>(&bytes) {
                if m.stage == stage
                    && m.input_sha256 == input_sha
                    && m.config_sha256 == config_sha
                    && sha_file(output).ok().as_ref() == Some(&m.output_sha256)
                {
                    return Ok(StageReport {
                        stage,
                        output: output.to_path_buf(),
                        counts: m.counts,
                        resumed: true,
                        cache_hits: 0,
                        cache_misses: 0,
                    });
                }
            }
        }

        let (hits0, misses0) = self
            .harness
            .get()
            .map_or((0, 0), |h| (h.cache_hits(), h.cache_misses()));
        let out = match stage {
            Stage::Extract => self.extract(input)?,
            other => {
                let records = store::read_records(input, Strictness::Strict)?.items;
                match other {
                    Stage::Normalize => self.normalize(records)?,
                    Stage::Compile => self.compile(records)?,
                    Stage::Repair => self.repair(records)?,
                    Stage::Describe => self.describe(records)?,
                    Stage::Split => self.split(records)?,
                    Stage::Extract => unreachable!(),
                }
            }
        };
        for r in &out.records {
            r.validate()?;
        }
        let receipt = store::write_records(&out.records, output)?;
        for (suffix, bytes) in &out.sides {
            fs::write(side_path(output, suffix), bytes)?;
        }
        let manifest = StageManifest {
            stage,
            input_sha256: input_sha,
            config_sha256: config_sha,
            output_sha256: receipt.sha256,
            counts: out.counts.clone(),
        };
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        let (hits1, misses1) = self
            .harness
            .get()
            .map_or((0, 0), |h| (h.cache_hits(), h.cache_misses()));
        Ok(StageReport {
            stage,
            output: output.to_path_buf(),
            counts: out.counts,
            resumed: false,
            cache_hits: hits1 - hits0,
            cache_misses: misses1 - misses0,
        })
    }

    /// Every enabled stage in order inside `cfg.output`, followed by `stats.json`.
    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        fs::create_dir_all(&self.cfg.output)?;
        let mut input = self.cfg.input.clone();
        let mut reports = Vec::new();
        for stage in Stage::ALL {
            if !stage.enabled(&self.cfg.stages) {
                continue;
            }
            let output = self.cfg.output.join(stage.file_name());
            reports.push(self.run_stage(stage, &input, &output)?);
            input = output;
        }
        if input != self.cfg.input {
            let records = store::read_records(&input, Strictness::Strict)?.items;
            fs::write(
                self.cfg.output.join("stats.json"),
                serde_json::to_vec_pretty(&corpus_stats(&records))?,
            )?;
        }
        Ok(reports)
    }

    pub fn load_documents(&self, input: &Path) -> Result<Vec<SourceDocument>> {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "tex"))
                .collect();
            files.sort();
            return files
                .iter()
                .map(|f| {
                    let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    Ok(SourceDocument::from_bytes(
                        stem.clone(),
                        self.cfg.extract.directory_source_kind,
                        &fs::read(f)?,
                        stem,
                    ))
                })
                .collect();
        }
        let docs: Vec<SourceDocument> = store::read_jsonl(input, Strictness::Strict)?.items;
        for d in &docs {
            d.validate()?;
        }
        Ok(docs)
    }

    fn extract(&self, input: &Path) -> Result<StageOutput> {
        let docs = self.load_documents(input)?;
        let mut records = Vec::new();
        let mut diagnostics: Vec<ExtractDiagnostic> = Vec::new();
        let (mut snippets, mut external) = (0, 0);
        for doc in &docs {
            let ex = extract_environments(doc);
            diagnostics.extend(ex.diagnostics);
            let meta = doc.meta();
            for (k, s) in ex.snippets.into_iter().enumerate() {
                snippets += 1;
                let body = strip_comments(&s.body);
                if has_external_refs(&body) {
                    external += 1;
                    continue;
                }
                let mut r = TikZRecord::new(format!("{}/{k}", doc.id), &meta, body);
                r.extra.insert("env_kind".into(), serde_json::to_value(s.env_kind)?);
                r.extra.insert("sibling_index".into(), s.sibling_index.into());
                records.push(r.next_version("extract"));
            }
        }
        let counts = count_map(&[
            ("documents", docs.len()),
            ("snippets", snippets),
            ("external_refs_dropped", external),
            ("diagnostics", diagnostics.len()),
            ("records", records.len()),
        ]);
        Ok(StageOutput {
            records,
            sides: vec![("diagnostics.jsonl", jsonl_bytes(&diagnostics)?)],
            counts,
        })
    }

    fn normalize(&self, records: Vec<TikZRecord>) -> Result<StageOutput> {
        let input = records.len();
        let mut kept_len = Vec::new();
        let mut programs = Vec::new();
        for r in records {
            let p = wrap_standalone(r.code.trim(), &detect_packages(&r.code, &self.rules)).with_record_id(&r.record_id);
            if length_filter(&p, self.cfg.filter) {
                programs.push(p);
                kept_len.push(r);
            }
        }
        let after_length = programs.len();
        let by_id: BTreeMap<String, TikZRecord> =
            kept_len.into_iter().map(|r| (r.record_id.clone(), r)).collect();
        let outcome = dedup(programs);
        let records: Vec<TikZRecord> = outcome
            .kept
            .iter()
            .map(|p| {
                let mut r = by_id[&p.record_id].next_version("normalize");
                r.code = p.code.clone();
                r.extra.insert("content_hash".into(), p.content_hash.to_hex().into());
                r
            })
            .collect();
        let counts = count_map(&[
            ("input", input),
            ("length_dropped", input - after_length),
            ("duplicates_dropped", outcome.dropped),
            ("records", records.len()),
        ]);
        Ok(StageOutput {
            records,
            sides: Vec::new(),
            counts,
        })
    }

    fn compile(&self, records: Vec<TikZRecord>) -> Result<StageOutput> {
        let harness = self.harness()?;
        let programs: Vec<NormalizedProgram> = records
            .iter()
            .map(|r| NormalizedProgram::from_code(&r.record_id, r.code.clone()))
            .collect();
        let results = harness
            .compile_all(&programs, self.cfg.jobs)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut counts = BTreeMap::new();
        let out: Vec<TikZRecord> = records
            .iter()
            .zip(&results)
            .map(|(r, res)| {
                *counts.entry(format!("status_{}", status_name(res))).or_insert(0) += 1;
                let mut n = r.next_version("compile");
                n.compile_status = Some(res.status);
                n.image_artifact = res.artifact_path.clone();
                n
            })
            .collect();
        counts.insert("records".into(), out.len());
        counts.insert(
            "compiled".into(),
            results.iter().filter(|r| r.status.is_ok()).count(),
        );
        let stable_results: Vec<CompileResult> = results.into_iter().map(stable).collect();
        Ok(StageOutput {
            records: out,
            sides: vec![("results.jsonl", jsonl_bytes(&stable_results)?)],
            counts,
        })
    }

    fn repair(&self, records: Vec<TikZRecord>) -> Result<StageOutput> {
        let harness = self.harness()?;
        let client = self.client(&self.cfg.repair_endpoint)?;
        let failing: Vec<(NormalizedProgram, CompileResult)> = records
            .iter()
            .filter(|r| r.compile_status.is_some_and(|s| !s.is_ok()))
            .map(|r| {
                let p = NormalizedProgram::from_code(&r.record_id, r.code.clone());
                harness.compile(&p).map(|res| (p, res))
            })
            .collect::<Result<_>>()?;
        let sessions = repair_all(
            &failing,
            client.as_ref(),
            &self.cfg.repair_endpoint,
            &self.cfg.repair,
            harness,
            self.cfg.jobs,
        )?;
        let by_id: BTreeMap<&str, &RepairSession> = sessions.iter().map(|s| (s.record_id.as_str(), s)).collect();
        let mut counts = BTreeMap::new();
        let out: Vec<TikZRecord> = records
            .iter()
            .map(|r| {
                let mut n = r.next_version("repair");
                if let Some(s) = by_id.get(r.record_id.as_str()) {
                    n.repair_outcome = s.outcome;
                    if let (Some(code), Some(res)) = (s.repaired_code(), s.final_compile()) {
                        n.code = code.to_string();
                        n.compile_status = Some(res.status);
                        n.image_artifact = res.artifact_path.clone();
                    }
                    let key = match s.outcome {
                        RepairOutcome::RepairedAt(k) => format!("repaired_at_{k}"),
                        RepairOutcome::Failed => "repair_failed".to_string(),
                        RepairOutcome::NotNeeded => "not_needed".to_string(),
                    };
                    *counts.entry(key).or_insert(0) += 1;
                }
                n
            })
            .collect();
        counts.insert("attempted".into(), sessions.len());
        counts.insert("records".into(), out.len());
        counts.insert("compiled".into(), out.iter().filter(|r| r.is_compiled()).count());
        let stable_sessions: Vec<RepairSession> = sessions
            .into_iter()
            .map(|mut s| {
                for a in &mut s.attempts {
                    a.compile = a.compile.take().map(stable);
                }
                s
            })
            .collect();
        Ok(StageOutput {
            records: out,
            sides: vec![("sessions.jsonl", jsonl_bytes(&stable_sessions)?)],
            counts,
        })
    }

    fn describe(&self, records: Vec<TikZRecord>) -> Result<StageOutput> {
        let client = self.client(&self.cfg.describe_endpoint)?;
        let cache = ArtifactCache::new(self.cfg.cache_root())?;
        let items: Vec<(String, PathBuf)> = records
            .iter()
            .filter(|r| r.is_compiled())
            .filter_map(|r| Some((r.record_id.clone(), cache.path_for(r.image_artifact.as_deref()?))))
            .collect();
        let results = describe_all(
            &items,
            client.as_ref(),
            &self.cfg.describe_endpoint,
            &self.cfg.describe,
            self.cfg.jobs,
        )?;
        let by_id: BTreeMap<&str, &Result<_>> = items.iter().map(|(id, _)| id.as_str()).zip(&results).collect();
        let (mut ok, mut rejected, mut errors) = (0, 0, 0);
        let out: Vec<TikZRecord> = records
            .iter()
            .map(|r| {
                let mut n = r.next_version("describe");
                match by_id.get(r.record_id.as_str()) {
                    Some(Ok(d)) if d.validation == Validation::Ok => {
                        ok += 1;
                        n.description = Some(d.description.clone());
                        n.extra.insert("description_model".into(), d.model_name.clone().into());
                    }
                    Some(Ok(d)) => {
                        rejected += 1;
                        n.extra.insert(
                            "description_validation".into(),
                            serde_json::to_value(d.validation).unwrap_or_default(),
                        );
                    }
                    Some(Err(e)) => {
                        errors += 1;
                        n.extra.insert("description_error".into(), e.to_string().into());
                    }
                    None => {}
                }
                n
            })
            .collect();
        let counts = count_map(&[
            ("requested", items.len()),
            ("described", ok),
            ("rejected", rejected),
            ("endpoint_errors", errors),
            ("records", out.len()),
        ]);
        Ok(StageOutput {
            records: out,
            sides: Vec::new(),
            counts,
        })
    }

    fn split(&self, records: Vec<TikZRecord>) -> Result<StageOutput> {
        let policy = SplitPolicy {
            seed: self.cfg.seed,
            ..self.cfg.split.clone()
        };
        let splits = build_splits(records, &policy)?;
        let counts = count_map(&[
            ("train", splits.train.len()),
            ("test", splits.test.len()),
            ("quarantine", splits.quarantine.len()),
            ("flagged_pairs", splits.report.flagged_pairs.len()),
        ]);
        let report = serde_json::to_vec_pretty(&splits.report)?;
        let mut all: Vec<TikZRecord> = splits
            .train
            .into_iter()
            .chain(splits.test)
            .chain(splits.quarantine)
            .collect();
        all.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        Ok(StageOutput {
            records: all,
            sides: vec![("report.json", report)],
            counts,
        })
    }
}

fn status_name(r: &CompileResult) -> String {
    serde_json::to_value(r.status)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// One rollout to score against a reference render (PNG) or embedding file (`.bin`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTask {
    pub id: String,
    pub code: String,
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<crate::reward::RolloutReward>,
    /// Set when the rollout is unscored (provider or reference failure).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Pipeline {
    /// Scores rollouts; relative reference paths are taken relative to `base`.
    pub fn score_rewards(&self, tasks: &[RewardTask], base: &Path) -> Result<Vec<RewardRow>> {
        let provider = self.cfg.embedding.build()?;
        let harness = self.harness()?;
        tasks
            .iter()
            .map(|t| {
                let reference = if t.reference.is_relative() {
                    base.join(&t.reference)
                } else {
                    t.reference.clone()
                };
                let gt = if reference.extension().is_some_and(|e| e == "bin") {
                    crate::reward::PatchEmbeddingSet::read(&reference)
                } else {
                    provider.embed(&reference)
                };
                let outcome = gt.and_then(|gt| {
                    crate::reward::rollout_reward(&t.code, &gt, provider.as_ref(), harness, &self.cfg.reward)
                });
                match outcome {
                    Ok(r) => Ok(RewardRow {
                        id: t.id.clone(),
                        reward: Some(r),
                        error: None,
                    }),
                    Err(e @ Error::CompilerUnavailable(_)) | Err(e @ Error::Config(_)) => Err(e),
                    Err(e) => Ok(RewardRow {
                        id: t.id.clone(),
                        reward: None,
                        error: Some(e.to_string()),
                    }),
                }
            })
            .collect()
    }
}
