//! Sandboxed compilation of standalone TikZ documents and rasterization of the output.
//!
//! Each job runs in a fresh temporary directory with the compiler's stdin closed.
//! The compiler is an argument vector with placeholders; two output routes exist:
//! PDF (rasterized by an external command such as `pdftoppm`) and SVG (rasterized
//! in-process).
//!
//! A compiler with a slow start-up can instead run as a persistent worker: one JSON
//! line `{"input": "<abs path>"}` per job on stdin, one line `{"exit": <code>}` back.
//! Jobs still get their own directory; a worker that times out is killed and replaced.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use resvg::{tiny_skia, usvg};
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::normalize::NormalizedProgram;
use crate::record::{CompileStatus, ContentHash};
use crate::store::ArtifactCache;

/// Overrides `argv[0]` of the configured compiler command.
pub const COMPILER_ENV: &str = "TIKZKIT_COMPILER";

const JOB_NAME: &str = "input";
const MAX_RENDER_PIXELS: f32 = 64.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Pdf,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Compiler argv. `{input}` expands to the `.tex` file name, `{dir}` to the job directory.
    pub compiler_command: Vec<String>,
    /// Optional persistent-worker argv speaking the line protocol; replaces `compiler_command` when set.
    pub worker_command: Vec<String>,
    pub output_format: OutputFormat,
    /// PDF route only. `{pdf}`, `{dpi}` and `{stem}` are expanded; `{stem}.png` is expected.
    pub rasterizer_command: Vec<String>,
    pub timeout_s: f64,
    /// Extra time allowed for killing and reaping a timed-out compiler.
    pub grace_ms: u64,
    pub render_dpi: u32,
    pub max_log_bytes: usize,
    /// Directories with fonts needed by the SVG route.
    pub font_dirs: Vec<PathBuf>,
    /// Per-channel distance from white below which a pixel counts as background.
    pub blank_tolerance: u8,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            compiler_command: [
                "pdflatex",
                "-interaction=nonstopmode",
                "-halt-on-error",
                "-no-shell-escape",
                "{input}",
            ]
            .map(String::from)
            .to_vec(),
            worker_command: Vec::new(),
            output_format: OutputFormat::Pdf,
            rasterizer_command: ["pdftoppm", "-png", "-r", "{dpi}", "-singlefile", "{pdf}", "{stem}"]
                .map(String::from)
                .to_vec(),
            timeout_s: 60.0,
            grace_ms: 2000,
            render_dpi: 300,
            max_log_bytes: 64 * 1024,
            font_dirs: Vec::new(),
            blank_tolerance: 8,
        }
    }
}

impl SandboxConfig {
    /// The WebAssembly TeX route: `node <driver_dir>/compile.js`, SVG output, persistent worker.
    pub fn tikzjax(driver_dir: &Path) -> Self {
        let script = driver_dir.join("compile.js").to_string_lossy().into_owned();
        SandboxConfig {
            compiler_command: vec!["node".into(), script.clone(), "{input}".into()],
            worker_command: vec!["node".into(), script, "--serve".into()],
            output_format: OutputFormat::Svg,
            rasterizer_command: Vec::new(),
            font_dirs: vec![driver_dir.join("node_modules/node-tikzjax/css/bakoma/ttf")],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.timeout_s > 0.0) {
            problems.push("compile.timeout_s must be > 0".to_string());
        }
        if self.render_dpi == 0 {
            problems.push("compile.render_dpi must be > 0".to_string());
        }
        if self.compiler_command.is_empty() {
            problems.push("compile.compiler_command is empty".to_string());
        } else if !self.compiler_command.iter().any(|a| a.contains("{input}")) {
            problems.push("compile.compiler_command lacks an {input} placeholder".to_string());
        }
        if self.output_format == OutputFormat::Pdf && self.rasterizer_command.is_empty() {
            problems.push("compile.rasterizer_command is required for pdf output".to_string());
        }
        if self.max_log_bytes == 0 {
            problems.push("compile.max_log_bytes must be > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Stable digest of everything that can change a compile outcome.
    fn fingerprint(&self) -> String {
        format!(
            "{:?}|{:?}|{:?}|{}|{}",
            self.compiler_command, self.output_format, self.rasterizer_command, self.render_dpi, self.blank_tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileResult {
    pub record_id: String,
    pub status: CompileStatus,
    pub log_text: String,
    pub duration_ms: u64,
    /// Cache-relative key of the PNG render (see [`CompileHarness::artifact_path`]).
    pub artifact_path: Option<String>,
}

/// Keeps the last `max` bytes of `log`, cut on a char boundary.
pub fn tail_truncate(log: &str, max: usize) -> &str {
    if log.len() <= max {
        return log;
    }
    let mut start = log.len() - max;
    while !log.is_char_boundary(start) {
        start += 1;
    }
    &log[start..]
}

/// Fraction of results with status `ok`.
pub fn compilation_rate(results: &[CompileResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("compilation rate of an empty result list is undefined"));
    }
    let ok = results.iter().filter(|r| r.status.is_ok()).count();
    Ok(ok as f64 / results.len() as f64)
}

enum Render {
    Png(Vec<u8>),
    Blank,
    Corrupted(String),
}

/// Anything that turns a program into a compile result.
pub trait Compile: Sync {
    fn compile(&self, p: &NormalizedProgram) -> Result<CompileResult>;

    /// Filesystem location of a result's render, when the backend keeps one.
    fn artifact_path(&self, _result: &CompileResult) -> Option<PathBuf> {
        None
    }
}

impl Compile for CompileHarness {
    fn compile(&self, p: &NormalizedProgram) -> Result<CompileResult> {
        CompileHarness::compile(self, p)
    }

    fn artifact_path(&self, result: &CompileResult) -> Option<PathBuf> {
        CompileHarness::artifact_path(self, result)
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<String>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Deserialize)]
struct WorkerReply {
    exit: i32,
}

pub struct CompileHarness {
    cfg: SandboxConfig,
    workers: Mutex<Vec<Worker>>,
    artifacts: ArtifactCache,
    use_cache: bool,
    fontdb: OnceLock<Arc<usvg::fontdb::Database>>,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

impl CompileHarness {
    pub fn new(cfg: SandboxConfig, artifact_root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(CompileHarness {
            cfg,
            workers: Mutex::new(Vec::new()),
            artifacts: ArtifactCache::new(artifact_root)?,
            use_cache: true,
            fontdb: OnceLock::new(),
            cache_hits: AtomicU64::new(0),
            cache_misses: AtomicU64::new(0),
        })
    }

    pub fn without_cache(mut self) -> Self {
        self.use_cache = false;
        self
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.cfg
    }

    pub fn artifacts(&self) -> &ArtifactCache {
        &self.artifacts
    }

    pub fn artifact_path(&self, result: &CompileResult) -> Option<PathBuf> {
        result.artifact_path.as_deref().map(|k| self.artifacts.path_for(k))
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn cache_misses(&self) -> u64 {
        self.cache_misses.load(Ordering::Relaxed)
    }

    fn cache_key(&self, p: &NormalizedProgram) -> ContentHash {
        let mut bytes = p.content_hash.0.to_vec();
        bytes.extend_from_slice(self.cfg.fingerprint().as_bytes());
        ContentHash::of(&bytes)
    }

    /// Compiles one program, consulting the result cache first.
    pub fn compile(&self, p: &NormalizedProgram) -> Result<CompileResult> {
        let key = self.cache_key(p);
        if self.use_cache {
            if let Some(bytes) = self.artifacts.get(&key, "result.json")? {
                if let Ok(mut cached) = serde_json::from_slice::<CompileResult>(&bytes) {
                    let artifact_ok = cached
                        .artifact_path
                        .as_deref()
                        .map_or(true, |k| self.artifacts.path_for(k).exists());
                    if artifact_ok {
                        self.cache_hits.fetch_add(1, Ordering::Relaxed);
                        cached.record_id = p.record_id.clone();
                        return Ok(cached);
                    }
                }
            }
        }
        self.cache_misses.fetch_add(1, Ordering::Relaxed);
        let result = self.compile_uncached(p, &key)?;
        if self.use_cache {
            self.artifacts.put(&key, "result.json", &serde_json::to_vec(&result)?)?;
        }
        Ok(result)
    }

    /// Compiles on a bounded pool of `jobs` workers; output order follows input order.
    pub fn compile_all(&self, programs: &[NormalizedProgram], jobs: usize) -> Vec<Result<CompileResult>> {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
            Ok(pool) => pool.install(|| programs.par_iter().map(|p| self.compile(p)).collect()),
            Err(e) => programs
                .iter()
                .map(|_| Err(Error::Infrastructure(format!("cannot start worker pool: {e}"))))
                .collect(),
        }
    }

    fn compile_uncached(&self, p: &NormalizedProgram, key: &ContentHash) -> Result<CompileResult> {
        let started = Instant::now();
        let dir = tempfile::Builder::new()
            .prefix("tikzkit-job-")
            .tempdir()
            .map_err(|e| Error::Infrastructure(format!("cannot create sandbox directory: {e}")))?;
        let input = format!("{JOB_NAME}.tex");
        fs::write(dir.path().join(&input), &p.code)
            .map_err(|e| Error::Infrastructure(format!("cannot write job input: {e}")))?;

        let outcome = if self.cfg.worker_command.is_empty() {
            self.run(dir.path(), &self.cfg.compiler_command, &[("{input}", input.as_str())])?
        } else {
            self.run_on_worker(&dir.path().join(&input))?
        };
        let mut log = read_log(dir.path(), &outcome);
        let finish = |status: CompileStatus, log: String, artifact: Option<String>| CompileResult {
            record_id: p.record_id.clone(),
            status,
            log_text: tail_truncate(&log, self.cfg.max_log_bytes).to_string(),
            duration_ms: started.elapsed().as_millis() as u64,
            artifact_path: artifact,
        };

        if outcome.timed_out {
            return Ok(finish(CompileStatus::Timeout, log, None));
        }
        if !outcome.success {
            if log.trim().is_empty() {
                log = format!("compiler exited with {}", outcome.code_description);
            }
            return Ok(finish(CompileStatus::CompileError, log, None));
        }

        let render = match self.cfg.output_format {
            OutputFormat::Svg => self.render_svg(&dir.path().join(format!("{JOB_NAME}.svg"))),
            OutputFormat::Pdf => self.render_pdf(dir.path())?,
        };
        match render {
            Render::Png(png) => {
                let artifact = self.artifacts.put(key, "png", &png)?;
                Ok(finish(CompileStatus::Ok, log, Some(artifact)))
            }
            Render::Blank => {
                log.push_str("\n[tikzkit] render is blank or missing\n");
                Ok(finish(CompileStatus::EmptyOutput, log, None))
            }
            Render::Corrupted(why) => {
                log.push_str(&format!("\n[tikzkit] output could not be rendered: {why}\n"));
                Ok(finish(CompileStatus::CorruptedOutput, log, None))
            }
        }
    }

    fn spawn_worker(&self) -> Result<Worker> {
        let mut argv = self.cfg.worker_command.clone();
        if let Ok(over) = std::env::var(COMPILER_ENV) {
            if !over.is_empty() {
                argv[0] = over;
            }
        }
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .env("openout_any", "p")
            .env("shell_escape", "f")
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                    Error::CompilerUnavailable(format!("{}: {e}", argv[0]))
                }
                _ => Error::Infrastructure(format!("cannot start {}: {e}", argv[0])),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, replies) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker { child, stdin, replies })
    }

    fn run_on_worker(&self, input: &Path) -> Result<RunOutcome> {
        let pooled = self.workers.lock().expect("worker pool").pop();
        let mut worker = match pooled {
            Some(w) => w,
            None => self.spawn_worker()?,
        };
        let request = format!("{}\n", serde_json::json!({ "input": input }));
        if worker.stdin.write_all(request.as_bytes()).and_then(|_| worker.stdin.flush()).is_err() {
            worker = self.spawn_worker()?;
            worker
                .stdin
                .write_all(request.as_bytes())
                .and_then(|_| worker.stdin.flush())
                .map_err(|e| Error::Infrastructure(format!("compile worker rejected a job: {e}")))?;
        }
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        match worker.replies.recv_timeout(timeout) {
            Ok(line) => {
                let code = serde_json::from_str::<WorkerReply>(&line)
                    .map_err(|e| Error::Infrastructure(format!("compile worker sent {line:?}: {e}")))?
                    .exit;
                if code != 3 && worker.child.try_wait().ok().flatten().is_none() {
                    self.workers.lock().expect("worker pool").push(worker);
                }
                Ok(RunOutcome {
                    success: code == 0,
                    timed_out: false,
                    code_description: format!("exit status: {code}"),
                })
            }
            Err(RecvTimeoutError::Timeout) => Ok(RunOutcome {
                success: false,
                timed_out: true,
                code_description: format!("timeout after {:.1}s", self.cfg.timeout_s),
            }),
            Err(RecvTimeoutError::Disconnected) => Ok(RunOutcome {
                success: false,
                timed_out: false,
                code_description: "compile worker exited mid-job".to_string(),
            }),
        }
    }

    fn run(&self, dir: &Path, template: &[String], subs: &[(&str, &str)]) -> Result<RunOutcome> {
        let dir_str = dir.to_string_lossy();
        let mut argv: Vec<String> = template
            .iter()
            .map(|arg| {
                let mut a = arg.replace("{dir}", &dir_str);
                for (k, v) in subs {
                    a = a.replace(k, v);
                }
                a
            })
            .collect();
        if std::ptr::eq(template, self.cfg.compiler_command.as_slice()) {
            if let Ok(over) = std::env::var(COMPILER_ENV) {
                if !over.is_empty() {
                    argv[0] = over;
                }
            }
        }
        let stdout = File::create(dir.join("stdout.txt")).map_err(|e| Error::Infrastructure(e.to_string()))?;
        let stderr = File::create(dir.join("stderr.txt")).map_err(|e| Error::Infrastructure(e.to_string()))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .env("TEXMFOUTPUT", dir)
            .env("openout_any", "p")
            .env("shell_escape", "f")
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                    Error::CompilerUnavailable(format!("{}: {e}", argv[0]))
                }
                _ => Error::Infrastructure(format!("cannot start {}: {e}", argv[0])),
            })?;

        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        match child.wait_timeout(timeout).map_err(|e| Error::Infrastructure(e.to_string()))? {
            Some(status) => Ok(RunOutcome {
                success: status.success(),
                timed_out: false,
                code_description: status.to_string(),
            }),
            None => {
                let _ = child.kill();
                let grace = Duration::from_millis(self.cfg.grace_ms);
                let _ = child.wait_timeout(grace);
                Ok(RunOutcome {
                    success: false,
                    timed_out: true,
                    code_description: format!("timeout after {:.1}s", self.cfg.timeout_s),
                })
            }
        }
    }

    fn fontdb(&self) -> Arc<usvg::fontdb::Database> {
        self.fontdb
            .get_or_init(|| {
                let mut db = usvg::fontdb::Database::new();
                for dir in &self.cfg.font_dirs {
                    db.load_fonts_dir(dir);
                }
                db.load_system_fonts();
                Arc::new(db)
            })
            .clone()
    }

    fn render_svg(&self, svg_path: &Path) -> Render {
        let data = match fs::read(svg_path) {
            Ok(d) => d,
            Err(_) => return Render::Blank,
        };
        let opts = usvg::Options {
            fontdb: self.fontdb(),
            ..Default::default()
        };
        let tree = match usvg::Tree::from_data(&data, &opts) {
            Ok(t) => t,
            Err(usvg::Error::InvalidSize) => return Render::Blank,
            Err(e) => return Render::Corrupted(e.to_string()),
        };
        let size = tree.size();
        let mut scale = self.cfg.render_dpi as f32 / 72.0;
        let pixels = size.width() * size.height() * scale * scale;
        if pixels > MAX_RENDER_PIXELS {
            scale *= (MAX_RENDER_PIXELS / pixels).sqrt();
        }
        let w = (size.width() * scale).ceil() as u32;
        let h = (size.height() * scale).ceil() as u32;
        let Some(mut pixmap) = tiny_skia::Pixmap::new(w.max(1), h.max(1)) else {
            return Render::Blank;
        };
        pixmap.fill(tiny_skia::Color::WHITE);
        resvg::render(&tree, tiny_skia::Transform::from_scale(scale, scale), &mut pixmap.as_mut());
        if w == 0 || h == 0 || !has_ink_rgba(pixmap.data(), self.cfg.blank_tolerance) {
            return Render::Blank;
        }
        match pixmap.encode_png() {
            Ok(png) => Render::Png(png),
            Err(e) => Render::Corrupted(e.to_string()),
        }
    }

    fn render_pdf(&self, dir: &Path) -> Result<Render> {
        let pdf = format!("{JOB_NAME}.pdf");
        if !dir.join(&pdf).exists() {
            return Ok(Render::Blank);
        }
        let dpi = self.cfg.render_dpi.to_string();
        let outcome = self.run(
            dir,
            &self.cfg.rasterizer_command,
            &[("{pdf}", pdf.as_str()), ("{dpi}", dpi.as_str()), ("{stem}", "render")],
        )?;
        if !outcome.success {
            return Ok(Render::Corrupted(format!("rasterizer failed ({})", outcome.code_description)));
        }
        let png = match fs::read(dir.join("render.png")) {
            Ok(b) => b,
            Err(e) => return Ok(Render::Corrupted(format!("rasterizer produced no image: {e}"))),
        };
        Ok(match png_has_ink(&png, self.cfg.blank_tolerance) {
            Ok(true) => Render::Png(png),
            Ok(false) => Render::Blank,
            Err(e) => Render::Corrupted(e),
        })
    }
}

struct RunOutcome {
    success: bool,
    timed_out: bool,
    code_description: String,
}

fn read_log(dir: &Path, outcome: &RunOutcome) -> String {
    let mut log = fs::read(dir.join(format!("{JOB_NAME}.log")))
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default();
    if log.trim().is_empty() {
        for name in ["stdout.txt", "stderr.txt"] {
            if let Ok(b) = fs::read(dir.join(name)) {
                log.push_str(&String::from_utf8_lossy(&b));
            }
        }
    }
    if outcome.timed_out {
        log.push_str(&format!("\n[tikzkit] {}\n", outcome.code_description));
    }
    log
}

/// True when some pixel differs from white by more than `tol` in any channel.
/// Expects opaque (background-filled) RGBA8.
fn has_ink_rgba(data: &[u8], tol: u8) -> bool {
    data.chunks_exact(4)
        .any(|px| px[..3].iter().any(|&c| 255 - c > tol))
}

/// Decodes a PNG and reports whether it carries any ink, compositing alpha over white.
pub fn png_has_ink(bytes: &[u8], tol: u8) -> std::result::Result<bool, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let buf = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let ink = buf.chunks_exact(channels).any(|px| {
        let (rgb, alpha): ([u8; 3], u8) = match channels {
            1 => ([px[0]; 3], 255),
            2 => ([px[0]; 3], px[1]),
            3 => ([px[0], px[1], px[2]], 255),
            _ => ([px[0], px[1], px[2]], px[3]),
        };
        rgb.iter().any(|&c| {
            let over_white = (c as u32 * alpha as u32 + 255 * (255 - alpha as u32)) / 255;
            255 - over_white as u8 > tol
        })
    });
    Ok(ink)
}
