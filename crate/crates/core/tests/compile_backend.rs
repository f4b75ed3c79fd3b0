use std::path::{Path, PathBuf};

use tikzkit_core::compile::{CompileHarness, SandboxConfig};
use tikzkit_core::normalize::NormalizedProgram;
use tikzkit_core::record::CompileStatus;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn harness(timeout_s: f64) -> Option<(CompileHarness, tempfile::TempDir)> {
    let driver = workspace().join("tools/tikzjax");
    if !driver.join("node_modules/node-tikzjax").exists() {
        eprintln!("tikzjax backend not installed; skipping");
        return None;
    }
    let cfg = SandboxConfig {
        timeout_s,
        render_dpi: 72,
        ..SandboxConfig::tikzjax(&driver)
    };
    let dir = tempfile::tempdir().unwrap();
    Some((CompileHarness::new(cfg, dir.path()).unwrap().without_cache(), dir))
}

fn fixture(rel: &str) -> NormalizedProgram {
    let code = std::fs::read_to_string(workspace().join("fixtures/compile").join(rel)).unwrap();
    NormalizedProgram::from_code(rel, code)
}

#[test]
fn text_only_figure_is_not_blank() {
    let Some((h, _dir)) = harness(60.0) else { return };
    let r = h.compile(&fixture("good/text_only.tex")).unwrap();
    assert_eq!(r.status, CompileStatus::Ok, "{}", r.log_text);
    let png = std::fs::read(h.artifact_path(&r).unwrap()).unwrap();
    assert_eq!(tikzkit_core::compile::png_has_ink(&png, 8), Ok(true));
}

#[test]
fn error_and_degenerate_outputs() {
    let Some((h, _dir)) = harness(8.0) else { return };
    let r = h.compile(&fixture("error/undefined_control_sequence.tex")).unwrap();
    assert_eq!(r.status, CompileStatus::CompileError);
    assert!(r.log_text.contains("Undefined control sequence"));
    let r = h.compile(&fixture("error/empty_picture.tex")).unwrap();
    assert_eq!(r.status, CompileStatus::EmptyOutput, "{}", r.log_text);
    let r = h.compile(&fixture("error/infinite_loop.tex")).unwrap();
    assert_eq!(r.status, CompileStatus::Timeout);
}

#[test]
fn worker_and_one_shot_modes_agree() {
    let Some((worker, _a)) = harness(20.0) else { return };
    let one_shot_cfg = SandboxConfig {
        worker_command: Vec::new(),
        ..worker.config().clone()
    };
    let dir = tempfile::tempdir().unwrap();
    let one_shot = CompileHarness::new(one_shot_cfg, dir.path()).unwrap().without_cache();
    for rel in [
        "good/text_only.tex",
        "error/engine_abort.tex",
        "good/arrows_shapes.tex",
        "error/unknown_key.tex",
    ] {
        let p = fixture(rel);
        let a = worker.compile(&p).unwrap();
        let b = one_shot.compile(&p).unwrap();
        assert_eq!(a.status, b.status, "{rel}");
        assert_eq!(a.log_text, b.log_text, "{rel}");
        assert_eq!(a.artifact_path, b.artifact_path, "{rel}");
    }
}

#[test]
fn stalled_engine_is_a_compile_error() {
    let Some((h, _dir)) = harness(20.0) else { return };
    let r = h.compile(&fixture("error/engine_abort.tex")).unwrap();
    assert_eq!(r.status, CompileStatus::CompileError);
    assert!(r.log_text.contains("aborted"), "{}", r.log_text);
    let r = h.compile(&fixture("good/text_only.tex")).unwrap();
    assert_eq!(r.status, CompileStatus::Ok);
}
