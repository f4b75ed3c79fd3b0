//! Similarity, format and rollout rewards.

pub mod emd;
pub mod embedding;
pub mod provider;

use serde::{Deserialize, Serialize};

pub use emd::{solve_emd, solve_sinkhorn, Matrix, SinkhornConfig, TransportPlan};
pub use embedding::{cosine_distance_matrix, PatchEmbeddingSet};
pub use provider::{EmbeddingProvider, GridProvider, ProviderConfig};

use crate::compile::Compile;
use crate::error::{Error, Result};
use crate::normalize::{NormalizedProgram, BEGIN_DOCUMENT, DOCUMENT_CLASS, END_DOCUMENT};
use crate::record::CompileStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    ExactTransportation,
    EntropicApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub clamp_to_unit: bool,
    pub solver: Solver,
    pub entropic_epsilon: f64,
    pub sinkhorn_max_iterations: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            clamp_to_unit: true,
            solver: Solver::ExactTransportation,
            entropic_epsilon: 0.01,
            sinkhorn_max_iterations: 10_000,
        }
    }
}

impl RewardConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.solver == Solver::EntropicApproximation && !(self.entropic_epsilon > 0.0) {
            p.push("reward.entropic_epsilon must be > 0 with the entropic solver".to_string());
        }
        if self.sinkhorn_max_iterations == 0 {
            p.push("reward.sinkhorn_max_iterations must be >= 1".to_string());
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// Clamped into [0, 1] when configured.
    pub reward: f64,
    /// `1 - cost`, before clamping.
    pub raw: f64,
    pub cost: f64,
}

pub fn transport(d: &Matrix, cfg: &RewardConfig) -> Result<TransportPlan> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    match cfg.solver {
        Solver::ExactTransportation => solve_emd(d),
        Solver::EntropicApproximation => solve_sinkhorn(
            d,
            &SinkhornConfig {
                epsilon: cfg.entropic_epsilon,
                max_iterations: cfg.sinkhorn_max_iterations,
                ..SinkhornConfig::default()
            },
        ),
    }
}

/// `1 - Σ F·D / Σ F` for the optimal flow `F`.
pub fn similarity_reward(x: &PatchEmbeddingSet, y: &PatchEmbeddingSet, cfg: &RewardConfig) -> Result<Similarity> {
    let d = cosine_distance_matrix(x, y)?;
    let plan = transport(&d, cfg)?;
    let total: f64 = plan.flow.data.iter().sum();
    let raw = 1.0 - plan.cost / total;
    let reward = if cfg.clamp_to_unit { raw.clamp(0.0, 1.0) } else { raw };
    Ok(Similarity {
        reward,
        raw,
        cost: plan.cost,
    })
}

/// 1 when the code is a complete standalone TikZ document, else 0.
pub fn format_reward(code: &str) -> f64 {
    let t = code.trim();
    let ok = t.starts_with(DOCUMENT_CLASS)
        && t.ends_with(END_DOCUMENT)
        && t[DOCUMENT_CLASS.len()..t.len() - END_DOCUMENT.len()].contains(BEGIN_DOCUMENT);
    if ok {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReward {
    pub reward: f64,
    pub raw: Option<f64>,
    pub format: f64,
    pub compile_status: Option<CompileStatus>,
    pub provider: String,
    pub dim: usize,
}

/// Format gate, then compile gate, then similarity of the render's embeddings to `gt`.
/// Provider failures surface as infrastructure errors; such rollouts are unscored.
pub fn rollout_reward(
    code: &str,
    gt: &PatchEmbeddingSet,
    provider: &dyn EmbeddingProvider,
    compiler: &dyn Compile,
    cfg: &RewardConfig,
) -> Result<RolloutReward> {
    let mut out = RolloutReward {
        reward: 0.0,
        raw: None,
        format: format_reward(code),
        compile_status: None,
        provider: provider.identity(),
        dim: gt.dim(),
    };
    if out.format == 0.0 {
        return Ok(out);
    }
    let program = NormalizedProgram::from_code("rollout", code);
    let result = compiler.compile(&program)?;
    out.compile_status = Some(result.status);
    if !result.status.is_ok() {
        return Ok(out);
    }
    let image = compiler
        .artifact_path(&result)
        .ok_or_else(|| Error::Infrastructure("compiled rollout has no stored render".into()))?;
    let emb = provider.embed(&image).map_err(|e| match e {
        Error::Infrastructure(_) => e,
        other => Error::Infrastructure(format!("embedding provider: {other}")),
    })?;
    let sim = similarity_reward(&emb, gt, cfg)?;
    out.reward = sim.reward;
    out.raw = Some(sim.raw);
    Ok(out)
}
