//! Group-relative policy optimisation surrogate: advantages, clipped objective and its gradient.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_ref: Option<Vec<f64>>,
    pub reward: f64,
    #[serde(default)]
    pub truncated: bool,
}

impl Rollout {
    pub fn token_count(&self) -> usize {
        self.logp_new.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.logp_new.len();
        if self.logp_old.len() != t || self.logp_ref.as_ref().is_some_and(|r| r.len() != t) {
            return Err(Error::invalid("log-probability vectors of a rollout differ in length"));
        }
        let all = self
            .logp_new
            .iter()
            .chain(&self.logp_old)
            .chain(self.logp_ref.iter().flatten());
        for v in all {
            if !v.is_finite() || *v > 0.0 {
                return Err(Error::invalid(format!("log-probability {v} is not finite and <= 0")));
            }
        }
        if !self.reward.is_finite() {
            return Err(Error::invalid("reward is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub max_completion_length: usize,
    pub scale_by_std: bool,
    pub mask_truncated: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            max_completion_length: 2048,
            scale_by_std: false,
            mask_truncated: true,
        }
    }
}

impl GrpoConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            p.push("grpo.eps_low must lie in (0, 1)".to_string());
        }
        if !(self.eps_high >= self.eps_low) {
            p.push("grpo.eps_high must be >= eps_low".to_string());
        }
        if !(self.beta >= 0.0) {
            p.push("grpo.beta must be >= 0".to_string());
        }
        if self.max_completion_length == 0 {
            p.push("grpo.max_completion_length must be >= 1".to_string());
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub advantages: Vec<f64>,
    pub objective: f64,
    /// Clipped surrogate per token, before the 1/(L·G) factor; empty for masked rollouts.
    pub per_token_terms: Vec<Vec<f64>>,
}

/// Rewards minus their mean, optionally divided by the population standard deviation.
pub fn group_advantages(rewards: &[f64], scale_by_std: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!("group size {} is below 2", rewards.len())));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !scale_by_std {
        return Ok(centered);
    }
    let std = (centered.iter().map(|a| a * a).sum::<f64>() / g).sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.iter().map(|a| a / std).collect())
}

/// `min(ρ·A, clip(ρ, 1-eps_low, 1+eps_high)·A)` with `ρ = exp(new - old)`.
pub fn clipped_token_term(logp_new: f64, logp_old: f64, advantage: f64, cfg: &GrpoConfig) -> f64 {
    clipped_ratio_term((logp_new - logp_old).exp(), advantage, cfg)
}

pub fn clipped_ratio_term(rho: f64, advantage: f64, cfg: &GrpoConfig) -> f64 {
    let clipped = rho.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    (rho * advantage).min(clipped * advantage)
}

fn kl_estimate(logp_ref: f64, logp_new: f64) -> f64 {
    let d = logp_ref - logp_new;
    d.exp() - d - 1.0
}

fn check_group(group: &[Rollout], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    for r in group {
        r.validate()?;
        if r.token_count() > cfg.max_completion_length {
            return Err(Error::invalid(format!(
                "rollout has {} tokens, above max_completion_length {}",
                r.token_count(),
                cfg.max_completion_length
            )));
        }
    }
    if cfg.beta > 0.0 && group.iter().any(|r| r.logp_ref.is_none()) {
        return Err(Error::Config(vec!["grpo.beta > 0 requires logp_ref for every rollout".into()]));
    }
    let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
    group_advantages(&rewards, cfg.scale_by_std)
}

fn contributes(r: &Rollout, cfg: &GrpoConfig) -> bool {
    !(cfg.mask_truncated && r.truncated)
}

/// `J = 1/(L·G) Σ_i Σ_t [term - β·k]`, skipping masked rollouts.
pub fn grpo_objective(group: &[Rollout], cfg: &GrpoConfig) -> Result<GroupResult> {
    let advantages = check_group(group, cfg)?;
    let norm = 1.0 / (cfg.max_completion_length as f64 * group.len() as f64);
    let mut total = 0.0;
    let mut per_token_terms = Vec::with_capacity(group.len());
    for (r, &a) in group.iter().zip(&advantages) {
        if !contributes(r, cfg) {
            per_token_terms.push(Vec::new());
            continue;
        }
        let terms: Vec<f64> = r
            .logp_new
            .iter()
            .zip(&r.logp_old)
            .map(|(n, o)| clipped_token_term(*n, *o, a, cfg))
            .collect();
        total += terms.iter().sum::<f64>();
        if cfg.beta > 0.0 {
            let reference = r.logp_ref.as_ref().expect("checked above");
            total -= cfg.beta * reference.iter().zip(&r.logp_new).map(|(f, n)| kl_estimate(*f, *n)).sum::<f64>();
        }
        per_token_terms.push(terms);
    }
    Ok(GroupResult {
        advantages,
        objective: total * norm,
        per_token_terms,
    })
}

/// `∂J/∂logp_new` per token: `ρ·A/(L·G)` where the unclipped branch is the minimum, else 0,
/// minus `β/(L·G)·(1 - exp(ref - new))`.
pub fn grpo_gradient(group: &[Rollout], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>> {
    let advantages = check_group(group, cfg)?;
    let norm = 1.0 / (cfg.max_completion_length as f64 * group.len() as f64);
    Ok(group
        .iter()
        .zip(&advantages)
        .map(|(r, &a)| {
            if !contributes(r, cfg) {
                return vec![0.0; r.token_count()];
            }
            (0..r.token_count())
                .map(|t| {
                    let rho = (r.logp_new[t] - r.logp_old[t]).exp();
                    let clipped = rho.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
                    let mut g = if rho * a <= clipped * a { rho * a } else { 0.0 };
                    if cfg.beta > 0.0 {
                        let d = r.logp_ref.as_ref().expect("checked above")[t] - r.logp_new[t];
                        g -= cfg.beta * (1.0 - d.exp());
                    }
                    g * norm
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    #[serde(default)]
    pub group_id: String,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group_id: String,
    pub advantages: Vec<f64>,
    pub objective: f64,
    pub gradients: Vec<Vec<f64>>,
}

pub fn score_group(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<GroupScore> {
    let result = grpo_objective(&group.rollouts, cfg)?;
    Ok(GroupScore {
        group_id: group.group_id.clone(),
        advantages: result.advantages,
        objective: result.objective,
        gradients: grpo_gradient(&group.rollouts, cfg)?,
    })
}

pub const BATCH_MAGIC: &[u8; 8] = b"GRPOBAT1";
pub const SCORE_MAGIC: &[u8; 8] = b"GRPOSCR1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid(format!("binary batch truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::invalid("binary batch length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::invalid("group id is not UTF-8"))
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Layout: magic, u32 group count; per group: id, u32 G; per rollout: u32 T, u8 truncated,
/// u8 has_ref, f64 reward, then T f32 new, T f32 old and (if present) T f32 ref. All LE.
pub fn encode_batch(groups: &[RolloutGroup]) -> Vec<u8> {
    let mut out = BATCH_MAGIC.to_vec();
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        put_str(&mut out, &g.group_id);
        out.extend_from_slice(&(g.rollouts.len() as u32).to_le_bytes());
        for r in &g.rollouts {
            out.extend_from_slice(&(r.token_count() as u32).to_le_bytes());
            out.push(r.truncated as u8);
            out.push(r.logp_ref.is_some() as u8);
            out.extend_from_slice(&r.reward.to_le_bytes());
            put_f32s(&mut out, &r.logp_new);
            put_f32s(&mut out, &r.logp_old);
            if let Some(f) = &r.logp_ref {
                put_f32s(&mut out, f);
            }
        }
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<RolloutGroup>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != BATCH_MAGIC {
        return Err(Error::invalid("not a rollout batch file"));
    }
    let n = c.u32()?;
    let mut groups = Vec::new();
    for _ in 0..n {
        let group_id = c.string()?;
        let g = c.u32()?;
        let mut rollouts = Vec::new();
        for _ in 0..g {
            let t = c.u32()?;
            let truncated = c.u8()? != 0;
            let has_ref = c.u8()? != 0;
            let reward = c.f64()?;
            let logp_new = c.f32s(t)?;
            let logp_old = c.f32s(t)?;
            let logp_ref = if has_ref { Some(c.f32s(t)?) } else { None };
            rollouts.push(Rollout {
                logp_new,
                logp_old,
                logp_ref,
                reward,
                truncated,
            });
        }
        groups.push(RolloutGroup { group_id, rollouts });
    }
    if c.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after rollout batch"));
    }
    Ok(groups)
}

/// Layout: magic, u32 group count; per group: id, u32 G, f64 objective, G f64 advantages,
/// then per rollout u32 T and T f32 gradients. All LE.
pub fn encode_scores(scores: &[GroupScore]) -> Vec<u8> {
    let mut out = SCORE_MAGIC.to_vec();
    out.extend_from_slice(&(scores.len() as u32).to_le_bytes());
    for s in scores {
        put_str(&mut out, &s.group_id);
        out.extend_from_slice(&(s.advantages.len() as u32).to_le_bytes());
        out.extend_from_slice(&s.objective.to_le_bytes());
        for a in &s.advantages {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for g in &s.gradients {
            out.extend_from_slice(&(g.len() as u32).to_le_bytes());
            put_f32s(&mut out, g);
        }
    }
    out
}

pub fn decode_scores(bytes: &[u8]) -> Result<Vec<GroupScore>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != SCORE_MAGIC {
        return Err(Error::invalid("not a score file"));
    }
    let n = c.u32()?;
    let mut scores = Vec::new();
    for _ in 0..n {
        let group_id = c.string()?;
        let g = c.u32()?;
        let objective = c.f64()?;
        let advantages = (0..g).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let mut gradients = Vec::new();
        for _ in 0..g {
            let t = c.u32()?;
            gradients.push(c.f32s(t)?);
        }
        scores.push(GroupScore {
            group_id,
            advantages,
            objective,
            gradients,
        });
    }
    Ok(scores)
}

pub fn read_batch(mut r: impl Read) -> Result<Vec<RolloutGroup>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.starts_with(BATCH_MAGIC) {
        return decode_batch(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::invalid("batch is neither binary nor UTF-8 JSONL"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "<batch>".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_scores_jsonl(scores: &[GroupScore], mut w: impl Write) -> Result<()> {
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
