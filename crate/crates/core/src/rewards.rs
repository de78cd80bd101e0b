//! Reward terms for selected-frame rollouts and their composite.
//!
//! Three signals are combined per rollout:
//!
//! * **answer reward** — 1 if the oracle's answer under the selected frames
//!   matches the ground-truth option, else 0;
//! * **cycle-consistency reward** — Jaccard overlap between the visual
//!   elements the question requires and the elements the oracle cites when
//!   asked to justify its answer;
//! * **counterfactual reward** — KL divergence between the answer
//!   distributions under the selected frames and under counterfactually
//!   selected (policy-avoided) frames. A selection that captures the causal
//!   evidence makes its removal matter, so larger divergence is better.
//!
//! The composite is `r_ans + λ₁·r_cycle + λ₂·r_cf`, with an optional cap on
//! the unbounded KL term. Group advantages are mean-centered composites.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::pool::normalize_element;
use crate::vecmath::softmax;

/// Probability floor applied after softmax before the KL logarithms.
pub const KL_FLOOR: f64 = 1e-8;

/// Per-rollout reward terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RewardBreakdown {
    /// Answer-correctness indicator (0 or 1).
    pub r_ans: f64,
    /// Element-overlap (Jaccard) cycle-consistency term in [0, 1].
    pub r_cycle: f64,
    /// Counterfactual KL term, ≥ 0 (possibly capped).
    pub r_cf: f64,
    /// `r_ans + lambda1 · r_cycle + lambda2 · r_cf`.
    pub total: f64,
}

/// Extracts an option index from an oracle's free-text answer.
///
/// Scans whitespace-separated tokens, strips common punctuation from the
/// edges, and accepts a single letter in `A..` (case-insensitive) for
/// `option_count` options — so "The answer is (B)." parses as 1. If no
/// letter token matches, falls back to an exact case-insensitive match of
/// the whole trimmed reply against an option's text.
pub fn parse_option_index(reply: &str, options: &[String]) -> Option<usize> {
    let count = options.len();
    if count == 0 {
        return None;
    }
    for token in reply.split_whitespace() {
        let stripped = token.trim_matches(|c: char| {
            c.is_ascii_punctuation() && c != '-' || c == '“' || c == '”' || c == '‘' || c == '’'
        });
        let mut chars = stripped.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            let upper = c.to_ascii_uppercase();
            if upper.is_ascii_uppercase() {
                let idx = (upper as u8 - b'A') as usize;
                if idx < count {
                    return Some(idx);
                }
            }
        }
    }
    let trimmed = reply.trim();
    options
        .iter()
        .position(|o| o.trim().eq_ignore_ascii_case(trimmed))
}

/// Option letter ("A", "B", ...) for a zero-based option index.
pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

/// 1.0 when the predicted option matches the correct one, else 0.0.
pub fn answer_reward(predicted: Option<usize>, correct: usize) -> f64 {
    match predicted {
        Some(p) if p == correct => 1.0,
        _ => 0.0,
    }
}

/// Jaccard overlap |A ∩ B| / |A ∪ B| between two element sets, after
/// whitespace/case normalization. Both sets empty yields 0 (no evidence of
/// consistency, rather than vacuous perfection).
pub fn cycle_reward(question_elements: &[String], answer_elements: &[String]) -> f64 {
    let a: BTreeSet<String> = question_elements.iter().map(|e| normalize_element(e)).collect();
    let b: BTreeSet<String> = answer_elements.iter().map(|e| normalize_element(e)).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    let inter = a.intersection(&b).count();
    inter as f64 / union as f64
}

/// KL(p ‖ q) between the softmax answer distributions of the factual
/// logits `o` and counterfactual logits `o_cf` (temperature 1).
///
/// Both distributions are floored at 1e-8 and renormalized before the
/// logarithms, so one-hot-ish inputs stay finite. Asymmetric by design:
/// it measures how much the factual distribution loses when the selected
/// evidence is replaced.
pub fn counterfactual_reward(o: &[f64], o_cf: &[f64]) -> Result<f64> {
    if o.len() != o_cf.len() {
        return Err(Error::Input(format!(
            "logit vectors disagree in length: {} vs {}",
            o.len(),
            o_cf.len()
        )));
    }
    if o.is_empty() {
        return Err(Error::Input("logit vectors are empty".into()));
    }
    if o.iter().chain(o_cf).any(|v| !v.is_finite()) {
        return Err(Error::Input("logit vectors contain non-finite values".into()));
    }
    let p = floored_softmax(o);
    let q = floored_softmax(o_cf);
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        kl += pi * (pi / qi).ln();
    }
    // Floored renormalized distributions keep KL mathematically >= 0;
    // clamp residual negative rounding noise.
    Ok(kl.max(0.0))
}

fn floored_softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = softmax(logits);
    for v in p.iter_mut() {
        *v = v.max(KL_FLOOR);
    }
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
    p
}

/// `r_ans + lambda1 · r_cycle + lambda2 · r_cf`, with `r_cf` optionally
/// clamped to `cap` first. Negative λ or cap is a configuration error.
pub fn composite_reward(
    r_ans: f64,
    r_cycle: f64,
    r_cf: f64,
    lambda1: f64,
    lambda2: f64,
    cap: Option<f64>,
) -> Result<RewardBreakdown> {
    if !lambda1.is_finite() || lambda1 < 0.0 || !lambda2.is_finite() || lambda2 < 0.0 {
        return Err(Error::Config(format!(
            "reward weights must be finite and >= 0, got lambda1={lambda1}, lambda2={lambda2}"
        )));
    }
    if let Some(c) = cap {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::Config(format!(
                "counterfactual reward cap must be finite and >= 0, got {c}"
            )));
        }
    }
    let r_cf_eff = match cap {
        Some(c) => r_cf.min(c),
        None => r_cf,
    };
    let total = r_ans + lambda1 * r_cycle + lambda2 * r_cf_eff;
    Ok(RewardBreakdown {
        r_ans,
        r_cycle,
        r_cf: r_cf_eff,
        total,
    })
}

/// Mean-centered advantages for a group of rollout rewards: Â_i = R_i − R̄.
/// No variance normalization. Sums to zero up to floating-point error.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Input("advantage computation needs at least one reward".into()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical {
            episode: None,
            msg: "group rewards contain non-finite values".into(),
        });
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}
