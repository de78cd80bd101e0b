//! Subset sampling on top of per-frame selection scores.
//!
//! Selections are sequential draws without replacement: at each step frame i
//! is drawn with probability proportional to its score σ_i among the frames
//! still available, K times. [`selection_log_prob`] scores an ordered draw
//! under that process; [`invert_policy`] builds the counterfactual
//! distribution that prefers the frames the policy avoids; [`top_k`] is the
//! deterministic evaluation-time selection.
//!
//! Everything here consumes pool-relative positions (0..pool size) in draw
//! order. Mapping to original frame indices happens at the call site.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::PROB_FLOOR;

/// How a selection was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    /// Random draw from the policy.
    Sampled,
    /// Random draw from the inverted (counterfactual) policy.
    Counterfactual,
    /// Deterministic highest-score selection.
    TopK,
}

/// An ordered frame selection plus its log-probability (when stochastic).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Pool positions in the order they were drawn.
    pub ordered_indices: Vec<usize>,
    /// Log-probability of the ordered draw under its generating
    /// distribution; `None` for deterministic selections.
    pub log_prob: Option<f64>,
    /// Provenance of the selection.
    pub kind: SelectionKind,
}

impl Selection {
    /// The selection as a sorted set (temporal order), for rewards and
    /// frame extraction.
    pub fn set_view(&self) -> Vec<usize> {
        let mut v = self.ordered_indices.clone();
        v.sort_unstable();
        v
    }
}

fn validate_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Input("score vector is empty".into()));
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(Error::Input(format!(
                "score {s} at position {i} is outside [0, 1]"
            )));
        }
    }
    Ok(())
}

fn validate_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("selection size K must be >= 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "selection size K={k} exceeds pool size {n}"
        )));
    }
    Ok(())
}

/// Draws `k` distinct positions sequentially, each step proportional to the
/// remaining scores. A zero total (all scores 0) falls back to uniform
/// weights for the remaining frames, with a warning.
fn weighted_draw_without_replacement(
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
    label: &str,
) -> Result<Vec<usize>> {
    let n = weights.len();
    validate_k(k, n)?;
    let mut available: Vec<usize> = (0..n).collect();
    let mut picked = Vec::with_capacity(k);
    let mut warned = false;
    for _ in 0..k {
        let total: f64 = available.iter().map(|&i| weights[i]).sum();
        let choice_pos = if total <= 0.0 {
            if !warned {
                log::warn!("{label}: remaining weights sum to zero; falling back to uniform");
                warned = true;
            }
            rng.gen_range(0..available.len())
        } else {
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pos = available.len() - 1; // cumulative rounding lands on the last frame
            for (p, &i) in available.iter().enumerate() {
                acc += weights[i];
                if u < acc {
                    pos = p;
                    break;
                }
            }
            pos
        };
        picked.push(available.remove(choice_pos));
    }
    Ok(picked)
}

/// Samples an ordered K-subset from the policy's scores and records its
/// log-probability.
pub fn sample_subset(scores: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Selection> {
    validate_scores(scores)?;
    let ordered = weighted_draw_without_replacement(scores, k, rng, "policy sample")?;
    let log_prob = selection_log_prob(scores, &ordered)?;
    Ok(Selection {
        ordered_indices: ordered,
        log_prob: Some(log_prob),
        kind: SelectionKind::Sampled,
    })
}

/// Log-probability of drawing `ordered` (in that order) by sequential
/// sampling without replacement from `scores`.
///
/// With normalized weights w_i = σ_i / Σσ, the probability of step t is
/// w_{i_t} / (1 − Σ_{u<t} w_{i_u}); both the weight and the residual are
/// floored at 1e-12 before the logarithm so degenerate scores stay finite.
pub fn selection_log_prob(scores: &[f64], ordered: &[usize]) -> Result<f64> {
    validate_scores(scores)?;
    let n = scores.len();
    if ordered.is_empty() || ordered.len() > n {
        return Err(Error::Input(format!(
            "ordered selection of {} positions invalid for pool of {n}",
            ordered.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in ordered {
        if i >= n {
            return Err(Error::Input(format!("selection index {i} outside pool of {n}")));
        }
        if seen[i] {
            return Err(Error::Input(format!("duplicate selection index {i}")));
        }
        seen[i] = true;
    }

    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        // Matches the uniform fallback in sampling.
        return Ok(ordered
            .iter()
            .enumerate()
            .map(|(t, _)| -((n - t) as f64).ln())
            .sum());
    }
    let mut log_p = 0.0;
    let mut drawn_mass = 0.0; // Σ_{u<t} w_{i_u}
    for &i in ordered {
        let w = scores[i] / total;
        let residual: f64 = 1.0 - drawn_mass;
        log_p += w.max(PROB_FLOOR).ln() - residual.max(PROB_FLOOR).ln();
        drawn_mass += w;
    }
    Ok(log_p)
}

/// The counterfactual selection weights: π̃ ∝ 1 − σ, normalized. If every
/// score is exactly 1 the inversion is all-zero; that degenerates to the
/// uniform distribution, with a warning.
pub fn invert_policy(scores: &[f64]) -> Result<Vec<f64>> {
    validate_scores(scores)?;
    let inverted: Vec<f64> = scores.iter().map(|&s| 1.0 - s).collect();
    let total: f64 = inverted.iter().sum();
    if total <= 0.0 {
        log::warn!("all scores are 1.0; counterfactual distribution degenerates to uniform");
        let n = scores.len() as f64;
        return Ok(vec![1.0 / n; scores.len()]);
    }
    Ok(inverted.iter().map(|v| v / total).collect())
}

/// Samples the counterfactual K-subset: sequential draws without
/// replacement proportional to 1 − σ. Same cardinality as the factual
/// selection; log-probability is recorded under the inverted weights.
pub fn sample_counterfactual(scores: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Selection> {
    let weights = invert_policy(scores)?;
    let ordered = weighted_draw_without_replacement(&weights, k, rng, "counterfactual sample")?;
    let log_prob = selection_log_prob(&weights, &ordered)?;
    Ok(Selection {
        ordered_indices: ordered,
        log_prob: Some(log_prob),
        kind: SelectionKind::Counterfactual,
    })
}

/// Deterministic top-K by score, ties broken toward the earlier frame,
/// returned in temporal order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Selection> {
    validate_scores(scores)?;
    validate_k(k, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort by descending score keeps earlier frames first on ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(Selection {
        ordered_indices: chosen,
        log_prob: None,
        kind: SelectionKind::TopK,
    })
}
