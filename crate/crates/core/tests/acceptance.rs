//! End-to-end verification battery.
//!
//! Ten numbered criteria cover the whole pipeline: exact policy gradients,
//! sampler fidelity, counterfactual inversion, reward primitives, estimator
//! unbiasedness, end-to-end learning on the planted causal task, reward
//! ablation ordering, byte-level determinism, exhaustive-search agreement,
//! and HTTP oracle conformance. One line is printed per criterion
//! (`cargo test -p framepick-core --test acceptance -- --nocapture` to watch
//! them live); the test fails if any criterion fails.
//!
//! Criteria 6, 7, and 9 retrain policies from scratch and dominate the
//! runtime — the full battery takes roughly fifteen minutes on one desktop
//! core. While debugging, `ACCEPTANCE_ONLY=1,4,10` (comma-separated
//! criterion numbers) runs a subset; the unfiltered run is authoritative.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::json;
use tempfile::TempDir;

use framepick_core::checkpoint::load_checkpoint;
use framepick_core::env::{brute_force_subset_table, QuestionInstance, SyntheticSpec};
use framepick_core::oracle::stub::{StubResponse, StubServer};
use framepick_core::oracle::{
    FrameRef, HttpOracle, HttpOracleConfig, Oracle, OracleError, OracleRequest, OracleRequestKind,
};
use framepick_core::policy::{grad_log_prob_from, init_policy, policy_forward, PolicyParams};
use framepick_core::rewards::{
    composite_reward, compute_advantages, counterfactual_reward, cycle_reward,
};
use framepick_core::rng::{gauss, substream, Stream};
use framepick_core::sampling::{invert_policy, sample_subset, selection_log_prob, top_k};
use framepick_core::trainer::{
    episode_pool, evaluate, heldout_instances, train, Baseline, OracleKind, SyntheticEnvConfig,
    TrainConfig,
};

type CheckResult = Result<String, String>;

#[test]
fn acceptance() {
    let checks: &[(&str, fn() -> CheckResult)] = &[
        ("log-prob gradient matches finite differences", criterion_1),
        ("sampler matches analytic subset probabilities", criterion_2),
        ("counterfactual score inversion", criterion_3),
        ("reward primitives", criterion_4),
        ("policy-gradient estimator is unbiased", criterion_5),
        ("policy learns the planted causal task", criterion_6),
        ("reward ablation ordering", criterion_7),
        ("byte-identical reruns and checkpoint resume", criterion_8),
        ("converged policy agrees with exhaustive search", criterion_9),
        ("HTTP oracle conformance against the stub server", criterion_10),
    ];

    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| {
        s.split(',')
            .filter_map(|t| t.trim().parse().ok())
            .collect()
    });

    let mut failures = Vec::new();
    for (idx, (name, check)) in checks.iter().enumerate() {
        let number = idx + 1;
        if let Some(subset) = &only {
            if !subset.contains(&number) {
                continue;
            }
        }
        match check() {
            Ok(detail) => println!("criterion {number} ({name}): PASS — {detail}"),
            Err(detail) => {
                println!("criterion {number} ({name}): FAIL — {detail}");
                failures.push(format!("criterion {number} ({name}): {detail}"));
            }
        }
    }
    if only.is_some() {
        println!("note: ACCEPTANCE_ONLY is set; this was a partial run");
    }
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

// ---------------------------------------------------------------------------
// Criterion 1: exact gradient vs central finite differences.
// ---------------------------------------------------------------------------

/// D=8, H=16, |pool|=6, K=2, 20 seeded cases: the analytic ∇ log π from
/// backpropagation must match central finite differences (ε = 1e-5) within
/// vector relative error 1e-4, in under 10 seconds.
fn criterion_1() -> CheckResult {
    const EPS: f64 = 1e-5;
    let (d, h, n, k) = (8usize, 16usize, 6usize, 2usize);
    let start = Instant::now();
    let mut worst = 0.0f64;

    for case in 0..20u64 {
        let params = init_policy(d, h, 9_000 + case).map_err(|e| e.to_string())?;
        let mut rng = substream(41, Stream::PolicySample, &[case]);
        let frames: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| gauss(&mut rng)).collect())
            .collect();
        let question: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();

        let out = policy_forward(&params, &refs, &question).map_err(|e| e.to_string())?;
        let sel = sample_subset(&out.scores, k, &mut rng).map_err(|e| e.to_string())?;
        let analytic = grad_log_prob_from(&params, &out, &sel.ordered_indices)
            .map_err(|e| e.to_string())?;

        let log_prob_at = |p: &PolicyParams| -> Result<f64, String> {
            let o = policy_forward(p, &refs, &question).map_err(|e| e.to_string())?;
            selection_log_prob(&o.scores, &sel.ordered_indices).map_err(|e| e.to_string())
        };

        let mut perturbed = params.clone();
        let mut err_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        for j in 0..perturbed.len() {
            let origin = perturbed.theta[j];
            perturbed.theta[j] = origin + EPS;
            let plus = log_prob_at(&perturbed)?;
            perturbed.theta[j] = origin - EPS;
            let minus = log_prob_at(&perturbed)?;
            perturbed.theta[j] = origin;
            let fd = (plus - minus) / (2.0 * EPS);
            err_sq += (fd - analytic.theta[j]).powi(2);
            fd_sq += fd * fd;
        }
        let rel = (err_sq / fd_sq.max(f64::MIN_POSITIVE)).sqrt();
        worst = worst.max(rel);
        if rel > 1e-4 {
            return Err(format!("case {case}: relative error {rel:.3e} exceeds 1e-4"));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("took {secs:.1}s, pinned to < 10s"));
    }
    Ok(format!("worst relative error {worst:.2e} in {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// Criterion 2: sampler fidelity.
// ---------------------------------------------------------------------------

/// All ordered K-draws from `scores` with their sequential
/// without-replacement probabilities, exact arithmetic over the raw scores.
fn enumerate_ordered(scores: &[f64], k: usize) -> Vec<(Vec<usize>, f64)> {
    fn recurse(
        scores: &[f64],
        k: usize,
        prefix: &mut Vec<usize>,
        used: &mut Vec<bool>,
        prob: f64,
        total: f64,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if prefix.len() == k {
            out.push((prefix.clone(), prob));
            return;
        }
        for i in 0..scores.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            prefix.push(i);
            recurse(
                scores,
                k,
                prefix,
                used,
                prob * scores[i] / total,
                total - scores[i],
                out,
            );
            prefix.pop();
            used[i] = false;
        }
    }
    let mut out = Vec::new();
    let total: f64 = scores.iter().sum();
    recurse(
        scores,
        k,
        &mut Vec::new(),
        &mut vec![false; scores.len()],
        1.0,
        total,
        &mut out,
    );
    out
}

/// Empirical ordered-pair frequencies over 200k draws from [0.4,0.3,0.2,0.1]
/// at K=2 must sit within 3 standard errors of the analytic probabilities
/// (e.g. P((0,1)) = 0.2), and exp(selection_log_prob) must equal the analytic
/// probability to 1e-9 on every enumerable case with |pool| ≤ 5.
fn criterion_2() -> CheckResult {
    let weights = [0.4, 0.3, 0.2, 0.1];
    let k = 2;
    let draws = 200_000usize;

    let mut counts = std::collections::HashMap::<Vec<usize>, usize>::new();
    let mut rng = substream(42, Stream::PolicySample, &[0]);
    for _ in 0..draws {
        let sel = sample_subset(&weights, k, &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(sel.ordered_indices).or_insert(0) += 1;
    }

    let analytic = enumerate_ordered(&weights, k);
    let p01 = analytic
        .iter()
        .find(|(t, _)| t == &vec![0, 1])
        .map(|(_, p)| *p)
        .unwrap();
    if (p01 - 0.2).abs() > 1e-12 {
        return Err(format!("analytic P((0,1)) = {p01}, expected 0.2"));
    }
    let mut worst_z = 0.0f64;
    for (tuple, p) in &analytic {
        let empirical = *counts.get(tuple).unwrap_or(&0) as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let z = (empirical - p).abs() / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            return Err(format!(
                "ordered pair {tuple:?}: empirical {empirical:.5} vs analytic {p:.5} is {z:.2} SE"
            ));
        }
    }

    // Exhaustive log-prob agreement on every pool size up to 5.
    let mut cases = 0usize;
    let mut worst_gap = 0.0f64;
    for n in 1..=5usize {
        for rep in 0..3u64 {
            let mut srng = substream(43, Stream::PolicySample, &[n as u64, rep]);
            let scores: Vec<f64> = (0..n).map(|_| srng.gen_range(0.05..1.0)).collect();
            for kk in 1..=n {
                let mut mass = 0.0;
                for (tuple, p) in enumerate_ordered(&scores, kk) {
                    let lp = selection_log_prob(&scores, &tuple).map_err(|e| e.to_string())?;
                    let gap = (lp.exp() - p).abs();
                    worst_gap = worst_gap.max(gap);
                    if gap > 1e-9 {
                        return Err(format!(
                            "n={n} K={kk} tuple {tuple:?}: exp(log_prob) off by {gap:.2e}"
                        ));
                    }
                    mass += p;
                    cases += 1;
                }
                if (mass - 1.0).abs() > 1e-9 {
                    return Err(format!("n={n} K={kk}: enumeration mass {mass} != 1"));
                }
            }
        }
    }

    Ok(format!(
        "worst draw deviation {worst_z:.2} SE over {draws} draws; \
         {cases} enumerated log-probs within {worst_gap:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3: counterfactual score inversion.
// ---------------------------------------------------------------------------

/// Pinned inversion cases ([0.8,0.1,0.1] → [0.1,0.45,0.45], uniform →
/// uniform, [1,0] → [0,1]) plus sum-to-one on 1000 random score vectors.
fn criterion_3() -> CheckResult {
    let close = |a: &[f64], b: &[f64], tol: f64| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    };

    let skewed = invert_policy(&[0.8, 0.1, 0.1]).map_err(|e| e.to_string())?;
    if !close(&skewed, &[0.1, 0.45, 0.45], 1e-12) {
        return Err(format!("[0.8,0.1,0.1] inverted to {skewed:?}"));
    }
    let third = 1.0 / 3.0;
    let uniform = invert_policy(&[third, third, third]).map_err(|e| e.to_string())?;
    if !close(&uniform, &[third, third, third], 1e-12) {
        return Err(format!("uniform inverted to {uniform:?}"));
    }
    let onehot = invert_policy(&[1.0, 0.0]).map_err(|e| e.to_string())?;
    if !close(&onehot, &[0.0, 1.0], 1e-9) {
        return Err(format!("[1,0] inverted to {onehot:?}"));
    }

    let mut rng = substream(44, Stream::CounterfactualSample, &[0]);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.gen_range(2..=16usize);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let inverted = invert_policy(&scores).map_err(|e| format!("case {case}: {e}"))?;
        let sum: f64 = inverted.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("case {case}: inverted sum {sum} off by > 1e-9"));
        }
    }
    Ok(format!(
        "pinned cases exact; worst sum deviation {worst:.2e} over 1000 vectors"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4: reward primitives.
// ---------------------------------------------------------------------------

/// KL identity and reference value, IoU cases, composite weighting, and
/// mean-centered advantages.
fn criterion_4() -> CheckResult {
    let identity =
        counterfactual_reward(&[2.0f64.ln(), 0.0], &[2.0f64.ln(), 0.0]).map_err(|e| e.to_string())?;
    if identity != 0.0 {
        return Err(format!("KL between identical logits is {identity}, not 0"));
    }

    // Two options at logits [ln 2, 0] vs [0, 0]: softmaxes are [2/3, 1/3]
    // and [1/2, 1/2], KL = (2/3)ln(4/3) + (1/3)ln(2/3) ≈ 0.0566330.
    let reference = counterfactual_reward(&[2.0f64.ln(), 0.0], &[0.0, 0.0])
        .map_err(|e| e.to_string())?;
    if (reference - 0.05663).abs() > 1e-5 {
        return Err(format!("reference KL {reference:.7} not within 1e-5 of 0.05663"));
    }

    let as_strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let iou_cases = [
        (vec!["cup", "tray"], vec!["cup", "tray"], 1.0),
        (vec!["cup"], vec!["cup", "tray"], 0.5),
        (vec!["cup", "tray"], vec!["door"], 0.0),
    ];
    for (qe, ae, expected) in iou_cases {
        let got = cycle_reward(&as_strings(&qe), &as_strings(&ae));
        if (got - expected).abs() > 1e-12 {
            return Err(format!("IoU({qe:?}, {ae:?}) = {got}, expected {expected}"));
        }
    }

    let composite =
        composite_reward(1.0, 0.5, 0.2, 0.5, 0.5, None).map_err(|e| e.to_string())?;
    if (composite.total - 1.35).abs() > 1e-12 {
        return Err(format!("composite total {} != 1.35", composite.total));
    }

    let adv = compute_advantages(&[1.0, 0.5, 0.5, 0.0]).map_err(|e| e.to_string())?;
    let expected = [0.5, 0.0, 0.0, -0.5];
    if adv
        .iter()
        .zip(&expected)
        .any(|(a, e)| (a - e).abs() > 1e-12)
    {
        return Err(format!("advantages {adv:?} != {expected:?}"));
    }
    let mut rng = substream(45, Stream::PolicySample, &[4]);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let g = rng.gen_range(2..=8usize);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sum: f64 = compute_advantages(&rewards)
            .map_err(|e| format!("case {case}: {e}"))?
            .iter()
            .sum();
        worst = worst.max(sum.abs());
        if sum.abs() > 1e-12 {
            return Err(format!("case {case}: advantage sum {sum:.2e} exceeds 1e-12"));
        }
    }
    Ok(format!(
        "KL, IoU, composite, and advantage cases exact; worst advantage sum {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5: estimator unbiasedness at enumeration scale.
// ---------------------------------------------------------------------------

/// |pool| = 3, K = 1 toy: with per-frame rewards, the exact gradient of
/// E[R] enumerates as Σ_i R_i P_i ∇log π(i). Over 1e5 rollouts, (a) the
/// plain score-function estimate R·∇log π must match that exact gradient
/// and (b) the group-of-4 mean-centered estimate must match (G−1)/G times
/// it — each within 3 standard errors in the whole-vector sense
/// (‖mean − target‖² ≤ 9·Σ_j Var_j/N). Runtime < 1 min.
fn criterion_5() -> CheckResult {
    let start = Instant::now();
    let (d, h, n) = (4usize, 8usize, 3usize);
    let rewards = [1.0, 0.3, 0.1];

    let params = init_policy(d, h, 77).map_err(|e| e.to_string())?;
    let mut rng = substream(46, Stream::PolicySample, &[5]);
    let frames: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| gauss(&mut rng)).collect())
        .collect();
    let question: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
    let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
    let out = policy_forward(&params, &refs, &question).map_err(|e| e.to_string())?;

    let total: f64 = out.scores.iter().sum();
    let probs: Vec<f64> = out.scores.iter().map(|s| s / total).collect();
    let grads: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            grad_log_prob_from(&params, &out, &[i])
                .map(|g| g.theta)
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let dim = grads[0].len();

    let mut exact = vec![0.0; dim];
    for i in 0..n {
        for j in 0..dim {
            exact[j] += rewards[i] * probs[i] * grads[i][j];
        }
    }

    // Single-sample score-function estimator: only 3 outcomes exist, so the
    // sample mean and per-coordinate variance follow from draw counts.
    let draws = 100_000usize;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let sel = sample_subset(&out.scores, 1, &mut rng).map_err(|e| e.to_string())?;
        counts[sel.ordered_indices[0]] += 1;
    }
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for i in 0..n {
        let w = counts[i] as f64 / draws as f64;
        for j in 0..dim {
            let x = rewards[i] * grads[i][j];
            mean[j] += w * x;
            second[j] += w * x * x;
        }
    }
    let var_sum: f64 = (0..dim).map(|j| second[j] - mean[j] * mean[j]).sum();
    let err_sq: f64 = (0..dim).map(|j| (mean[j] - exact[j]).powi(2)).sum();
    let bound = 9.0 * var_sum / draws as f64;
    if err_sq > bound {
        return Err(format!(
            "single-sample estimator: ‖mean − exact‖² = {err_sq:.3e} exceeds 3σ bound {bound:.3e}"
        ));
    }
    let single_sigmas = (err_sq / (var_sum / draws as f64)).sqrt();

    // Group estimator with mean-centered advantages. Each member's advantage
    // subtracts a group mean that includes its own reward, which shrinks the
    // expectation to (G−1)/G times the exact gradient — the acceptance target
    // is that scaled vector, not the raw one.
    let g_size = 4usize;
    let groups = 25_000usize;
    let mut gmean = vec![0.0; dim];
    let mut gsecond = vec![0.0; dim];
    let mut member_rewards = vec![0.0; g_size];
    let mut member_index = vec![0usize; g_size];
    for _ in 0..groups {
        for m in 0..g_size {
            let sel = sample_subset(&out.scores, 1, &mut rng).map_err(|e| e.to_string())?;
            member_index[m] = sel.ordered_indices[0];
            member_rewards[m] = rewards[member_index[m]];
        }
        let adv = compute_advantages(&member_rewards).map_err(|e| e.to_string())?;
        let mut sample = vec![0.0; dim];
        for m in 0..g_size {
            let gi = &grads[member_index[m]];
            for j in 0..dim {
                sample[j] += adv[m] * gi[j] / g_size as f64;
            }
        }
        for j in 0..dim {
            gmean[j] += sample[j];
            gsecond[j] += sample[j] * sample[j];
        }
    }
    for j in 0..dim {
        gmean[j] /= groups as f64;
        gsecond[j] /= groups as f64;
    }
    let scale = (g_size as f64 - 1.0) / g_size as f64;
    let gvar_sum: f64 = (0..dim).map(|j| gsecond[j] - gmean[j] * gmean[j]).sum();
    let gerr_sq: f64 = (0..dim)
        .map(|j| (gmean[j] - scale * exact[j]).powi(2))
        .sum();
    let gbound = 9.0 * gvar_sum / groups as f64;
    if gerr_sq > gbound {
        return Err(format!(
            "group estimator: ‖mean − (G−1)/G·exact‖² = {gerr_sq:.3e} exceeds 3σ bound {gbound:.3e}"
        ));
    }
    let group_sigmas = (gerr_sq / (gvar_sum / groups as f64)).sqrt();

    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s, pinned to < 1 min"));
    }
    Ok(format!(
        "single-sample at {single_sigmas:.2}σ, group at {group_sigmas:.2}σ of their targets in {secs:.1}s"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end learning on the planted causal task.
// ---------------------------------------------------------------------------

fn synthetic_config(spec: SyntheticSpec, train_n: usize, eval_n: usize) -> TrainConfig {
    TrainConfig {
        master_seed: 0,
        epochs: 1,
        pool_size: spec.pool_target,
        select_k: 4,
        group_size: 4,
        lambda1: 0.5,
        lambda2: 0.5,
        learning_rate: 1e-4,
        hidden: 224,
        detection_threshold: 0.0,
        r_cf_cap: None,
        checkpoint_every: 0,
        max_episodes: None,
        oracle: OracleKind::Synthetic,
        synthetic: Some(SyntheticEnvConfig {
            spec,
            train_instances: train_n,
            eval_instances: eval_n,
        }),
        dataset: None,
        http_oracle: None,
    }
}

fn run_training(cfg: &TrainConfig) -> Result<(PolicyParams, Vec<framepick_core::env::Episode>), String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let report = train(cfg, dir.path(), None).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&report.final_checkpoint).map_err(|e| e.to_string())?;
    let held = heldout_instances(cfg, None).map_err(|e| e.to_string())?;
    Ok((ck.params, held))
}

fn recall_of(
    params: &PolicyParams,
    cfg: &TrainConfig,
    baseline: Baseline,
    held: &[framepick_core::env::Episode],
) -> Result<f64, String> {
    let report = evaluate(params, cfg, baseline, held).map_err(|e| e.to_string())?;
    report
        .necessary_recall
        .ok_or_else(|| "evaluation returned no recall".into())
}

/// Default 16-frame environment, M=16, K=4, c=3, five distractors; G=4,
/// λ1=λ2=0.5, lr=1e-4, 400 instances × 3 epochs. Mean top-K recall on 200
/// held-out instances over training seeds 0,1,2 must reach 0.9; the uniform
/// baseline must sit at its hypergeometric K/M = 0.25; the visual baseline
/// must trail the policy. Under 10 minutes of wall clock.
fn criterion_6() -> CheckResult {
    let start = Instant::now();
    let mut policy_recalls = Vec::new();
    let mut uniform_recalls = Vec::new();
    let mut visual_recalls = Vec::new();

    for seed in 0..3u64 {
        let mut cfg = synthetic_config(SyntheticSpec::default(), 400, 200);
        cfg.epochs = 3;
        cfg.master_seed = seed;
        let (params, held) = run_training(&cfg)?;
        policy_recalls.push(recall_of(&params, &cfg, Baseline::Policy, &held)?);
        uniform_recalls.push(recall_of(&params, &cfg, Baseline::Uniform, &held)?);
        visual_recalls.push(recall_of(&params, &cfg, Baseline::Visual, &held)?);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (policy, uniform, visual) = (
        mean(&policy_recalls),
        mean(&uniform_recalls),
        mean(&visual_recalls),
    );
    let secs = start.elapsed().as_secs_f64();

    if policy < 0.9 {
        return Err(format!(
            "mean policy recall {policy:.3} < 0.9 (per seed: {policy_recalls:?})"
        ));
    }
    if (uniform - 0.25).abs() > 0.05 {
        return Err(format!("uniform recall {uniform:.3} not ≈ 0.25"));
    }
    if visual >= policy {
        return Err(format!("visual recall {visual:.3} not below policy {policy:.3}"));
    }
    if secs >= 600.0 {
        return Err(format!("took {secs:.0}s, pinned to < 10 min"));
    }
    Ok(format!(
        "recall policy {policy:.3} / uniform {uniform:.3} / visual {visual:.3} over 3 seeds in {secs:.0}s"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 7: reward ablation ordering.
// ---------------------------------------------------------------------------

/// One-sided paired t statistic for mean(a − b) > 0; `None` when the
/// difference has zero sample variance.
fn paired_t(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return None;
    }
    Some(mean / (var / n).sqrt())
}

/// Distractor-heavy environment (8 of 16 frames are traps): held-out recall
/// ordering over 5 training seeds must be full (answer + cycle +
/// counterfactual) ≥ answer + cycle ≥ answer alone, with the full reward
/// strictly best under a one-sided paired t-test at the 0.05 level
/// (t > 2.1318, 4 degrees of freedom).
fn criterion_7() -> CheckResult {
    const T_CRIT: f64 = 2.1318; // one-sided 0.05 quantile, df = 4
    let tiers = [(0.5, 0.5), (0.5, 0.0), (0.0, 0.0)];
    let mut recalls = vec![Vec::new(), Vec::new(), Vec::new()];

    for seed in 0..5u64 {
        for (t, &(lambda1, lambda2)) in tiers.iter().enumerate() {
            let spec = SyntheticSpec {
                distractor_count: 8,
                ..SyntheticSpec::default()
            };
            let mut cfg = synthetic_config(spec, 300, 150);
            cfg.master_seed = seed;
            cfg.lambda1 = lambda1;
            cfg.lambda2 = lambda2;
            let (params, held) = run_training(&cfg)?;
            recalls[t].push(recall_of(&params, &cfg, Baseline::Policy, &held)?);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (full, mid, ans) = (mean(&recalls[0]), mean(&recalls[1]), mean(&recalls[2]));
    if !(full >= mid && mid >= ans) {
        return Err(format!(
            "mean recall ordering violated: full {full:.3}, +cycle {mid:.3}, answer-only {ans:.3}"
        ));
    }
    if full <= mid || full <= ans {
        return Err(format!(
            "full reward not strictly best: full {full:.3}, +cycle {mid:.3}, answer-only {ans:.3}"
        ));
    }
    // Strict superiority must also clear the paired test against both
    // reduced tiers; a zero-variance difference passes iff its mean does.
    let mut ts = Vec::new();
    for (other, label) in [(&recalls[1], "+cycle"), (&recalls[2], "answer-only")] {
        match paired_t(&recalls[0], other) {
            Some(t) => {
                if t <= T_CRIT {
                    return Err(format!(
                        "paired t vs {label} = {t:.3} does not exceed {T_CRIT}"
                    ));
                }
                ts.push(t);
            }
            None => {
                let d = full - mean(other);
                if d <= 0.0 {
                    return Err(format!("zero-variance tie against {label}"));
                }
            }
        }
    }
    Ok(format!(
        "mean recall full {full:.3} > +cycle {mid:.3} ≥ answer-only {ans:.3}; paired t {ts:.3?}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism and checkpoint resume.
// ---------------------------------------------------------------------------

fn file_bytes(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn assert_same_file(a: &Path, b: &Path) -> Result<(), String> {
    let (ba, bb) = (file_bytes(a)?, file_bytes(b)?);
    if ba != bb {
        let pos = ba
            .iter()
            .zip(&bb)
            .position(|(x, y)| x != y)
            .unwrap_or(ba.len().min(bb.len()));
        let lo = pos.saturating_sub(80);
        let snippet = |bytes: &[u8]| {
            String::from_utf8_lossy(&bytes[lo.min(bytes.len())..(pos + 80).min(bytes.len())])
                .into_owned()
        };
        return Err(format!(
            "{} and {} differ at byte {pos}: ...{}... vs ...{}...",
            a.display(),
            b.display(),
            snippet(&ba),
            snippet(&bb)
        ));
    }
    Ok(())
}

/// Two runs from one configuration must produce byte-identical episode logs
/// and checkpoints, and a run capped partway then resumed from its final
/// checkpoint must continue the identical byte stream.
fn criterion_8() -> CheckResult {
    let mut cfg = synthetic_config(SyntheticSpec::default(), 30, 5);
    cfg.master_seed = 7;
    cfg.hidden = 32;
    cfg.checkpoint_every = 10;

    let dir_a = TempDir::new().map_err(|e| e.to_string())?;
    let dir_b = TempDir::new().map_err(|e| e.to_string())?;
    let report_a = train(&cfg, dir_a.path(), None).map_err(|e| e.to_string())?;
    let report_b = train(&cfg, dir_b.path(), None).map_err(|e| e.to_string())?;

    assert_same_file(&report_a.log_path, &report_b.log_path)
        .map_err(|e| format!("rerun log: {e}"))?;
    assert_same_file(&report_a.final_checkpoint, &report_b.final_checkpoint)
        .map_err(|e| format!("rerun final checkpoint: {e}"))?;
    for name in ["ckpt-00000010.bin", "ckpt-00000020.bin", "ckpt-00000030.bin"] {
        assert_same_file(
            &dir_a.path().join("checkpoints").join(name),
            &dir_b.path().join("checkpoints").join(name),
        )
        .map_err(|e| format!("rerun {name}: {e}"))?;
    }

    // Staged run: stop at episode 12, then resume to completion in the same
    // directory. The concatenated log and the final checkpoint must equal
    // the uncapped run's bytes.
    let dir_c = TempDir::new().map_err(|e| e.to_string())?;
    let mut capped = cfg.clone();
    capped.max_episodes = Some(12);
    let report_c1 = train(&capped, dir_c.path(), None).map_err(|e| e.to_string())?;
    if report_c1.episodes != 12 {
        return Err(format!("capped run did {} episodes, wanted 12", report_c1.episodes));
    }
    let report_c2 = train(&cfg, dir_c.path(), Some(&report_c1.final_checkpoint))
        .map_err(|e| e.to_string())?;
    if report_c2.episodes != 30 {
        return Err(format!("resumed run ended at {}, wanted 30", report_c2.episodes));
    }
    if report_c1.config_hash != report_c2.config_hash {
        return Err("episode cap changed the configuration hash".into());
    }
    assert_same_file(&report_a.log_path, &report_c2.log_path)
        .map_err(|e| format!("resumed log: {e}"))?;
    assert_same_file(&report_a.final_checkpoint, &report_c2.final_checkpoint)
        .map_err(|e| format!("resumed final checkpoint: {e}"))?;
    assert_same_file(
        &dir_a.path().join("checkpoints/ckpt-00000020.bin"),
        &dir_c.path().join("checkpoints/ckpt-00000020.bin"),
    )
    .map_err(|e| format!("resumed ckpt-00000020.bin: {e}"))?;

    Ok("rerun and capped-then-resumed runs are byte-identical".into())
}

// ---------------------------------------------------------------------------
// Criterion 9: agreement with exhaustive subset search.
// ---------------------------------------------------------------------------

/// Six-frame episodes with a two-frame causal chain, K=2: after training,
/// the policy's deterministic top-2 must equal the top row of the
/// exhaustive subset table on at least 95% of 50 held-out instances.
fn criterion_9() -> CheckResult {
    let spec = SyntheticSpec {
        total_frames: 6,
        pool_target: 6,
        necessary_count: 2,
        distractor_count: 2,
        ..SyntheticSpec::default()
    };
    let mut cfg = synthetic_config(spec.clone(), 400, 50);
    cfg.select_k = 2;

    let (params, held) = run_training(&cfg)?;
    let mut agree = 0usize;
    for instance in &held {
        let (_, pool) = episode_pool(&cfg, instance).map_err(|e| e.to_string())?;
        let out = policy_forward(&params, &pool.features(), &instance.question.feature)
            .map_err(|e| e.to_string())?;
        let chosen = top_k(&out.scores, 2).map_err(|e| e.to_string())?;
        let mut picked = pool.frame_indices(&chosen.ordered_indices);
        picked.sort_unstable();

        let all_positions: Vec<usize> = (0..pool.len()).collect();
        let pool_frames = pool.frame_indices(&all_positions);
        let gt = instance
            .ground_truth
            .as_ref()
            .ok_or("synthetic instance lacks ground truth")?;
        let table = brute_force_subset_table(&pool_frames, gt, &instance.question, &spec, 2)
            .map_err(|e| e.to_string())?;
        if table[0].subset == picked {
            agree += 1;
        }
    }
    if agree < 48 {
        return Err(format!("top-2 matched the exhaustive optimum on {agree}/50 < 48/50"));
    }
    Ok(format!("top-2 matched the exhaustive optimum on {agree}/50 instances"))
}

// ---------------------------------------------------------------------------
// Criterion 10: HTTP oracle conformance.
// ---------------------------------------------------------------------------

fn http_config(url: String) -> HttpOracleConfig {
    HttpOracleConfig {
        endpoint: url,
        model: "vlm-test".into(),
        api_token: Some("sk-test".into()),
        timeout_ms: 5_000,
        max_retries: 2,
        max_in_flight: 4,
        min_interval_ms: 0,
        prompt_dir: None,
    }
}

fn sample_question() -> QuestionInstance {
    QuestionInstance {
        text: "what tool opens the box".into(),
        options: vec!["knife".into(), "crowbar".into(), "key".into()],
        correct_index: 1,
        feature: vec![0.0; 4],
    }
}

fn sample_frames() -> Vec<FrameRef> {
    vec![
        FrameRef {
            index: 3,
            image_base64: Some("QUJD".into()),
        },
        FrameRef {
            index: 7,
            image_base64: None,
        },
    ]
}

/// Round-trips all four request kinds against the bundled stub server and
/// pins the wire format, logprob extraction, the one-hot fallback flag, and
/// the timeout/retry/status/precondition error contract.
fn criterion_10() -> CheckResult {
    // --- Round-trips and wire shape -------------------------------------
    let completion = json!({
        "choices": [{
            "message": { "content": "B" },
            "logprobs": { "content": [{
                "token": "B", "logprob": -0.2,
                "top_logprobs": [
                    { "token": "A", "logprob": -2.0 },
                    { "token": "B", "logprob": -0.2 },
                    { "token": "C", "logprob": -3.0 }
                ]
            }]}
        }]
    });
    let stub = StubServer::with_fixed_json(completion);
    let oracle = HttpOracle::new(http_config(stub.url())).map_err(|e| e.to_string())?;

    let answer = oracle
        .call(&OracleRequest::with_frames(
            OracleRequestKind::Answer,
            sample_question(),
            sample_frames(),
        ))
        .map_err(|e| format!("answer round-trip: {e}"))?;
    if answer.text.as_deref() != Some("B") || answer.logits.is_some() {
        return Err(format!("answer reply malformed: {answer:?}"));
    }

    let logits_reply = oracle
        .call(&OracleRequest::with_frames(
            OracleRequestKind::Logits,
            sample_question(),
            sample_frames(),
        ))
        .map_err(|e| format!("logits round-trip: {e}"))?;
    let logits = logits_reply
        .logits
        .as_ref()
        .ok_or("logits reply carried no logits")?;
    if logits_reply.approximate_logits {
        return Err("complete letter coverage still flagged approximate".into());
    }
    // Log-softmax of the raw letter logprobs [-2.0, -0.2, -3.0].
    let raw = [-2.0f64, -0.2, -3.0];
    let log_z = raw.iter().map(|l| l.exp()).sum::<f64>().ln();
    for (i, (&got, &r)) in logits.iter().zip(&raw).enumerate() {
        if (got - (r - log_z)).abs() > 1e-12 {
            return Err(format!("option {i} logit {got} != renormalized {}", r - log_z));
        }
    }
    let mass: f64 = logits.iter().map(|l| l.exp()).sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(format!("extracted logprobs are unnormalized (mass {mass})"));
    }

    oracle
        .call(&OracleRequest::with_frames(
            OracleRequestKind::ElementsFromQuestion,
            sample_question(),
            sample_frames(),
        ))
        .map_err(|e| format!("question-elements round-trip: {e}"))?;
    oracle
        .call(&OracleRequest::elements_from_answer(
            sample_question(),
            "the crowbar opens it".into(),
        ))
        .map_err(|e| format!("answer-elements round-trip: {e}"))?;

    let requests = stub.requests();
    if requests.len() != 4 {
        return Err(format!("expected 4 requests, stub saw {}", requests.len()));
    }
    for req in &requests {
        if req.header("authorization") != Some("Bearer sk-test") {
            return Err(format!("request {} lacks the bearer token", req.ordinal));
        }
        if req.body["model"] != json!("vlm-test") {
            return Err(format!("request {} carries wrong model", req.ordinal));
        }
        if req.body["messages"][0]["content"][0]["type"] != json!("text") {
            return Err(format!("request {} lacks a leading text part", req.ordinal));
        }
    }
    let answer_parts = requests[0].body["messages"][0]["content"]
        .as_array()
        .map(|a| a.len())
        .unwrap_or(0);
    if answer_parts != 2 {
        return Err(format!(
            "answer request should carry prompt + 1 image part, got {answer_parts}"
        ));
    }
    if requests[0].body["messages"][0]["content"][1]["image_url"]["url"]
        != json!("data:image/jpeg;base64,QUJD")
    {
        return Err("image payload not wrapped as a data URL".into());
    }
    if requests[1].body["logprobs"] != json!(true) || requests[1].body["top_logprobs"] != json!(20)
    {
        return Err("logits request does not ask for logprobs".into());
    }
    if requests[3].body["messages"][0]["content"]
        .as_array()
        .map(|a| a.len())
        != Some(1)
    {
        return Err("text-only answer dissection still attached frames".into());
    }
    drop(stub);

    // --- One-hot fallback ------------------------------------------------
    let stub = StubServer::with_fixed_json(json!({
        "choices": [{ "message": { "content": "the answer is C" } }]
    }));
    let oracle = HttpOracle::new(http_config(stub.url())).map_err(|e| e.to_string())?;
    let fallback = oracle
        .call(&OracleRequest::with_frames(
            OracleRequestKind::Logits,
            sample_question(),
            sample_frames(),
        ))
        .map_err(|e| format!("fallback round-trip: {e}"))?;
    if !fallback.approximate_logits {
        return Err("one-hot fallback not flagged approximate".into());
    }
    let fl = fallback.logits.ok_or("fallback carried no logits")?;
    let top = fl
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i);
    if top != Some(2) {
        return Err(format!("fallback logits {fl:?} do not peak at option C"));
    }
    drop(stub);

    // --- Timeout: not retried -------------------------------------------
    let stub = StubServer::start(|_| {
        StubResponse::json(json!({"choices": []})).after(Duration::from_millis(600))
    });
    let mut cfg = http_config(stub.url());
    cfg.timeout_ms = 150;
    let oracle = HttpOracle::new(cfg).map_err(|e| e.to_string())?;
    match oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Answer,
        sample_question(),
        sample_frames(),
    )) {
        Err(OracleError::Timeout { .. }) => {}
        other => return Err(format!("expected a timeout error, got {other:?}")),
    }
    if stub.hits() != 1 {
        return Err(format!("timeout was retried: {} hits", stub.hits()));
    }
    drop(stub);

    // --- Transport failures: retried with backoff ------------------------
    let ok = json!({ "choices": [{ "message": { "content": "A" } }] });
    let ok_clone = ok.clone();
    let stub = StubServer::start(move |req| {
        if req.ordinal < 2 {
            StubResponse::drop_connection()
        } else {
            StubResponse::json(ok_clone.clone())
        }
    });
    let oracle = HttpOracle::new(http_config(stub.url())).map_err(|e| e.to_string())?;
    oracle
        .call(&OracleRequest::with_frames(
            OracleRequestKind::Answer,
            sample_question(),
            sample_frames(),
        ))
        .map_err(|e| format!("retry sequence failed: {e}"))?;
    if stub.hits() != 3 {
        return Err(format!("expected 3 attempts (2 drops + success), saw {}", stub.hits()));
    }
    drop(stub);

    let stub = StubServer::start(|_| StubResponse::drop_connection());
    let mut cfg = http_config(stub.url());
    cfg.max_retries = 1;
    let oracle = HttpOracle::new(cfg).map_err(|e| e.to_string())?;
    match oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Answer,
        sample_question(),
        sample_frames(),
    )) {
        Err(OracleError::Transport { .. }) => {}
        other => return Err(format!("expected a transport error, got {other:?}")),
    }
    if stub.hits() != 2 {
        return Err(format!(
            "max_retries=1 should stop after 2 attempts, saw {}",
            stub.hits()
        ));
    }
    drop(stub);

    // --- HTTP error statuses: surfaced, not retried ----------------------
    let stub = StubServer::start(|_| StubResponse::status(500, r#"{"error":"overloaded"}"#));
    let oracle = HttpOracle::new(http_config(stub.url())).map_err(|e| e.to_string())?;
    match oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Answer,
        sample_question(),
        sample_frames(),
    )) {
        Err(OracleError::Status { status: 500, .. }) => {}
        other => return Err(format!("expected HTTP 500 error, got {other:?}")),
    }
    if stub.hits() != 1 {
        return Err(format!("status error was retried: {} hits", stub.hits()));
    }
    drop(stub);

    // --- Preconditions: rejected before any request ----------------------
    let stub = StubServer::with_fixed_json(ok);
    let oracle = HttpOracle::new(http_config(stub.url())).map_err(|e| e.to_string())?;
    let mut bad = OracleRequest::elements_from_answer(sample_question(), "crowbar".into());
    bad.frames = sample_frames();
    match oracle.call(&bad) {
        Err(OracleError::Precondition(_)) => {}
        other => return Err(format!("expected a precondition error, got {other:?}")),
    }
    match oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Answer,
        sample_question(),
        Vec::new(),
    )) {
        Err(OracleError::Precondition(_)) => {}
        other => return Err(format!("frameless answer request: got {other:?}")),
    }
    if stub.hits() != 0 {
        return Err(format!("precondition failures reached the wire ({} hits)", stub.hits()));
    }

    Ok("four kinds round-trip; logprob, fallback, timeout, retry, status, and precondition \
        contracts hold"
        .into())
}
