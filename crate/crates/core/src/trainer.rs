//! The training loop: group rollouts, composite rewards, mean-centered
//! advantages, one Adam step per episode — plus evaluation, inference, and
//! the episode log format.
//!
//! Per episode the trainer (1) asks the oracle which visual elements the
//! question targets, (2) builds the detection-filtered candidate pool,
//! (3) runs the policy once over the pool, (4) draws a group of G
//! selections, scoring each with answer correctness, element-overlap cycle
//! consistency, and a counterfactual KL term against an inverted-policy
//! draw, and (5) ascends the group policy gradient
//! `(1/G) Σ_i (R_i − R̄) ∇ log π(s_i)` with Adam.
//!
//! Determinism: every random draw comes from a counter-keyed stream of the
//! master seed (episode index, group member), never from shared mutable RNG
//! state, so runs are reproducible and resumable. At every checkpoint write
//! the live f64 parameters and optimizer moments are rounded to f32 —
//! exactly what the checkpoint stores — so a resumed run continues
//! bit-identically to one that never stopped.

use std::fs::OpenOptions;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::env::{generate_episode, load_episodes, Episode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::oracle::{
    elements_parse, FrameRef, HttpOracle, Oracle, OracleRequest, OracleRequestKind,
    SyntheticOracle,
};
use crate::policy::{grad_log_prob_from, init_policy, policy_forward, Gradient, PolicyParams};
use crate::pool::{build_pool, extract_target_elements, uniform_indices, CandidatePool, TagDetector};
use crate::rewards::{
    answer_reward, composite_reward, compute_advantages, counterfactual_reward, cycle_reward,
    parse_option_index,
};
use crate::rng::{substream, Stream};
use crate::sampling::{sample_counterfactual, sample_subset, top_k};
use crate::vecmath::{cosine, softmax};

/// Episode log schema version.
pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Which oracle backend the run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// The deterministic synthetic-environment oracle.
    Synthetic,
    /// A hosted chat-completions endpoint.
    Http,
}

/// Synthetic-environment settings: the generator spec plus how many
/// training and held-out instances to materialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEnvConfig {
    /// Generator configuration.
    pub spec: SyntheticSpec,
    /// Training instances (episode seeds 0..n).
    pub train_instances: usize,
    /// Held-out evaluation instances (seeds derived disjointly).
    pub eval_instances: usize,
}

impl Default for SyntheticEnvConfig {
    fn default() -> Self {
        SyntheticEnvConfig {
            spec: SyntheticSpec::default(),
            train_instances: 400,
            eval_instances: 100,
        }
    }
}

/// Full training configuration. Every behavior-affecting knob lives here;
/// [`config_hash`] digests it for run identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Master seed for every random stream in the run.
    pub master_seed: u64,
    /// Passes over the training instances.
    pub epochs: usize,
    /// Candidate pool size M.
    pub pool_size: usize,
    /// Frames selected per rollout K.
    pub select_k: usize,
    /// Rollouts per episode G.
    pub group_size: usize,
    /// Weight of the cycle-consistency reward.
    pub lambda1: f64,
    /// Weight of the counterfactual KL reward.
    pub lambda2: f64,
    /// Adam step size.
    pub learning_rate: f64,
    /// Policy hidden width H. The default is sized so the bundled synthetic
    /// task trains to high necessary-frame recall in minutes on a CPU;
    /// narrower nets run faster but may stall below that.
    pub hidden: usize,
    /// Detection confidence threshold for pool membership. Defaults to 0
    /// (keep the whole pool): the synthetic environment deliberately plants
    /// causally necessary frames that element detection misses, so any
    /// positive threshold can exclude them and cap the reachable reward.
    /// Detector-backed HTTP pipelines conventionally raise it to 0.7.
    pub detection_threshold: f64,
    /// Optional clamp on the counterfactual KL term.
    pub r_cf_cap: Option<f64>,
    /// Checkpoint cadence in episodes (0 = final checkpoint only).
    pub checkpoint_every: u64,
    /// Optional global episode cap (useful for staged/resumed runs).
    pub max_episodes: Option<u64>,
    /// Oracle backend.
    pub oracle: OracleKind,
    /// Synthetic environment (exactly one of this and `dataset`).
    pub synthetic: Option<SyntheticEnvConfig>,
    /// Episode-file environment (exactly one of this and `synthetic`).
    pub dataset: Option<PathBuf>,
    /// Endpoint settings, required when `oracle = "http"`.
    pub http_oracle: Option<crate::oracle::HttpOracleConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            master_seed: 0,
            epochs: 1,
            pool_size: 32,
            select_k: 8,
            group_size: 4,
            lambda1: 0.5,
            lambda2: 0.5,
            learning_rate: 1e-4,
            hidden: 224,
            detection_threshold: 0.0,
            r_cf_cap: None,
            checkpoint_every: 100,
            max_episodes: None,
            oracle: OracleKind::Synthetic,
            synthetic: Some(SyntheticEnvConfig::default()),
            dataset: None,
            http_oracle: None,
        }
    }
}

impl TrainConfig {
    /// Checks every configuration invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.select_k == 0 {
            return fail("select_k (K) must be >= 1".into());
        }
        if self.select_k > self.pool_size {
            return fail(format!(
                "select_k (K={}) must not exceed pool_size (M={})",
                self.select_k, self.pool_size
            ));
        }
        if self.group_size < 2 {
            return fail(format!(
                "group_size (G={}) must be >= 2 for mean-centered advantages",
                self.group_size
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.hidden == 0 {
            return fail("hidden width H must be >= 1".into());
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !l.is_finite() || l < 0.0 {
                return fail(format!("{name} must be finite and >= 0, got {l}"));
            }
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return fail(format!(
                "detection_threshold {} outside [0, 1]",
                self.detection_threshold
            ));
        }
        if let Some(cap) = self.r_cf_cap {
            if !cap.is_finite() || cap < 0.0 {
                return fail(format!("r_cf_cap must be finite and >= 0, got {cap}"));
            }
        }
        match (&self.synthetic, &self.dataset) {
            (Some(env), None) => {
                env.spec.validate()?;
                if env.train_instances == 0 {
                    return fail("train_instances must be >= 1".into());
                }
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => {
                return fail("configure either a synthetic environment or a dataset, not both".into())
            }
            (None, None) => {
                return fail("configure an environment: a [synthetic] section or a dataset path".into())
            }
        }
        match self.oracle {
            OracleKind::Synthetic => {
                if self.synthetic.is_none() {
                    return fail("the synthetic oracle requires the synthetic environment".into());
                }
            }
            OracleKind::Http => {
                if self.http_oracle.is_none() {
                    return fail("oracle = \"http\" requires an [http_oracle] section".into());
                }
            }
        }
        Ok(())
    }

    /// The environment's frame feature dimension; for dataset environments
    /// it is read off the first instance.
    pub fn feature_dim(&self, instances: &[Episode]) -> Result<usize> {
        if let Some(env) = &self.synthetic {
            return Ok(env.spec.feature_dim);
        }
        let first = instances
            .first()
            .ok_or_else(|| Error::Input("dataset contains no episodes".into()))?;
        let frame = first
            .frames
            .first()
            .ok_or_else(|| Error::Input("dataset episode has no frames".into()))?;
        Ok(frame.feature.len())
    }
}

/// SHA-256 over the canonical JSON form of the configuration, hex-encoded.
/// Two fields are excluded because they never change what any single
/// episode computes: the API token (authentication only) and
/// `max_episodes` (truncates the schedule; a capped-then-resumed run is
/// the same run as an uncapped one).
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let mut value = serde_json::to_value(cfg)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("max_episodes");
    }
    if let Some(oracle) = value.get_mut("http_oracle") {
        if let Some(obj) = oracle.as_object_mut() {
            obj.remove("api_token");
        }
    }
    let canonical = serde_json::to_string(&value)?;
    let digest = sha2::Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One group member's rollout, as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberLog {
    /// Selected frame indices, in draw order.
    pub selection: Vec<usize>,
    /// Log-probability of the ordered selection under the policy.
    pub log_prob: f64,
    /// Counterfactually selected frame indices, in draw order.
    pub cf_selection: Vec<usize>,
    /// Log-probability of the counterfactual draw under the inverted policy.
    pub cf_log_prob: f64,
    /// Option index parsed from the oracle's answer, if any.
    pub answer_index: Option<usize>,
    /// Answer-correctness reward (0/1).
    pub r_ans: f64,
    /// Cycle-consistency reward in [0, 1].
    pub r_cycle: f64,
    /// Counterfactual KL reward (possibly capped).
    pub r_cf: f64,
    /// Composite reward.
    pub reward: f64,
    /// Mean-centered advantage within the group.
    pub advantage: f64,
    /// Oracle logits under the selection.
    pub logits: Vec<f64>,
    /// Oracle logits under the counterfactual selection.
    pub cf_logits: Vec<f64>,
    /// True when either logit vector was backend-approximated.
    pub approximate_logits: bool,
}

/// One episode's log record (one JSON line in `episodes.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    /// Log format version.
    pub schema_version: u32,
    /// Global episode index (0-based).
    pub episode: u64,
    /// Seed of the environment instance this episode ran on.
    pub seed: u64,
    /// Hash of the run configuration.
    pub config_hash: String,
    /// Candidate pool as original frame indices, temporal order.
    pub pool: Vec<usize>,
    /// Policy selection scores, aligned with `pool`.
    pub sigma: Vec<f64>,
    /// Visual elements the oracle attributed to the question.
    pub question_elements: Vec<String>,
    /// Correct option index.
    pub correct_index: usize,
    /// Group rollouts (empty when the episode failed).
    pub members: Vec<MemberLog>,
    /// Mean composite reward over the group.
    pub mean_reward: f64,
    /// L2 norm of the group policy-gradient estimate.
    pub grad_norm: f64,
    /// "ok", or a failure marker ("oracle_failed: ...", ...).
    pub status: String,
    /// Generator rejections for this instance (synthetic environments).
    pub regenerations: u32,
}

/// Per-episode estimates of the two information-bound surrogates: the mean
/// log-probability the oracle assigns the correct option (predictive
/// sufficiency) and the mean counterfactual KL (minimality pressure).
/// `None` for episodes without members.
pub fn cib_estimates(log: &EpisodeLog) -> Option<(f64, f64)> {
    if log.members.is_empty() {
        return None;
    }
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    for m in &log.members {
        let p = softmax(&m.logits);
        j1 += p[log.correct_index].max(f64::MIN_POSITIVE).ln();
        j2 += m.r_cf;
    }
    let g = log.members.len() as f64;
    Some((j1 / g, j2 / g))
}

/// Reads an episode log file, skipping (and counting) corrupt lines.
pub fn load_episode_logs(path: &Path) -> Result<(Vec<EpisodeLog>, usize)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open episode log {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut logs = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EpisodeLog>(&line) {
            Ok(log) => logs.push(log),
            Err(e) => {
                skipped += 1;
                log::warn!(
                    "{}:{}: skipping corrupt episode record: {e}",
                    path.display(),
                    lineno + 1
                );
            }
        }
    }
    Ok((logs, skipped))
}

/// Selection strategy compared at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// K evenly spaced pool frames.
    Uniform,
    /// Top-K pool frames by feature/question cosine similarity.
    Visual,
    /// Top-K pool frames by policy score.
    Policy,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Baseline> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(Baseline::Uniform),
            "visual" => Ok(Baseline::Visual),
            "policy" => Ok(Baseline::Policy),
            other => Err(Error::Input(format!(
                "unknown baseline {other:?} (expected uniform, visual, or policy)"
            ))),
        }
    }
}

/// Aggregate evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Which selection strategy was evaluated.
    pub baseline: Baseline,
    /// Fraction of instances answered correctly.
    pub accuracy: f64,
    /// Mean fraction of necessary frames selected; `None` without ground
    /// truth.
    pub necessary_recall: Option<f64>,
    /// Mean KL between answer distributions under the selection and under
    /// a random selection of avoided frames.
    pub mean_cf_gap: f64,
    /// Instances evaluated.
    pub instances: usize,
    /// Instances skipped because the oracle failed.
    pub failed: usize,
}

/// What `train` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Episodes completed over the whole run (including resumed ones).
    pub episodes: u64,
    /// Episodes that failed (oracle errors, skipped steps).
    pub failed: u64,
    /// Path of the final checkpoint.
    pub final_checkpoint: PathBuf,
    /// Path of the episode log.
    pub log_path: PathBuf,
    /// Configuration hash stamped on every log record.
    pub config_hash: String,
}

/// Inference output for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    /// Selected frame indices, temporal order.
    pub frame_indices: Vec<usize>,
    /// Candidate pool as original frame indices.
    pub pool: Vec<usize>,
    /// Policy scores aligned with `pool`.
    pub sigma: Vec<f64>,
    /// The oracle's answer text.
    pub answer_text: String,
    /// Parsed option index, if any.
    pub answer_index: Option<usize>,
    /// Whether the parsed answer matches the instance's correct option.
    pub correct: Option<bool>,
}

/// The training instances a configuration describes, in episode-seed order.
pub fn training_instances(cfg: &TrainConfig) -> Result<Vec<Episode>> {
    if let Some(env) = &cfg.synthetic {
        (0..env.train_instances as u64)
            .map(|seed| generate_episode(&env.spec, seed))
            .collect()
    } else if let Some(path) = &cfg.dataset {
        load_episodes(path)
    } else {
        Err(Error::Config("no environment configured".into()))
    }
}

/// Held-out evaluation instances. Synthetic environments derive their
/// episode seeds from a dedicated stream, so they never overlap the
/// training seeds regardless of `train_instances`; dataset environments
/// evaluate on the dataset itself.
pub fn heldout_instances(cfg: &TrainConfig, count_override: Option<usize>) -> Result<Vec<Episode>> {
    if let Some(env) = &cfg.synthetic {
        let count = count_override.unwrap_or(env.eval_instances);
        (0..count as u64)
            .map(|j| {
                let seed = rand::Rng::gen::<u64>(&mut substream(
                    env.spec.master_seed,
                    Stream::HeldOut,
                    &[j],
                ));
                generate_episode(&env.spec, seed)
            })
            .collect()
    } else if let Some(path) = &cfg.dataset {
        load_episodes(path)
    } else {
        Err(Error::Config("no environment configured".into()))
    }
}

/// Oracle backend handle shared across a run.
enum OracleHandle {
    Synthetic,
    Http(Box<HttpOracle>),
}

fn build_oracle(cfg: &TrainConfig) -> Result<OracleHandle> {
    match cfg.oracle {
        OracleKind::Synthetic => Ok(OracleHandle::Synthetic),
        OracleKind::Http => {
            let http_cfg = cfg
                .http_oracle
                .clone()
                .ok_or_else(|| Error::Config("oracle = \"http\" requires an [http_oracle] section".into()))?;
            Ok(OracleHandle::Http(Box::new(HttpOracle::new(http_cfg)?)))
        }
    }
}

impl OracleHandle {
    /// The oracle to use for one episode. Synthetic oracles are rebuilt per
    /// episode (they answer from the instance's planted structure); the
    /// HTTP client is shared.
    fn for_episode<'a>(
        &'a self,
        spec: Option<&'a SyntheticSpec>,
        instance: &'a Episode,
    ) -> Result<Box<dyn Oracle + 'a>> {
        match self {
            OracleHandle::Synthetic => {
                let spec = spec.ok_or_else(|| {
                    Error::Config("the synthetic oracle requires the synthetic environment".into())
                })?;
                Ok(Box::new(SyntheticOracle::new(spec, instance)?))
            }
            OracleHandle::Http(client) => Ok(Box::new(client.as_ref())),
        }
    }
}

fn frame_refs(indices: &[usize]) -> Vec<FrameRef> {
    indices
        .iter()
        .map(|&index| FrameRef {
            index,
            image_base64: None,
        })
        .collect()
}

/// Extracts question elements and builds the candidate pool for one
/// instance under a configuration — steps (1) and (2) of the episode
/// pipeline, exposed for inference and analysis.
pub fn episode_pool(cfg: &TrainConfig, instance: &Episode) -> Result<(Vec<String>, CandidatePool)> {
    cfg.validate()?;
    let oracle = build_oracle(cfg)?;
    let spec = cfg.synthetic.as_ref().map(|env| &env.spec);
    prepare_pool(cfg, &oracle, spec, instance)
}

fn prepare_pool(
    cfg: &TrainConfig,
    oracle: &OracleHandle,
    spec: Option<&SyntheticSpec>,
    instance: &Episode,
) -> Result<(Vec<String>, CandidatePool)> {
    let ep_oracle = oracle.for_episode(spec, instance)?;
    let elements = extract_target_elements(ep_oracle.as_ref(), &instance.frames, &instance.question)?;
    let pool = build_pool(
        &instance.frames,
        &elements,
        &TagDetector,
        cfg.detection_threshold,
        cfg.pool_size,
        &instance.question,
    )?;
    Ok((elements, pool))
}

/// Reads option logits out of a reply, falling back to a dedicated logits
/// request when the first reply carried none.
fn logits_from(
    reply: &crate::oracle::OracleReply,
    oracle: &dyn Oracle,
    question: &crate::env::QuestionInstance,
    frames: &[FrameRef],
) -> Result<(Vec<f64>, bool)> {
    if let Some(l) = &reply.logits {
        return Ok((l.clone(), reply.approximate_logits));
    }
    let r = oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Logits,
        question.clone(),
        frames.to_vec(),
    ))?;
    let logits = r.logits.ok_or_else(|| {
        Error::Oracle {
            episode: None,
            source: crate::oracle::OracleError::Parse("logits request returned no logits".into()),
        }
    })?;
    Ok((logits, r.approximate_logits))
}

/// Runs one episode's group of rollouts. Returns the complete log record
/// and the (already advantage-weighted, group-averaged) gradient estimate.
fn run_group(
    params: &PolicyParams,
    cfg: &TrainConfig,
    spec: Option<&SyntheticSpec>,
    oracle: &OracleHandle,
    instance: &Episode,
    ep_idx: u64,
    config_hash: &str,
) -> Result<(EpisodeLog, Gradient)> {
    let question = &instance.question;
    let (q_elements, pool) = prepare_pool(cfg, oracle, spec, instance)?;
    let ep_oracle = oracle.for_episode(spec, instance)?;
    let k_eff = cfg.select_k.min(pool.len());
    if k_eff < cfg.select_k {
        log::debug!(
            "episode {ep_idx}: pool of {} is smaller than K={}; selecting {k_eff}",
            pool.len(),
            cfg.select_k
        );
    }

    let output = policy_forward(params, &pool.features(), &question.feature)?;
    let sigma = &output.scores;

    let g = cfg.group_size;
    let mut members: Vec<MemberLog> = Vec::with_capacity(g);
    let mut grads: Vec<Gradient> = Vec::with_capacity(g);
    for member in 0..g as u64 {
        let mut rng = substream(cfg.master_seed, Stream::PolicySample, &[ep_idx, member]);
        let sel = sample_subset(sigma, k_eff, &mut rng)?;
        let sel_frames = pool.frame_indices(&sel.set_view());
        let refs = frame_refs(&sel_frames);

        let answer_reply = ep_oracle.call(&OracleRequest::with_frames(
            OracleRequestKind::Answer,
            question.clone(),
            refs.clone(),
        ))?;
        let answer_text = answer_reply.text.clone().unwrap_or_default();
        let answer_index = parse_option_index(&answer_text, &question.options);
        let r_ans = answer_reward(answer_index, question.correct_index);
        let (logits, approx_a) = logits_from(&answer_reply, ep_oracle.as_ref(), question, &refs)?;

        let elements_reply = ep_oracle.call(&OracleRequest::elements_from_answer(
            question.clone(),
            answer_text.clone(),
        ))?;
        let answer_elements = elements_parse(elements_reply.text.as_deref().unwrap_or(""));
        let r_cycle = cycle_reward(&q_elements, &answer_elements);

        let mut cf_rng = substream(
            cfg.master_seed,
            Stream::CounterfactualSample,
            &[ep_idx, member],
        );
        let cf_sel = sample_counterfactual(sigma, k_eff, &mut cf_rng)?;
        let cf_frames = pool.frame_indices(&cf_sel.set_view());
        let cf_reply = ep_oracle.call(&OracleRequest::with_frames(
            OracleRequestKind::Logits,
            question.clone(),
            frame_refs(&cf_frames),
        ))?;
        let cf_logits = cf_reply.logits.clone().ok_or_else(|| Error::Oracle {
            episode: None,
            source: crate::oracle::OracleError::Parse("logits request returned no logits".into()),
        })?;
        let r_cf_raw = counterfactual_reward(&logits, &cf_logits)?;

        let breakdown = composite_reward(r_ans, r_cycle, r_cf_raw, cfg.lambda1, cfg.lambda2, cfg.r_cf_cap)?;
        grads.push(grad_log_prob_from(params, &output, &sel.ordered_indices)?);
        members.push(MemberLog {
            selection: pool.frame_indices(&sel.ordered_indices),
            log_prob: sel.log_prob.expect("sampled selections carry log-probs"),
            cf_selection: pool.frame_indices(&cf_sel.ordered_indices),
            cf_log_prob: cf_sel.log_prob.expect("sampled selections carry log-probs"),
            answer_index,
            r_ans: breakdown.r_ans,
            r_cycle: breakdown.r_cycle,
            r_cf: breakdown.r_cf,
            reward: breakdown.total,
            advantage: 0.0, // filled below
            logits,
            cf_logits,
            approximate_logits: approx_a || cf_reply.approximate_logits,
        });
    }

    let rewards: Vec<f64> = members.iter().map(|m| m.reward).collect();
    let advantages = compute_advantages(&rewards)?;
    for (m, &a) in members.iter_mut().zip(&advantages) {
        m.advantage = a;
    }
    let mean_reward = rewards.iter().sum::<f64>() / g as f64;

    // Estimator: (1/G) Σ_i Â_i ∇ log π(s_i).
    let mut estimate = vec![0.0; params.len()];
    for (grad, &a) in grads.iter().zip(&advantages) {
        let w = a / g as f64;
        for (e, &gv) in estimate.iter_mut().zip(&grad.theta) {
            *e += w * gv;
        }
    }
    let estimator = Gradient { theta: estimate };

    let log = EpisodeLog {
        schema_version: LOG_SCHEMA_VERSION,
        episode: ep_idx,
        seed: instance.seed,
        config_hash: config_hash.to_string(),
        pool: (0..pool.len()).map(|p| pool.frame_index(p)).collect(),
        sigma: sigma.clone(),
        question_elements: q_elements,
        correct_index: question.correct_index,
        members,
        mean_reward,
        grad_norm: estimator.l2_norm(),
        status: "ok".into(),
        regenerations: instance.regenerations,
    };
    Ok((log, estimator))
}

fn failed_log(ep_idx: u64, instance: &Episode, config_hash: &str, status: String) -> EpisodeLog {
    EpisodeLog {
        schema_version: LOG_SCHEMA_VERSION,
        episode: ep_idx,
        seed: instance.seed,
        config_hash: config_hash.to_string(),
        pool: Vec::new(),
        sigma: Vec::new(),
        question_elements: Vec::new(),
        correct_index: instance.question.correct_index,
        members: Vec::new(),
        mean_reward: 0.0,
        grad_norm: 0.0,
        status,
        regenerations: instance.regenerations,
    }
}

/// Trains a policy under `cfg`, writing `episodes.jsonl` and checkpoints
/// into `run_dir`. With `resume_from`, picks up bit-identically from a
/// checkpoint that carries optimizer state (the episode log is appended).
pub fn train(cfg: &TrainConfig, run_dir: &Path, resume_from: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let hash = config_hash(cfg)?;
    let instances = training_instances(cfg)?;
    let d = cfg.feature_dim(&instances)?;
    let spec = cfg.synthetic.as_ref().map(|env| &env.spec);
    let oracle = build_oracle(cfg)?;

    let (mut params, mut opt, start_episode) = match resume_from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.feature_dim != d || ck.params.hidden != cfg.hidden {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is a {}x{} policy but the configuration needs {}x{}",
                    ck.params.feature_dim, ck.params.hidden, d, cfg.hidden
                )));
            }
            let state = ck.optimizer.ok_or_else(|| {
                Error::Checkpoint("checkpoint lacks optimizer state; cannot resume training".into())
            })?;
            let mut opt = Adam::new(cfg.learning_rate, ck.params.len())?;
            opt.m = state.m;
            opt.v = state.v;
            opt.t = state.t;
            (ck.params, opt, ck.episode)
        }
        None => {
            let params = init_policy(d, cfg.hidden, cfg.master_seed)?;
            let opt = Adam::new(cfg.learning_rate, params.len())?;
            (params, opt, 0)
        }
    };

    let planned = cfg.epochs as u64 * instances.len() as u64;
    let total = cfg.max_episodes.map_or(planned, |cap| planned.min(cap));
    if start_episode > total {
        return Err(Error::Config(format!(
            "checkpoint is at episode {start_episode}, beyond the configured total {total}"
        )));
    }

    let log_path = run_dir.join("episodes.jsonl");
    let mut log_file = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?,
    );
    let mut failed = 0u64;

    for ep_idx in start_episode..total {
        let instance = &instances[(ep_idx % instances.len() as u64) as usize];
        let outcome = run_group(&params, cfg, spec, &oracle, instance, ep_idx, &hash);
        let (entry, estimator) = match outcome {
            Ok((entry, estimator)) => (entry, Some(estimator)),
            Err(Error::Oracle { source, .. }) => {
                failed += 1;
                log::warn!("episode {ep_idx}: oracle failure: {source}");
                (
                    failed_log(ep_idx, instance, &hash, format!("oracle_failed: {source}")),
                    None,
                )
            }
            Err(Error::Numerical { msg, .. }) => {
                failed += 1;
                log::warn!("episode {ep_idx}: skipping step: {msg}");
                (
                    failed_log(ep_idx, instance, &hash, format!("skipped_numerical: {msg}")),
                    None,
                )
            }
            Err(e) => return Err(e.with_episode(ep_idx)),
        };
        if let Some(estimator) = estimator {
            // Reward ascent via Adam descent on the negated estimate.
            let neg = Gradient {
                theta: estimator.theta.iter().map(|g| -g).collect(),
            };
            opt.step(&mut params, &neg).map_err(|e| e.with_episode(ep_idx))?;
            // Checkpoints store f32. Keeping the live state on the f32 grid
            // at every episode boundary makes any checkpoint an exact image
            // of memory, so a resumed run continues bit-identically to one
            // that never stopped, wherever the stop lands.
            params.quantize_to_f32();
            opt.quantize_to_f32();
        }
        serde_json::to_writer(&mut log_file, &entry)?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;

        let done = ep_idx + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != total {
            save_checkpoint(
                &ckpt_dir.join(format!("ckpt-{done:08}.bin")),
                &params,
                Some(&opt),
                done,
            )?;
        }
    }

    save_checkpoint(
        &ckpt_dir.join(format!("ckpt-{total:08}.bin")),
        &params,
        Some(&opt),
        total,
    )?;
    let final_path = ckpt_dir.join("final.bin");
    save_checkpoint(&final_path, &params, Some(&opt), total)?;

    Ok(TrainReport {
        episodes: total,
        failed,
        final_checkpoint: final_path,
        log_path,
        config_hash: hash,
    })
}

/// Top-`k` positions by descending score with ties toward earlier
/// positions, returned in ascending (temporal) order. Works on any finite
/// scores (cosines included), unlike the σ-restricted sampling top-K.
fn descending_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut chosen: Vec<usize> = order[..k.min(scores.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

struct InstanceEval {
    correct: bool,
    recall: Option<f64>,
    cf_gap: f64,
}

fn eval_instance(
    params: &PolicyParams,
    cfg: &TrainConfig,
    spec: Option<&SyntheticSpec>,
    oracle: &OracleHandle,
    instance: &Episode,
    instance_idx: u64,
    baseline: Baseline,
) -> Result<InstanceEval> {
    let question = &instance.question;
    let (_, pool) = prepare_pool(cfg, oracle, spec, instance)?;
    let ep_oracle = oracle.for_episode(spec, instance)?;
    let k_eff = cfg.select_k.min(pool.len());

    let positions: Vec<usize> = match baseline {
        Baseline::Uniform => uniform_indices(pool.len(), k_eff),
        Baseline::Visual => {
            let cosines: Vec<f64> = pool
                .features()
                .iter()
                .map(|f| cosine(f, &question.feature))
                .collect();
            descending_top_k(&cosines, k_eff)
        }
        Baseline::Policy => {
            let output = policy_forward(params, &pool.features(), &question.feature)?;
            top_k(&output.scores, k_eff)?.ordered_indices
        }
    };
    let sel_frames = pool.frame_indices(&positions);
    let refs = frame_refs(&sel_frames);

    let answer_reply = ep_oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Answer,
        question.clone(),
        refs.clone(),
    ))?;
    let answer_text = answer_reply.text.clone().unwrap_or_default();
    let answer_index = parse_option_index(&answer_text, &question.options);
    let correct = answer_index == Some(question.correct_index);
    let (logits, _) = logits_from(&answer_reply, ep_oracle.as_ref(), question, &refs)?;

    let recall = instance.ground_truth.as_ref().map(|gt| {
        let hit = gt
            .necessary_indices
            .iter()
            .filter(|i| sel_frames.contains(i))
            .count();
        hit as f64 / gt.necessary_indices.len().max(1) as f64
    });

    // Counterfactual gap: replace the selection with a random draw from the
    // frames it avoided (binary selection scores inverted), same K.
    let mut binary = vec![0.0; pool.len()];
    for &p in &positions {
        binary[p] = 1.0;
    }
    let mut cf_rng = substream(cfg.master_seed, Stream::EvalCounterfactual, &[instance_idx]);
    let cf_sel = sample_counterfactual(&binary, k_eff, &mut cf_rng)?;
    let cf_frames = pool.frame_indices(&cf_sel.set_view());
    let cf_reply = ep_oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Logits,
        question.clone(),
        frame_refs(&cf_frames),
    ))?;
    let cf_logits = cf_reply.logits.ok_or_else(|| Error::Oracle {
        episode: None,
        source: crate::oracle::OracleError::Parse("logits request returned no logits".into()),
    })?;
    let cf_gap = counterfactual_reward(&logits, &cf_logits)?;

    Ok(InstanceEval {
        correct,
        recall,
        cf_gap,
    })
}

/// Evaluates a selection strategy over instances: answer accuracy,
/// necessary-frame recall (when ground truth exists), and the mean
/// counterfactual KL gap. Oracle failures skip the instance and are
/// counted; an all-failed evaluation is an error.
pub fn evaluate(
    params: &PolicyParams,
    cfg: &TrainConfig,
    baseline: Baseline,
    instances: &[Episode],
) -> Result<EvalReport> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Input("evaluation needs at least one instance".into()));
    }
    let spec = cfg.synthetic.as_ref().map(|env| &env.spec);
    let oracle = build_oracle(cfg)?;

    let mut correct = 0usize;
    let mut recalls: Vec<f64> = Vec::new();
    let mut gaps: Vec<f64> = Vec::new();
    let mut failed = 0usize;
    let mut last_failure: Option<Error> = None;
    for (j, instance) in instances.iter().enumerate() {
        match eval_instance(params, cfg, spec, &oracle, instance, j as u64, baseline) {
            Ok(r) => {
                correct += r.correct as usize;
                if let Some(rec) = r.recall {
                    recalls.push(rec);
                }
                gaps.push(r.cf_gap);
            }
            Err(e @ Error::Oracle { .. }) => {
                failed += 1;
                log::warn!("evaluation instance {j}: {e}");
                last_failure = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let succeeded = instances.len() - failed;
    if succeeded == 0 {
        return Err(last_failure.expect("at least one instance failed"));
    }
    Ok(EvalReport {
        baseline,
        accuracy: correct as f64 / succeeded as f64,
        necessary_recall: if recalls.is_empty() {
            None
        } else {
            Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
        },
        mean_cf_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
        instances: succeeded,
        failed,
    })
}

/// Runs the deterministic inference path on one instance: pool, policy
/// scores, top-K selection, oracle answer.
pub fn infer(params: &PolicyParams, cfg: &TrainConfig, instance: &Episode) -> Result<InferResult> {
    cfg.validate()?;
    let spec = cfg.synthetic.as_ref().map(|env| &env.spec);
    let oracle = build_oracle(cfg)?;
    let (_, pool) = prepare_pool(cfg, &oracle, spec, instance)?;
    let ep_oracle = oracle.for_episode(spec, instance)?;
    let k_eff = cfg.select_k.min(pool.len());

    let output = policy_forward(params, &pool.features(), &instance.question.feature)?;
    let selection = top_k(&output.scores, k_eff)?;
    let frame_indices = pool.frame_indices(&selection.ordered_indices);

    let reply = ep_oracle.call(&OracleRequest::with_frames(
        OracleRequestKind::Answer,
        instance.question.clone(),
        frame_refs(&frame_indices),
    ))?;
    let answer_text = reply.text.unwrap_or_default();
    let answer_index = parse_option_index(&answer_text, &instance.question.options);

    Ok(InferResult {
        frame_indices,
        pool: (0..pool.len()).map(|p| pool.frame_index(p)).collect(),
        sigma: output.scores,
        answer_text,
        answer_index,
        correct: answer_index.map(|i| i == instance.question.correct_index),
    })
}
