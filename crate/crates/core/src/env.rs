//! Deterministic synthetic video-QA environment with a planted causal chain.
//!
//! Each generated episode is a short "video" of feature vectors in which a
//! known set of *necessary* frames jointly determines the correct answer: the
//! answering model (see [`synthetic_option_logits`]) gives the correct option
//! a winning logit only when **all** necessary frames are selected, so every
//! necessary frame is individually load-bearing. Alongside them the episode
//! plants *distractor* frames that carry every query element at high detector
//! confidence and look maximally similar to the question embedding — visually
//! compelling, causally inert. Every episode is constructed (by rejection
//! sampling) to contain this distractor trap: ranking frames by
//! feature/question cosine similarity puts at least one distractor above at
//! least one necessary frame, so a visual-similarity selector provably
//! under-performs a causally informed one.
//!
//! Causally decisive moments share a *visual signature*: a pair of element
//! ids is reserved across the whole universe (they never appear in E_q,
//! answer options, or background frames) and every necessary frame carries
//! both at moderate confidence. The first necessary frame additionally
//! carries a single target element — a strict subset of E_q at deliberately
//! low detector confidence — while the rest show only the signature. This
//! mirrors how real causal moments tend to share subtle visual cues (contact,
//! state change) that are unrelated to question similarity: the signature is
//! invisible to question-relevance ranking — it is orthogonal to the question
//! embedding and never among the detected target elements — so a selector can
//! exploit it only by discovering, through reward, that frames bearing it are
//! the ones that change answers. That discovery is what the training loop is
//! expected to make, and it keeps the selection task learnable at small
//! budgets while leaving the visual-similarity trap fully armed. Background
//! frames, conversely, glimpse target elements at moderate confidence, so
//! sheer question relevance separates neither the causal chain from the
//! background nor the background from the distractors.
//!
//! Generation is a pure function of `(spec, episode_seed)`; serialized
//! episodes are byte-identical across runs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gauss, substream, Stream};
use crate::vecmath::{argmax, cosine, normalize, softmax};

/// Number of target visual elements planted per episode (|E_q|).
///
/// Three keeps single-element necessary frames strict subsets of E_q and
/// makes "half of E_q rounded down" a single shared element for wrong options.
pub const TARGET_ELEMENT_COUNT: usize = 3;

/// Number of element ids reserved as the causal signature (the highest ids of
/// the universe). Two span a plane in feature space, which a randomly
/// initialized policy picks up faster than a single direction without
/// diluting each direction's per-frame coefficient.
pub const SIGNATURE_ELEMENT_COUNT: usize = 2;

/// Upper bound on trap-rejection retries before generation gives up.
const MAX_GEN_ATTEMPTS: u64 = 1000;

/// One detected visual element on a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementTag {
    /// Normalized element identifier (lowercase, trimmed).
    pub element: String,
    /// Detection confidence in [0, 1].
    pub confidence: f64,
}

/// One video frame: its temporal index, feature vector, and element tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Temporal position within the video (0-based).
    pub index: usize,
    /// Dense feature vector of dimension D.
    pub feature: Vec<f64>,
    /// Elements visible in this frame, with detector confidences.
    pub element_tags: Vec<ElementTag>,
}

/// A multiple-choice question over one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    /// Question text.
    pub text: String,
    /// Option texts, indexed by letter (A = 0, B = 1, ...).
    pub options: Vec<String>,
    /// Index of the correct option.
    pub correct_index: usize,
    /// Question embedding of dimension D.
    pub feature: Vec<f64>,
}

/// The planted causal structure of a synthetic episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Frames that must all be selected for the correct answer to win
    /// (the planted causal chain, size c). Sorted ascending.
    pub necessary_indices: Vec<usize>,
    /// Visually question-like but causally inert frames. Sorted ascending.
    pub distractor_indices: Vec<usize>,
    /// The target visual element set E_q. Sorted, normalized.
    pub target_elements: Vec<String>,
}

/// Generator configuration for the synthetic environment.
///
/// Deserializes with per-field defaults, so configuration files may name
/// only the fields they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Frames per episode.
    pub total_frames: usize,
    /// Candidate-pool size hint M (validated against total_frames).
    pub pool_target: usize,
    /// Number of necessary frames c.
    pub necessary_count: usize,
    /// Number of distractor frames.
    pub distractor_count: usize,
    /// Number of answer options A.
    pub option_count: usize,
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Per-coordinate Gaussian noise added to frame features.
    pub feature_noise_sigma: f64,
    /// Correct-option logit bonus applied only at full coverage.
    pub full_coverage_bonus: f64,
    /// Correct-option logit slope in coverage.
    pub coverage_slope: f64,
    /// Logit assigned to every non-correct option.
    pub distractor_logit: f64,
    /// Size of the element vocabulary episodes draw from.
    pub element_universe_size: usize,
    /// Master seed for the environment stream family.
    pub master_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            total_frames: 16,
            pool_target: 16,
            necessary_count: 3,
            distractor_count: 5,
            option_count: 5,
            feature_dim: 32,
            feature_noise_sigma: 0.05,
            full_coverage_bonus: 4.0,
            coverage_slope: 1.0,
            distractor_logit: 2.0,
            element_universe_size: 12,
            master_seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Checks every generator invariant; all violations are config errors.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.necessary_count == 0 {
            return fail("necessary_count must be >= 1".into());
        }
        if self.distractor_count == 0 {
            return fail("distractor_count must be >= 1 (the distractor trap needs one)".into());
        }
        if self.necessary_count + self.distractor_count > self.total_frames {
            return fail(format!(
                "necessary_count + distractor_count = {} exceeds total_frames = {}",
                self.necessary_count + self.distractor_count,
                self.total_frames
            ));
        }
        if self.pool_target == 0 || self.pool_target > self.total_frames {
            return fail(format!(
                "pool_target must be in 1..=total_frames, got {}",
                self.pool_target
            ));
        }
        if self.option_count < 2 {
            return fail("option_count must be >= 2".into());
        }
        if self.feature_dim < 2 {
            return fail("feature_dim must be >= 2".into());
        }
        if self.feature_noise_sigma < 0.0 || !self.feature_noise_sigma.is_finite() {
            return fail("feature_noise_sigma must be finite and >= 0".into());
        }
        // Only full coverage may win the argmax: β1 + β2 > d > β2.
        if !(self.full_coverage_bonus + self.coverage_slope > self.distractor_logit
            && self.distractor_logit > self.coverage_slope)
        {
            return fail(format!(
                "logit constants must satisfy full_coverage_bonus + coverage_slope > \
                 distractor_logit > coverage_slope, got {} + {} vs {}",
                self.full_coverage_bonus, self.coverage_slope, self.distractor_logit
            ));
        }
        // E_q, the reserved causal-signature elements, and at least three
        // outside elements for option fillers and background frames.
        if self.element_universe_size < TARGET_ELEMENT_COUNT + SIGNATURE_ELEMENT_COUNT + 3 {
            return fail(format!(
                "element_universe_size must be >= {}, got {}",
                TARGET_ELEMENT_COUNT + SIGNATURE_ELEMENT_COUNT + 3,
                self.element_universe_size
            ));
        }
        Ok(())
    }
}

/// One fully materialized synthetic episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Episode seed this instance was generated from.
    pub seed: u64,
    /// Frames in temporal order.
    pub frames: Vec<FrameRecord>,
    /// The question over those frames.
    pub question: QuestionInstance,
    /// Planted structure; absent for externally loaded (real) data.
    pub ground_truth: Option<GroundTruth>,
    /// How many candidate layouts were rejected before the distractor-trap
    /// property held.
    pub regenerations: u32,
}

/// Name of synthetic element `i` ("elem00", "elem01", ...).
pub fn element_name(i: usize) -> String {
    format!("elem{i:02}")
}

/// The fixed unit embedding of element `i` under `spec.master_seed`.
pub fn element_vector(spec: &SyntheticSpec, i: usize) -> Vec<f64> {
    let mut rng = substream(spec.master_seed, Stream::ElementVector, &[i as u64]);
    let mut v: Vec<f64> = (0..spec.feature_dim).map(|_| gauss(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// Generates one episode. Pure in `(spec, episode_seed)`; retries internally
/// (with a counted regeneration) until the distractor-trap property holds.
pub fn generate_episode(spec: &SyntheticSpec, episode_seed: u64) -> Result<Episode> {
    spec.validate()?;
    for attempt in 0..MAX_GEN_ATTEMPTS {
        let ep = generate_attempt(spec, episode_seed, attempt)?;
        if distractor_trap_holds(&ep) {
            return Ok(Episode {
                regenerations: attempt as u32,
                ..ep
            });
        }
    }
    Err(Error::Input(format!(
        "episode seed {episode_seed}: distractor-trap property unsatisfied after \
         {MAX_GEN_ATTEMPTS} layouts; raise feature_dim or lower feature_noise_sigma"
    )))
}

/// True when at least one distractor outranks at least one necessary frame
/// under feature/question cosine similarity.
fn distractor_trap_holds(ep: &Episode) -> bool {
    let gt = ep.ground_truth.as_ref().expect("synthetic episode has ground truth");
    let cos = |idx: usize| cosine(&ep.frames[idx].feature, &ep.question.feature);
    let max_distractor = gt
        .distractor_indices
        .iter()
        .map(|&i| cos(i))
        .fold(f64::NEG_INFINITY, f64::max);
    let min_necessary = gt
        .necessary_indices
        .iter()
        .map(|&i| cos(i))
        .fold(f64::INFINITY, f64::min);
    max_distractor > min_necessary
}

fn generate_attempt(spec: &SyntheticSpec, episode_seed: u64, attempt: u64) -> Result<Episode> {
    let mut rng = substream(spec.master_seed, Stream::Episode, &[episode_seed, attempt]);
    let universe = spec.element_universe_size;

    // Target element set E_q. The highest universe ids are reserved as the
    // causal signature set (see module docs) and never appear in E_q, wrong
    // options, or background frames.
    let signatures: Vec<usize> = (universe - SIGNATURE_ELEMENT_COUNT..universe).collect();
    let mut element_ids: Vec<usize> = (0..universe - SIGNATURE_ELEMENT_COUNT).collect();
    let (eq_ids, rest) = element_ids.partial_shuffle(&mut rng, TARGET_ELEMENT_COUNT);
    let eq_ids: Vec<usize> = eq_ids.to_vec();
    let outside_ids: Vec<usize> = rest.to_vec();
    let mut target_elements: Vec<String> = eq_ids.iter().map(|&i| element_name(i)).collect();
    target_elements.sort();

    // Frame roles.
    let mut positions: Vec<usize> = (0..spec.total_frames).collect();
    positions.shuffle(&mut rng);
    let mut necessary: Vec<usize> = positions[..spec.necessary_count].to_vec();
    let mut distractors: Vec<usize> =
        positions[spec.necessary_count..spec.necessary_count + spec.distractor_count].to_vec();
    necessary.sort_unstable();
    distractors.sort_unstable();

    // The first necessary frame carries one target element (a strict subset
    // of E_q) so the causal chain stays visible to element detection; the
    // remaining necessary frames show only the causal signature — moments
    // whose decisiveness owes nothing to question-relevant content at all.
    let mut deal_order = eq_ids.clone();
    deal_order.shuffle(&mut rng);
    let necessary_elems: Vec<Vec<usize>> = (0..spec.necessary_count)
        .map(|i| {
            if i == 0 {
                vec![deal_order[0]]
            } else {
                Vec::new()
            }
        })
        .collect();

    // Answer options: the correct one lists exactly E_q; wrong ones share
    // exactly floor(|E_q|/2) target elements, topped up from outside E_q.
    let correct_index = rng.gen_range(0..spec.option_count);
    let shared_count = TARGET_ELEMENT_COUNT / 2;
    let mut option_sets: Vec<Vec<usize>> = Vec::with_capacity(spec.option_count);
    for opt in 0..spec.option_count {
        if opt == correct_index {
            let mut ids = eq_ids.clone();
            ids.sort_unstable();
            option_sets.push(ids);
            continue;
        }
        // Draw a wrong-option set; retry a few times for uniqueness but
        // tolerate duplicates when the universe is too small to avoid them.
        let mut set = Vec::new();
        for _ in 0..64 {
            let mut shared = eq_ids.clone();
            let (take, _) = shared.partial_shuffle(&mut rng, shared_count);
            set = take.to_vec();
            let mut fillers = outside_ids.clone();
            let (fill, _) =
                fillers.partial_shuffle(&mut rng, TARGET_ELEMENT_COUNT - shared_count);
            set.extend_from_slice(fill);
            set.sort_unstable();
            if !option_sets.contains(&set) {
                break;
            }
        }
        option_sets.push(set);
    }
    let options: Vec<String> = option_sets
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|&i| element_name(i))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect();

    // Question embedding: normalized sum of E_q element vectors.
    let mut q_feature = vec![0.0; spec.feature_dim];
    for &id in &eq_ids {
        for (acc, x) in q_feature.iter_mut().zip(element_vector(spec, id)) {
            *acc += x;
        }
    }
    normalize(&mut q_feature);

    // Frames.
    let mut frames = Vec::with_capacity(spec.total_frames);
    for idx in 0..spec.total_frames {
        let mut tags: Vec<ElementTag> = Vec::new();
        if let Some(slot) = necessary.iter().position(|&n| n == idx) {
            // The first necessary frame is pinned to the low-confidence band
            // [0.70, 0.80) so confidence ranking under-ranks it; the rest sit
            // in [0.70, 0.85).
            let hi = if slot == 0 { 0.80 } else { 0.85 };
            for &elem in &necessary_elems[slot] {
                tags.push(ElementTag {
                    element: element_name(elem),
                    confidence: rng.gen_range(0.70..hi),
                });
            }
            // Every necessary frame additionally shows the causal signature
            // pair.
            for &sig in &signatures {
                tags.push(ElementTag {
                    element: element_name(sig),
                    confidence: rng.gen_range(0.70..0.85),
                });
            }
        } else if distractors.contains(&idx) {
            let mut ids = eq_ids.clone();
            ids.sort_unstable();
            for elem in ids {
                tags.push(ElementTag {
                    element: element_name(elem),
                    confidence: rng.gen_range(0.90..1.0),
                });
            }
        } else {
            // Background frames glimpse one target element at moderate
            // confidence plus incidental outside elements, so question
            // relevance alone cannot separate them from the causal chain.
            tags.push(ElementTag {
                element: element_name(eq_ids[rng.gen_range(0..eq_ids.len())]),
                confidence: rng.gen_range(0.70..0.85),
            });
            let mut pool = outside_ids.clone();
            let count = rng.gen_range(1..=2usize);
            let (take, _) = pool.partial_shuffle(&mut rng, count);
            let mut take: Vec<usize> = take.to_vec();
            take.sort_unstable();
            for elem in take {
                tags.push(ElementTag {
                    element: element_name(elem),
                    confidence: rng.gen_range(0.75..0.95),
                });
            }
        }

        let mut feature = vec![0.0; spec.feature_dim];
        for tag in &tags {
            let id: usize = tag.element[4..].parse().expect("synthetic element name");
            for (acc, x) in feature.iter_mut().zip(element_vector(spec, id)) {
                *acc += x;
            }
        }
        normalize(&mut feature);
        for x in feature.iter_mut() {
            *x += spec.feature_noise_sigma * gauss(&mut rng);
        }
        frames.push(FrameRecord {
            index: idx,
            feature,
            element_tags: tags,
        });
    }

    let question = QuestionInstance {
        text: format!(
            "Which combination of visual elements explains the outcome of clip {episode_seed}?"
        ),
        options,
        correct_index,
        feature: q_feature,
    };
    let ground_truth = GroundTruth {
        necessary_indices: necessary,
        distractor_indices: distractors,
        target_elements,
    };
    Ok(Episode {
        seed: episode_seed,
        frames,
        question,
        ground_truth: Some(ground_truth),
        regenerations: 0,
    })
}

/// Answer-option logits for a frame selection under the planted model.
///
/// Coverage is `|selection ∩ necessary| / c`; the correct option's logit is
/// `full_coverage_bonus·[coverage = 1] + coverage_slope·coverage` and every
/// other option sits at `distractor_logit`. The discontinuous bonus makes
/// each necessary frame individually necessary: dropping any one of them
/// drops the correct logit below the others.
pub fn synthetic_option_logits(
    selection: &[usize],
    gt: &GroundTruth,
    q: &QuestionInstance,
    spec: &SyntheticSpec,
) -> Result<Vec<f64>> {
    if q.correct_index >= q.options.len() || q.options.len() != spec.option_count {
        return Err(Error::Input(format!(
            "question has {} options (correct_index {}) but spec expects {}",
            q.options.len(),
            q.correct_index,
            spec.option_count
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &idx in selection {
        if idx >= spec.total_frames {
            return Err(Error::Input(format!(
                "selection references frame {idx} outside 0..{}",
                spec.total_frames
            )));
        }
        seen.insert(idx);
    }
    let hits = gt
        .necessary_indices
        .iter()
        .filter(|i| seen.contains(i))
        .count();
    let c = gt.necessary_indices.len();
    if c == 0 {
        return Err(Error::Config(
            "ground truth has no necessary frames".into(),
        ));
    }
    let coverage = hits as f64 / c as f64;
    let correct_logit = if hits == c {
        self::full_coverage_logit(spec)
    } else {
        spec.coverage_slope * coverage
    };
    let mut logits = vec![spec.distractor_logit; spec.option_count];
    logits[q.correct_index] = correct_logit;
    Ok(logits)
}

/// Correct-option logit at full coverage.
pub fn full_coverage_logit(spec: &SyntheticSpec) -> f64 {
    spec.full_coverage_bonus + spec.coverage_slope
}

/// The answer the synthetic model gives a selection: argmax option index,
/// ties resolved to the lowest index.
pub fn synthetic_answer_index(
    selection: &[usize],
    gt: &GroundTruth,
    q: &QuestionInstance,
    spec: &SyntheticSpec,
) -> Result<usize> {
    Ok(argmax(&synthetic_option_logits(selection, gt, q, spec)?))
}

/// One row of the exhaustive subset table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceRow {
    /// The subset, ascending frame indices.
    pub subset: Vec<usize>,
    /// 1.0 when the synthetic model answers correctly on this subset.
    pub r_ans: f64,
    /// softmax probability of the correct option.
    pub correct_prob: f64,
}

/// Enumerates every size-K subset of `pool` (frame indices), scoring each
/// with the synthetic model. Rows are sorted by correct-option probability
/// descending, ties broken by lexicographic subset order. Refuses instances
/// with more than 10^6 subsets.
pub fn brute_force_subset_table(
    pool: &[usize],
    gt: &GroundTruth,
    q: &QuestionInstance,
    spec: &SyntheticSpec,
    k: usize,
) -> Result<Vec<BruteForceRow>> {
    if gt.necessary_indices.is_empty() {
        return Err(Error::Config(
            "ground truth has no necessary frames".into(),
        ));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::Input(format!(
            "subset size {k} out of range for pool of {}",
            pool.len()
        )));
    }
    let count = binomial(pool.len(), k);
    if count > 1_000_000 {
        return Err(Error::Input(format!(
            "C({}, {k}) = {count} exceeds the 10^6 enumeration bound",
            pool.len()
        )));
    }

    let n = pool.len();
    let mut rows = Vec::with_capacity(count as usize);
    // Lexicographic combination enumeration over pool positions.
    let mut comb: Vec<usize> = (0..k).collect();
    'enumerate: loop {
        let subset: Vec<usize> = comb.iter().map(|&p| pool[p]).collect();
        let logits = synthetic_option_logits(&subset, gt, q, spec)?;
        let probs = softmax(&logits);
        let r_ans = if argmax(&logits) == q.correct_index {
            1.0
        } else {
            0.0
        };
        rows.push(BruteForceRow {
            subset,
            r_ans,
            correct_prob: probs[q.correct_index],
        });

        // Advance to the next combination; slot i may hold at most n-(k-i).
        let mut i = k;
        while i > 0 {
            i -= 1;
            if comb[i] < n - (k - i) {
                comb[i] += 1;
                for j in i + 1..k {
                    comb[j] = comb[j - 1] + 1;
                }
                continue 'enumerate;
            }
        }
        break;
    }

    rows.sort_by(|a, b| {
        b.correct_prob
            .partial_cmp(&a.correct_prob)
            .expect("finite probabilities")
            .then_with(|| a.subset.cmp(&b.subset))
    });
    Ok(rows)
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    acc
}

/// Writes episodes as line-delimited JSON, one episode per line.
pub fn write_episodes(path: &std::path::Path, episodes: &[Episode]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a line-delimited JSON episode file written by [`write_episodes`].
/// Blank lines are skipped; a malformed line is an input error naming the
/// line number.
pub fn load_episodes(path: &std::path::Path) -> Result<Vec<Episode>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Input(format!("cannot open episode file {}: {e}", path.display()))
    })?;
    let reader = std::io::BufReader::new(file);
    let mut episodes = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!(
                "{}:{}: malformed episode record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        episodes.push(ep);
    }
    if episodes.is_empty() {
        return Err(Error::Input(format!(
            "episode file {} contains no episodes",
            path.display()
        )));
    }
    Ok(episodes)
}
