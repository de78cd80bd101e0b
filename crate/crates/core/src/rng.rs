//! Deterministic, counter-based random streams.
//!
//! Every random draw in this crate comes from a ChaCha stream seeded by
//! mixing a master seed with a short list of integer tags — typically
//! `(purpose, episode, member)`. Streams are a pure function of those tags,
//! never of call order, so skipping a stage, replaying an episode, or
//! resuming from a checkpoint reproduces the exact same draws. This is what
//! makes byte-identical training runs and checkpoint-resume possible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. Centralized so two call sites can never
/// collide on the same stream by accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic episode construction (frame layout, options, ground truth).
    Episode,
    /// Element embedding vectors of the synthetic universe.
    ElementVector,
    /// Policy parameter initialization.
    Init,
    /// Policy subset draws during training.
    PolicySample,
    /// Counterfactual subset draws during training.
    CounterfactualSample,
    /// Counterfactual subset draws during evaluation.
    EvalCounterfactual,
    /// Held-out instance generation offsets.
    HeldOut,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Episode => 1,
            Stream::ElementVector => 2,
            Stream::Init => 3,
            Stream::PolicySample => 4,
            Stream::CounterfactualSample => 5,
            Stream::EvalCounterfactual => 6,
            Stream::HeldOut => 7,
        }
    }
}

/// One round of the splitmix64 output function — a cheap, well-mixed
/// permutation used to fold tags into the seed state.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 256-bit ChaCha seed from a master seed and a tag list.
///
/// The tag count is absorbed first so `[a]` and `[a, 0]` cannot collide.
pub fn derive_seed(master: u64, tags: &[u64]) -> [u8; 32] {
    let mut state = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    state = splitmix64(state ^ tags.len() as u64);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    seed
}

/// A ChaCha stream for `(master, purpose, tags...)`.
pub fn substream(master: u64, purpose: Stream, tags: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(tags.len() + 1);
    all.push(purpose.tag());
    all.extend_from_slice(tags);
    ChaCha8Rng::from_seed(derive_seed(master, &all))
}

/// Standard-normal draw via Box–Muller. Deterministic given the stream.
pub fn gauss(rng: &mut impl Rng) -> f64 {
    // gen::<f64>() is in [0, 1); flip so the log argument is in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
