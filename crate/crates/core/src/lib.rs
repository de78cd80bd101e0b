//! Reinforced causal keyframe selection.
//!
//! This crate trains a small recurrent policy to pick the handful of video
//! frames that *cause* a question-answering oracle to produce the right
//! answer — not merely the frames that look similar to the question. The
//! pipeline:
//!
//! 1. [`pool`] builds a candidate frame pool by extracting the question's
//!    visual elements and keeping frames where a detector finds them.
//! 2. [`policy`] scores every pooled frame with a 3-layer LSTM plus an MLP
//!    head, producing per-frame selection probabilities.
//! 3. [`sampling`] draws frame subsets without replacement from those
//!    scores, draws *counterfactual* subsets from the inverted scores, and
//!    provides deterministic top-K selection for inference.
//! 4. [`rewards`] scores each sampled subset three ways: answer correctness,
//!    cycle consistency (question elements vs. answer-derived elements), and
//!    the KL shift between factual and counterfactual answer distributions.
//! 5. [`trainer`] runs group rollouts, mean-centers rewards into advantages,
//!    and applies exact REINFORCE gradients through the policy with Adam.
//!
//! Everything is verified against a deterministic synthetic environment
//! ([`env`]) with a planted causal frame set, and can instead be pointed at
//! any OpenAI-compatible chat-completions endpoint ([`oracle`]).
//!
//! Determinism is a hard contract: all randomness flows through
//! counter-based substreams ([`rng`]), so identical configs reproduce
//! byte-identical logs and checkpoints, including across checkpoint-resume.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod oracle;
pub mod optim;
pub mod policy;
pub mod pool;
pub mod rewards;
pub mod rng;
pub mod sampling;
pub mod trainer;
pub mod vecmath;

pub use error::{Error, Result};
