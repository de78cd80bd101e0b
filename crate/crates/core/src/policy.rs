//! The frame-selection policy network and its exact gradients.
//!
//! Architecture: each pooled frame t contributes an input
//! `[frame_feature ‖ question_feature]` (dimension 2D) to a 3-layer LSTM
//! consumed in temporal order; a two-layer MLP head (affine → tanh → affine)
//! maps each step's top hidden state to a logit, and `σ_t = logistic(z_t)`
//! is frame t's selection probability.
//!
//! Parameters live in one flat `f64` vector whose layout ([`Layout`]) is
//! fixed and documented, which keeps the optimizer, checkpointing, and
//! finite-difference verification trivial. Gradients of the sequential
//! without-replacement selection log-probability are computed by exact
//! backpropagation through the weight normalization, the logistic, the head,
//! and the full recurrence (no truncation; pools are small).
//!
//! All arithmetic is f64. Checkpoints store f32 (see [`crate::checkpoint`]);
//! initialization draws values already on the f32 grid so a fresh-init
//! save/load round-trips bit-exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Number of stacked recurrent layers.
pub const LSTM_LAYERS: usize = 3;

/// Floor applied inside log-probability denominators, in normalized-weight
/// space (see [`crate::sampling::selection_log_prob`]).
pub const PROB_FLOOR: f64 = 1e-12;

/// Flat-parameter layout for given feature dimension D and hidden size H.
///
/// Order: for each layer l in 0..3 — `w_ih[l]` (4H × in_l, row-major, gate
/// rows ordered input/forget/candidate/output), `w_hh[l]` (4H × H), `bias[l]`
/// (4H) — then `head_w1` (H × H), `head_b1` (H), `head_w2` (H), `head_b2`
/// (1). Layer 0's input width is 2D; deeper layers take H.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Frame/question feature dimension D.
    pub d: usize,
    /// Hidden size H.
    pub h: usize,
    layer_offsets: [usize; LSTM_LAYERS],
    head_offset: usize,
    total: usize,
}

impl Layout {
    /// Computes the layout for (D, H).
    pub fn new(d: usize, h: usize) -> Layout {
        let mut layer_offsets = [0usize; LSTM_LAYERS];
        let mut off = 0;
        for (l, slot) in layer_offsets.iter_mut().enumerate() {
            *slot = off;
            let input = if l == 0 { 2 * d } else { h };
            off += 4 * h * input + 4 * h * h + 4 * h;
        }
        let head_offset = off;
        off += h * h + h + h + 1;
        Layout {
            d,
            h,
            layer_offsets,
            head_offset,
            total: off,
        }
    }

    /// Input width of layer `l`.
    pub fn input_dim(&self, l: usize) -> usize {
        if l == 0 {
            2 * self.d
        } else {
            self.h
        }
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.total
    }

    /// Always false; layouts describe at least the head bias.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of layer `l`'s input-to-hidden matrix (4H × in_l).
    pub fn w_ih(&self, l: usize) -> usize {
        self.layer_offsets[l]
    }

    /// Offset of layer `l`'s hidden-to-hidden matrix (4H × H).
    pub fn w_hh(&self, l: usize) -> usize {
        self.layer_offsets[l] + 4 * self.h * self.input_dim(l)
    }

    /// Offset of layer `l`'s bias (4H).
    pub fn bias(&self, l: usize) -> usize {
        self.w_hh(l) + 4 * self.h * self.h
    }

    /// Offset of the head's first affine matrix (H × H).
    pub fn head_w1(&self) -> usize {
        self.head_offset
    }

    /// Offset of the head's first bias (H).
    pub fn head_b1(&self) -> usize {
        self.head_offset + self.h * self.h
    }

    /// Offset of the head's output weights (H).
    pub fn head_w2(&self) -> usize {
        self.head_b1() + self.h
    }

    /// Offset of the head's output bias (scalar).
    pub fn head_b2(&self) -> usize {
        self.head_w2() + self.h
    }
}

/// Policy parameters: shape plus one flat value vector (layout above).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Hidden size H.
    pub hidden: usize,
    /// Flat parameter values.
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// The parameter layout for this shape.
    pub fn layout(&self) -> Layout {
        Layout::new(self.feature_dim, self.hidden)
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    /// True when the parameter vector is empty (never for valid params).
    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Rounds every parameter to the nearest f32 — the representation
    /// checkpoints store. Called before every checkpoint write so the live
    /// run and a later resume share bit-identical state.
    pub fn quantize_to_f32(&mut self) {
        for x in self.theta.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}

/// Gradient with the same flat layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// Flat gradient values, aligned with `PolicyParams::theta`.
    pub theta: Vec<f64>,
}

impl Gradient {
    /// All-zero gradient for `params`' shape.
    pub fn zeros_like(params: &PolicyParams) -> Gradient {
        Gradient {
            theta: vec![0.0; params.len()],
        }
    }

    /// Euclidean norm of the flat gradient.
    pub fn l2_norm(&self) -> f64 {
        self.theta.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// True when every component is finite.
    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|g| g.is_finite())
    }
}

/// Forward activations cached for exact backpropagation.
///
/// Indexing: step-major per layer, `[(l * t_len + t) * h + j]`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    t_len: usize,
    /// Layer-0 inputs, `[t * 2d + j]`: frame feature then question feature.
    x0: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    cell: Vec<f64>,
    tanh_c: Vec<f64>,
    hidden: Vec<f64>,
    /// Head tanh activations, `[t * h + j]`.
    head_a1: Vec<f64>,
}

/// Per-frame selection probabilities plus the caches to differentiate them.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// σ_i in (0, 1), one per pooled frame, temporal order.
    pub scores: Vec<f64>,
    cache: ForwardCache,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Freshly initialized parameters: weights uniform in [−1/√fan_in,
/// +1/√fan_in] drawn on the f32 grid, biases exactly zero. Deterministic
/// per seed.
pub fn init_policy(d: usize, h: usize, seed: u64) -> Result<PolicyParams> {
    if d == 0 || h == 0 {
        return Err(Error::Config(format!(
            "policy dimensions must be >= 1, got D={d}, H={h}"
        )));
    }
    let layout = Layout::new(d, h);
    let mut theta = vec![0.0; layout.len()];
    let mut rng = substream(seed, Stream::Init, &[]);

    let mut fill = |theta: &mut [f64], offset: usize, count: usize, fan_in: usize| {
        // f32 arithmetic keeps |w| <= bound and every value on the f32 grid.
        let bound = 1.0f32 / (fan_in as f32).sqrt();
        for slot in theta[offset..offset + count].iter_mut() {
            let r: f32 = rand::Rng::gen(&mut rng);
            *slot = (bound * (2.0 * r - 1.0)) as f64;
        }
    };

    for l in 0..LSTM_LAYERS {
        let input = layout.input_dim(l);
        fill(&mut theta, layout.w_ih(l), 4 * h * input, input);
        fill(&mut theta, layout.w_hh(l), 4 * h * h, h);
        // biases stay zero
    }
    fill(&mut theta, layout.head_w1(), h * h, h);
    fill(&mut theta, layout.head_w2(), h, h);

    Ok(PolicyParams {
        feature_dim: d,
        hidden: h,
        theta,
    })
}

/// Runs the policy over a pool: one σ per frame, with backprop caches.
pub fn policy_forward(
    params: &PolicyParams,
    frame_features: &[&[f64]],
    question_feature: &[f64],
) -> Result<PolicyOutput> {
    let d = params.feature_dim;
    let h = params.hidden;
    let t_len = frame_features.len();
    if t_len == 0 {
        return Err(Error::Input("policy_forward needs at least one frame".into()));
    }
    if question_feature.len() != d {
        return Err(Error::Input(format!(
            "question feature has dimension {}, expected {d}",
            question_feature.len()
        )));
    }
    for (t, f) in frame_features.iter().enumerate() {
        if f.len() != d {
            return Err(Error::Input(format!(
                "frame {t} feature has dimension {}, expected {d}",
                f.len()
            )));
        }
    }
    let layout = params.layout();
    debug_assert_eq!(params.len(), layout.len());

    let mut cache = ForwardCache {
        t_len,
        x0: vec![0.0; t_len * 2 * d],
        gate_i: vec![0.0; LSTM_LAYERS * t_len * h],
        gate_f: vec![0.0; LSTM_LAYERS * t_len * h],
        gate_g: vec![0.0; LSTM_LAYERS * t_len * h],
        gate_o: vec![0.0; LSTM_LAYERS * t_len * h],
        cell: vec![0.0; LSTM_LAYERS * t_len * h],
        tanh_c: vec![0.0; LSTM_LAYERS * t_len * h],
        hidden: vec![0.0; LSTM_LAYERS * t_len * h],
        head_a1: vec![0.0; t_len * h],
    };
    let mut scores = vec![0.0; t_len];
    let theta = &params.theta;
    let mut gates = vec![0.0; 4 * h];

    for t in 0..t_len {
        // Layer-0 input: [frame ‖ question].
        let x0 = &mut cache.x0[t * 2 * d..(t + 1) * 2 * d];
        x0[..d].copy_from_slice(frame_features[t]);
        x0[d..].copy_from_slice(question_feature);

        for l in 0..LSTM_LAYERS {
            let input_dim = layout.input_dim(l);
            let base = (l * t_len + t) * h;
            let prev = if t > 0 { (l * t_len + t - 1) * h } else { 0 }; // read only for t > 0

            let w_ih = &theta[layout.w_ih(l)..layout.w_ih(l) + 4 * h * input_dim];
            let w_hh = &theta[layout.w_hh(l)..layout.w_hh(l) + 4 * h * h];
            let bias = &theta[layout.bias(l)..layout.bias(l) + 4 * h];

            // gates = w_ih·x + w_hh·h_prev + b
            for (row, gate) in gates.iter_mut().enumerate() {
                let mut acc = bias[row];
                let w_row = &w_ih[row * input_dim..(row + 1) * input_dim];
                if l == 0 {
                    let x = &cache.x0[t * 2 * d..(t + 1) * 2 * d];
                    for (w, xv) in w_row.iter().zip(x) {
                        acc += w * xv;
                    }
                } else {
                    let below = ((l - 1) * t_len + t) * h;
                    let x = &cache.hidden[below..below + h];
                    for (w, xv) in w_row.iter().zip(x) {
                        acc += w * xv;
                    }
                }
                if t > 0 {
                    let hp = &cache.hidden[prev..prev + h];
                    let w_row = &w_hh[row * h..(row + 1) * h];
                    for (w, hv) in w_row.iter().zip(hp) {
                        acc += w * hv;
                    }
                }
                *gate = acc;
            }

            for j in 0..h {
                let i_g = sigmoid(gates[j]);
                let f_g = sigmoid(gates[h + j]);
                let g_g = gates[2 * h + j].tanh();
                let o_g = sigmoid(gates[3 * h + j]);
                let c_prev = if t > 0 { cache.cell[prev + j] } else { 0.0 };
                let c = f_g * c_prev + i_g * g_g;
                let tc = c.tanh();
                cache.gate_i[base + j] = i_g;
                cache.gate_f[base + j] = f_g;
                cache.gate_g[base + j] = g_g;
                cache.gate_o[base + j] = o_g;
                cache.cell[base + j] = c;
                cache.tanh_c[base + j] = tc;
                cache.hidden[base + j] = o_g * tc;
            }
        }

        // Head: z = w2 · tanh(W1 h_top + b1) + b2; σ = logistic(z).
        let top = ((LSTM_LAYERS - 1) * t_len + t) * h;
        let h_top = &cache.hidden[top..top + h];
        let w1 = &theta[layout.head_w1()..layout.head_w1() + h * h];
        let b1 = &theta[layout.head_b1()..layout.head_b1() + h];
        let w2 = &theta[layout.head_w2()..layout.head_w2() + h];
        let b2 = theta[layout.head_b2()];
        let mut z = b2;
        for j in 0..h {
            let mut pre = b1[j];
            let w_row = &w1[j * h..(j + 1) * h];
            for (w, hv) in w_row.iter().zip(h_top) {
                pre += w * hv;
            }
            let a = pre.tanh();
            cache.head_a1[t * h + j] = a;
            z += w2[j] * a;
        }
        scores[t] = sigmoid(z);
    }

    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical {
            episode: None,
            msg: "policy forward produced a non-finite score".into(),
        });
    }
    Ok(PolicyOutput { scores, cache })
}

/// ∂ log P(ordered selection) / ∂σ for the sequential without-replacement
/// draw: `log P = Σ_t [ln σ_{i_t} − ln R_t]` with `R_t` the sum of the
/// still-available scores at step t. Denominators are floored consistently
/// with the log-side floors so the result is always finite.
fn dlogp_dsigma(scores: &[f64], ordered: &[usize]) -> Result<Vec<f64>> {
    let n = scores.len();
    validate_selection(n, ordered)?;
    let s_sum: f64 = scores.iter().sum();
    let floor = PROB_FLOOR * s_sum.max(f64::MIN_POSITIVE);

    // inv_r_prefix[t] = Σ_{u<=t} 1/R_u
    let mut inv_r_prefix = Vec::with_capacity(ordered.len());
    let mut remaining = s_sum;
    let mut acc = 0.0;
    for &idx in ordered {
        acc += 1.0 / remaining.max(floor);
        inv_r_prefix.push(acc);
        remaining -= scores[idx];
    }
    let total_inv_r = *inv_r_prefix.last().expect("selection non-empty");

    let mut dsigma = vec![-total_inv_r; n];
    for (pos, &idx) in ordered.iter().enumerate() {
        dsigma[idx] = 1.0 / scores[idx].max(floor) - inv_r_prefix[pos];
    }
    Ok(dsigma)
}

fn validate_selection(n: usize, ordered: &[usize]) -> Result<()> {
    if ordered.is_empty() {
        return Err(Error::Input("selection is empty".into()));
    }
    if ordered.len() > n {
        return Err(Error::Input(format!(
            "selection of {} frames exceeds pool of {n}",
            ordered.len()
        )));
    }
    let mut seen = vec![false; n];
    for &idx in ordered {
        if idx >= n {
            return Err(Error::Input(format!("selection index {idx} outside pool of {n}")));
        }
        if seen[idx] {
            return Err(Error::Input(format!("duplicate selection index {idx}")));
        }
        seen[idx] = true;
    }
    Ok(())
}

/// Exact ∇_θ log π(ordered selection | pool, question), recomputing the
/// forward pass. See [`grad_log_prob_from`] to reuse an existing forward.
pub fn grad_log_prob(
    params: &PolicyParams,
    frame_features: &[&[f64]],
    question_feature: &[f64],
    ordered: &[usize],
) -> Result<Gradient> {
    let out = policy_forward(params, frame_features, question_feature)?;
    grad_log_prob_from(params, &out, ordered)
}

/// Exact ∇_θ log π(ordered selection) reusing a cached forward pass — the
/// trainer calls this once per group member over one shared forward.
pub fn grad_log_prob_from(
    params: &PolicyParams,
    output: &PolicyOutput,
    ordered: &[usize],
) -> Result<Gradient> {
    let cache = &output.cache;
    let t_len = cache.t_len;
    let h = params.hidden;
    let d = params.feature_dim;
    let layout = params.layout();
    let theta = &params.theta;

    let dsigma = dlogp_dsigma(&output.scores, ordered)?;
    let mut grad = vec![0.0; layout.len()];

    // Head backprop; collects dL/dh_top per step.
    let mut dh_top = vec![0.0; t_len * h];
    {
        let w1 = &theta[layout.head_w1()..layout.head_w1() + h * h];
        let w2 = &theta[layout.head_w2()..layout.head_w2() + h];
        for t in 0..t_len {
            let sigma = output.scores[t];
            let dz = dsigma[t] * sigma * (1.0 - sigma);
            if dz == 0.0 {
                continue;
            }
            let top = ((LSTM_LAYERS - 1) * t_len + t) * h;
            let h_top = &cache.hidden[top..top + h];
            let a1 = &cache.head_a1[t * h..(t + 1) * h];
            grad[layout.head_b2()] += dz;
            for j in 0..h {
                grad[layout.head_w2() + j] += dz * a1[j];
                let dpre = dz * w2[j] * (1.0 - a1[j] * a1[j]);
                grad[layout.head_b1() + j] += dpre;
                let w1_row = &w1[j * h..(j + 1) * h];
                let g_row = &mut grad[layout.head_w1() + j * h..layout.head_w1() + (j + 1) * h];
                let dh_row = &mut dh_top[t * h..(t + 1) * h];
                for k in 0..h {
                    g_row[k] += dpre * h_top[k];
                    dh_row[k] += dpre * w1_row[k];
                }
            }
        }
    }

    // Backpropagation through time, top layer down.
    let mut dh_above = dh_top;
    let mut d_gates = vec![0.0; 4 * h];
    for l in (0..LSTM_LAYERS).rev() {
        let input_dim = layout.input_dim(l);
        let w_ih = &theta[layout.w_ih(l)..layout.w_ih(l) + 4 * h * input_dim];
        let w_hh = &theta[layout.w_hh(l)..layout.w_hh(l) + 4 * h * h];
        let mut dh_below = vec![0.0; if l > 0 { t_len * h } else { 0 }];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];

        for t in (0..t_len).rev() {
            let base = (l * t_len + t) * h;
            let prev = if t > 0 { (l * t_len + t - 1) * h } else { 0 };
            for j in 0..h {
                let dh = dh_above[t * h + j] + dh_next[j];
                let i_g = cache.gate_i[base + j];
                let f_g = cache.gate_f[base + j];
                let g_g = cache.gate_g[base + j];
                let o_g = cache.gate_o[base + j];
                let tc = cache.tanh_c[base + j];
                let c_prev = if t > 0 { cache.cell[prev + j] } else { 0.0 };

                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                d_gates[j] = dc * g_g * i_g * (1.0 - i_g);
                d_gates[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                d_gates[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                d_gates[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }

            // Parameter gradients and downstream deltas.
            for j in 0..h {
                dh_next[j] = 0.0;
            }
            for row in 0..4 * h {
                let dg = d_gates[row];
                if dg == 0.0 {
                    continue;
                }
                grad[layout.bias(l) + row] += dg;
                let g_ih =
                    &mut grad[layout.w_ih(l) + row * input_dim..layout.w_ih(l) + (row + 1) * input_dim];
                if l == 0 {
                    let x = &cache.x0[t * 2 * d..(t + 1) * 2 * d];
                    for (g, xv) in g_ih.iter_mut().zip(x) {
                        *g += dg * xv;
                    }
                } else {
                    let below = ((l - 1) * t_len + t) * h;
                    let x = &cache.hidden[below..below + h];
                    for (g, xv) in g_ih.iter_mut().zip(x) {
                        *g += dg * xv;
                    }
                    let w_row = &w_ih[row * input_dim..(row + 1) * input_dim];
                    let db = &mut dh_below[t * h..(t + 1) * h];
                    for (slot, w) in db.iter_mut().zip(w_row) {
                        *slot += dg * w;
                    }
                }
                if t > 0 {
                    let hp = &cache.hidden[prev..prev + h];
                    let g_hh = &mut grad[layout.w_hh(l) + row * h..layout.w_hh(l) + (row + 1) * h];
                    for (g, hv) in g_hh.iter_mut().zip(hp) {
                        *g += dg * hv;
                    }
                    let w_row = &w_hh[row * h..(row + 1) * h];
                    for (slot, w) in dh_next.iter_mut().zip(w_row) {
                        *slot += dg * w;
                    }
                }
            }
        }
        dh_above = dh_below;
    }

    let gradient = Gradient { theta: grad };
    if !gradient.is_finite() {
        return Err(Error::Numerical {
            episode: None,
            msg: "gradient of selection log-probability is non-finite".into(),
        });
    }
    Ok(gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::selection_log_prob;

    fn features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, Stream::Episode, &[99]);
        (0..n)
            .map(|_| (0..d).map(|_| crate::rng::gauss(&mut rng)).collect())
            .collect()
    }

    fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|f| f.as_slice()).collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let a = init_policy(32, 128, 1).unwrap();
        let b = init_policy(32, 128, 1).unwrap();
        assert_eq!(a, b);
        let c = init_policy(32, 128, 2).unwrap();
        assert_ne!(a, c);

        let layout = a.layout();
        for l in 0..LSTM_LAYERS {
            let bias = &a.theta[layout.bias(l)..layout.bias(l) + 4 * a.hidden];
            assert!(bias.iter().all(|&b| b == 0.0));
            let bound_ih = 1.0 / (layout.input_dim(l) as f32).sqrt() as f64;
            let w_ih = &a.theta[layout.w_ih(l)..layout.w_ih(l) + 4 * a.hidden * layout.input_dim(l)];
            assert!(w_ih.iter().all(|w| w.abs() <= bound_ih));
        }
        assert_eq!(a.theta[layout.head_b2()], 0.0);
        let bound_h = 1.0 / (a.hidden as f32).sqrt() as f64;
        assert!(a.theta[layout.head_w2()..layout.head_w2() + a.hidden]
            .iter()
            .all(|w| w.abs() <= bound_h));
    }

    #[test]
    fn init_rejects_zero_dimensions() {
        assert!(matches!(init_policy(0, 8, 1), Err(Error::Config(_))));
        assert!(matches!(init_policy(8, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn all_zero_params_score_exactly_half() {
        let mut p = init_policy(4, 8, 0).unwrap();
        p.theta.iter_mut().for_each(|x| *x = 0.0);
        let f = features(5, 4, 0);
        let out = policy_forward(&p, &as_slices(&f), &f[0]).unwrap();
        assert!(out.scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn forward_shapes_and_open_interval() {
        let p = init_policy(8, 16, 3).unwrap();
        let f = features(6, 8, 3);
        let q = features(1, 8, 4).pop().unwrap();
        let out = policy_forward(&p, &as_slices(&f), &q).unwrap();
        assert_eq!(out.scores.len(), 6);
        assert!(out.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn dimension_mismatches_are_input_errors() {
        let p = init_policy(8, 16, 3).unwrap();
        let f = features(3, 7, 3); // wrong frame dim
        let q = vec![0.0; 8];
        assert!(matches!(
            policy_forward(&p, &as_slices(&f), &q),
            Err(Error::Input(_))
        ));
        let f8 = features(3, 8, 3);
        assert!(matches!(
            policy_forward(&p, &as_slices(&f8), &[0.0; 7]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            policy_forward(&p, &[], &q),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn selection_validation_rejects_duplicates_and_range() {
        let p = init_policy(4, 8, 5).unwrap();
        let f = features(4, 4, 5);
        let q = vec![0.1; 4];
        assert!(matches!(
            grad_log_prob(&p, &as_slices(&f), &q, &[1, 1]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            grad_log_prob(&p, &as_slices(&f), &q, &[9]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            grad_log_prob(&p, &as_slices(&f), &q, &[]),
            Err(Error::Input(_))
        ));
    }

    /// Central finite differences of the selection log-probability over
    /// every parameter — the independent oracle for the backward pass.
    fn fd_grad(
        params: &PolicyParams,
        f: &[Vec<f64>],
        q: &[f64],
        ordered: &[usize],
        eps: f64,
    ) -> Vec<f64> {
        let mut fd = vec![0.0; params.len()];
        let mut probe = params.clone();
        for i in 0..params.len() {
            probe.theta[i] = params.theta[i] + eps;
            let up = policy_forward(&probe, &as_slices(f), q).unwrap();
            let lp_up = selection_log_prob(&up.scores, ordered).unwrap();
            probe.theta[i] = params.theta[i] - eps;
            let dn = policy_forward(&probe, &as_slices(f), q).unwrap();
            let lp_dn = selection_log_prob(&dn.scores, ordered).unwrap();
            probe.theta[i] = params.theta[i];
            fd[i] = (lp_up - lp_dn) / (2.0 * eps);
        }
        fd
    }

    #[test]
    fn gradient_matches_finite_differences_on_small_cases() {
        for seed in 0..3u64 {
            let p = init_policy(4, 8, seed).unwrap();
            let f = features(5, 4, seed + 10);
            let q = features(1, 4, seed + 20).pop().unwrap();
            let ordered = [seed as usize % 5, (seed as usize + 2) % 5];
            let grad = grad_log_prob(&p, &as_slices(&f), &q, &ordered).unwrap();
            let fd = fd_grad(&p, &f, &q, &ordered, 1e-5);
            for i in 0..p.len() {
                let (a, b) = (grad.theta[i], fd[i]);
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel <= 1e-4, "seed {seed}, param {i}: bp {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn full_pool_descending_order_gradient_is_finite() {
        let p = init_policy(4, 8, 7).unwrap();
        let f = features(5, 4, 7);
        let q = vec![0.2; 4];
        let out = policy_forward(&p, &as_slices(&f), &q).unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| out.scores[b].partial_cmp(&out.scores[a]).unwrap());
        let grad = grad_log_prob_from(&p, &out, &order).unwrap();
        assert!(grad.is_finite());
    }

    #[test]
    fn cached_and_recomputed_gradients_agree() {
        let p = init_policy(6, 12, 9).unwrap();
        let f = features(7, 6, 9);
        let q = features(1, 6, 91).pop().unwrap();
        let out = policy_forward(&p, &as_slices(&f), &q).unwrap();
        let a = grad_log_prob_from(&p, &out, &[3, 0, 6]).unwrap();
        let b = grad_log_prob(&p, &as_slices(&f), &q, &[3, 0, 6]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantize_to_f32_is_idempotent() {
        let mut p = init_policy(4, 8, 2).unwrap();
        p.theta[0] += 1e-12; // push off the f32 grid
        let mut q1 = p.clone();
        q1.quantize_to_f32();
        let mut q2 = q1.clone();
        q2.quantize_to_f32();
        assert_eq!(q1, q2);
    }

    #[test]
    fn layout_offsets_tile_the_parameter_vector() {
        let layout = Layout::new(8, 16);
        let h = 16;
        assert_eq!(layout.w_hh(0), layout.w_ih(0) + 4 * h * 16);
        assert_eq!(layout.bias(0), layout.w_hh(0) + 4 * h * h);
        assert_eq!(layout.w_ih(1), layout.bias(0) + 4 * h);
        assert_eq!(layout.head_b2(), layout.len() - 1);
        let p = init_policy(8, 16, 0).unwrap();
        assert_eq!(p.len(), layout.len());
    }
}
