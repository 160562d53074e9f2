//! Multi-head attention and relative multi-head attention with segment
//! memory.
//!
//! The relative variant follows the Transformer-XL scheme: queries come from
//! the current segment only, keys and values from the memory-extended
//! segment, and attention scores decompose into four terms (content-content,
//! content-position, content bias, position bias). Relative keys are
//! materialized directly for every distance instead of using the shift
//! trick; at desk scale the O(T·(T+mem)) cost is irrelevant and the code
//! stays close to the equations.
//!
//! Scores are deliberately not scaled by 1/sqrt(d).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Fixed sinusoid encodings indexed by relative distance: row `p` holds
/// sin(p·f_i) in channel 2i and cos(p·f_i) in channel 2i+1 with
/// f_i = 10000^(-2i/D).
#[derive(Debug, Clone)]
pub struct SinusoidTable {
    pub phi: Tensor,
}

pub fn sinusoid_table(n_positions: usize, d: usize) -> Result<SinusoidTable> {
    if d % 2 != 0 {
        return Err(Error::contract(format!(
            "sinusoid_table: width must be even, got {}",
            d
        )));
    }
    let mut data = vec![0.0; n_positions * d];
    for p in 0..n_positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 * freq;
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(SinusoidTable { phi: Tensor::from_vec(vec![n_positions, d], data)? })
}

/// Row `t` may attend to every memory slot and to current-segment positions
/// up to and including `t`.
pub fn causal_mask(t_len: usize, mem_len: usize) -> Vec<Vec<bool>> {
    (0..t_len)
        .map(|t| (0..mem_len + t_len).map(|m| m <= mem_len + t).collect())
        .collect()
}

/// Projections and biases of one attention submodule.
///
/// `w_q/w_k/w_v/w_r` map D -> H·d (applied as row-vector matmuls), `w_o`
/// maps H·d -> D with bias `b_o`; `u`/`v` are the per-head content and
/// position bias vectors of shape [H, d].
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_r: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl AttentionParams {
    pub fn init(d_model: usize, heads: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        let hd = heads * head_dim;
        AttentionParams {
            heads,
            head_dim,
            w_q: Tensor::uniform_fan_in(vec![d_model, hd], d_model, rng),
            w_k: Tensor::uniform_fan_in(vec![d_model, hd], d_model, rng),
            w_v: Tensor::uniform_fan_in(vec![d_model, hd], d_model, rng),
            w_r: Tensor::uniform_fan_in(vec![d_model, hd], d_model, rng),
            u: Tensor::uniform_fan_in(vec![heads, head_dim], head_dim, rng),
            v: Tensor::uniform_fan_in(vec![heads, head_dim], head_dim, rng),
            w_o: Tensor::uniform_fan_in(vec![hd, d_model], hd, rng),
            b_o: Tensor::zeros(vec![d_model]),
        }
    }

    pub fn param_entries(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_r", &self.w_r),
            ("u", &self.u),
            ("v", &self.v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    pub fn param_entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_r", &mut self.w_r),
            ("u", &mut self.u),
            ("v", &mut self.v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }

    pub fn inject(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
            w_r: tape.param(&self.w_r),
            u: tape.param(&self.u),
            v: tape.param(&self.v),
            w_o: tape.param(&self.w_o),
            b_o: tape.param(&self.b_o),
        }
    }
}

/// Tape handles for one injected [`AttentionParams`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_r: Var,
    pub u: Var,
    pub v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    /// Handles in the same order as [`AttentionParams::param_entries`].
    pub fn param_vars(&self) -> Vec<Var> {
        vec![self.w_q, self.w_k, self.w_v, self.w_r, self.u, self.v, self.w_o, self.b_o]
    }
}

fn check_width(op: &'static str, tape: &Tape, x: Var, d_model: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != d_model {
        return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0, d_model] });
    }
    Ok(())
}

/// Attention submodule output Linear(Ȳ) of the plain variant: projections,
/// causally masked softmax and value contraction, without the surrounding
/// residual and layer norm.
pub fn multi_head_attention_core(tape: &mut Tape, e: Var, p: &AttentionVars) -> Result<Var> {
    let d_model = tape.shape(p.w_q)[0];
    check_width("multi_head_attention", tape, e, d_model)?;
    let t_len = tape.shape(e)[0];
    let q2 = tape.matmul(e, p.w_q)?;
    let k2 = tape.matmul(e, p.w_k)?;
    let v2 = tape.matmul(e, p.w_v)?;
    let q = tape.split_heads(q2, p.heads)?;
    let k = tape.split_heads(k2, p.heads)?;
    let v = tape.split_heads(v2, p.heads)?;
    let scores = tape.batched_contract_qk(q, k)?;
    let mask = causal_mask(t_len, 0);
    let w = tape.masked_softmax(scores, &mask)?;
    let y = tape.batched_contract_av(w, v)?;
    let merged = tape.merge_heads(y)?;
    let proj = tape.matmul(merged, p.w_o)?;
    tape.add_row(proj, p.b_o)
}

/// Full plain MHA step: core, residual add, layer norm (unit affine).
pub fn multi_head_attention(tape: &mut Tape, e: Var, params: &AttentionParams) -> Result<Var> {
    let vars = params.inject(tape);
    let core = multi_head_attention_core(tape, e, &vars)?;
    let d_model = tape.shape(e)[1];
    let sum = tape.add(e, core)?;
    let gain = tape.constant(Tensor::from_vec(vec![d_model], vec![1.0; d_model])?);
    let bias = tape.constant(Tensor::zeros(vec![d_model]));
    tape.layer_norm(sum, gain, bias, crate::blocks::LAYER_NORM_EPS)
}

/// Attention submodule output Linear(Ȳ) of the relative variant. `memory`,
/// when present, holds the valid memory rows (oldest first); the caller
/// decides whether the inputs are layer-normalized. Gradient isolation of
/// the memory is the caller's responsibility (pass a constant).
pub fn relative_attention_core(
    tape: &mut Tape,
    memory: Option<Var>,
    e: Var,
    p: &AttentionVars,
) -> Result<Var> {
    let d_model = tape.shape(p.w_q)[0];
    check_width("relative_multi_head_attention", tape, e, d_model)?;
    if let Some(m) = memory {
        check_width("relative_multi_head_attention", tape, m, d_model)?;
    }
    let t_len = tape.shape(e)[0];
    let mem_len = memory.map_or(0, |m| tape.shape(m)[0]);

    let e_tilde = match memory {
        Some(m) => tape.concat_rows(m, e)?,
        None => e,
    };
    let q2 = tape.matmul(e, p.w_q)?;
    let k2 = tape.matmul(e_tilde, p.w_k)?;
    let v2 = tape.matmul(e_tilde, p.w_v)?;
    let q = tape.split_heads(q2, p.heads)?;
    let k = tape.split_heads(k2, p.heads)?;
    let v = tape.split_heads(v2, p.heads)?;

    let table = sinusoid_table(mem_len + t_len, d_model)?;
    let phi = tape.constant(table.phi);
    let r2 = tape.matmul(phi, p.w_r)?;
    let r = tape.split_heads(r2, p.heads)?;

    let content = tape.batched_contract_qk(q, k)?;
    let position = tape.rel_scores_qr(q, r, mem_len)?;
    let content_bias = tape.bias_scores_uk(p.u, k, t_len)?;
    let position_bias = tape.bias_scores_vr(p.v, r, mem_len, t_len)?;
    let s1 = tape.add(content, position)?;
    let s2 = tape.add(content_bias, position_bias)?;
    let scores = tape.add(s1, s2)?;

    let mask = causal_mask(t_len, mem_len);
    let w = tape.masked_softmax(scores, &mask)?;
    let y = tape.batched_contract_av(w, v)?;
    let merged = tape.merge_heads(y)?;
    let proj = tape.matmul(merged, p.w_o)?;
    tape.add_row(proj, p.b_o)
}

/// Full relative MHA step: core on (memory, E), residual add, layer norm
/// (unit affine). Memory enters as a constant and never receives gradient.
pub fn relative_multi_head_attention(
    tape: &mut Tape,
    memory: Option<&Tensor>,
    e: Var,
    params: &AttentionParams,
) -> Result<Var> {
    let vars = params.inject(tape);
    let mem_var = match memory {
        Some(m) if m.shape[0] > 0 => Some(tape.constant(m.clone())),
        _ => None,
    };
    let core = relative_attention_core(tape, mem_var, e, &vars)?;
    let d_model = tape.shape(e)[1];
    let sum = tape.add(e, core)?;
    let gain = tape.constant(Tensor::from_vec(vec![d_model], vec![1.0; d_model])?);
    let bias = tape.constant(Tensor::zeros(vec![d_model]));
    tape.layer_norm(sum, gain, bias, crate::blocks::LAYER_NORM_EPS)
}

/// Per-layer cached activations from previous segments. The buffer always
/// has `capacity` rows per layer; only the trailing `valid` rows hold real
/// activations (the rest are zero and are never attended).
#[derive(Debug, Clone)]
pub struct MemoryState {
    layers: Vec<Tensor>,
    capacity: usize,
    valid: usize,
}

impl MemoryState {
    /// Fresh, empty memory: zero-filled buffers, nothing valid yet.
    pub fn zeros(n_layers: usize, capacity: usize, d_model: usize) -> Self {
        MemoryState {
            layers: (0..n_layers).map(|_| Tensor::zeros(vec![capacity, d_model])).collect(),
            capacity,
            valid: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn valid_len(&self) -> usize {
        self.valid
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    /// The valid trailing rows of layer `l` as a standalone tensor, or None
    /// when the memory is still empty.
    pub fn valid_rows(&self, l: usize) -> Option<Tensor> {
        if self.valid == 0 {
            return None;
        }
        let t = &self.layers[l];
        let d = t.shape[1];
        let start = (self.capacity - self.valid) * d;
        Tensor::from_vec(vec![self.valid, d], t.data[start..].to_vec()).ok()
    }
}

/// Slide the memory window: per layer, keep the last `capacity` rows of
/// `[old valid rows; segment rows]`. The result is detached from any tape.
pub fn update_memory(old: &MemoryState, segment_inputs: &[Tensor]) -> Result<MemoryState> {
    if segment_inputs.len() != old.layers.len() {
        return Err(Error::contract(format!(
            "update_memory: expected {} layer inputs, got {}",
            old.layers.len(),
            segment_inputs.len()
        )));
    }
    let t_len = segment_inputs.first().map_or(0, |t| t.shape[0]);
    let cap = old.capacity;
    let mut layers = Vec::with_capacity(old.layers.len());
    let new_valid = (old.valid + t_len).min(cap);
    for (l, seg) in segment_inputs.iter().enumerate() {
        let d = old.layers[l].shape[1];
        if seg.shape.len() != 2 || seg.shape[1] != d || seg.shape[0] != t_len {
            return Err(Error::ShapeMismatch {
                op: "update_memory",
                lhs: seg.shape.clone(),
                rhs: vec![t_len, d],
            });
        }
        // combined = old valid rows ++ segment rows, keep the last `cap`
        let old_rows = old.valid_rows(l);
        let mut combined: Vec<f64> = Vec::with_capacity((old.valid + t_len) * d);
        if let Some(o) = &old_rows {
            combined.extend_from_slice(&o.data);
        }
        combined.extend_from_slice(&seg.data);
        let total_rows = old.valid + t_len;
        let keep = total_rows.min(cap);
        let kept = &combined[(total_rows - keep) * d..];
        let mut data = vec![0.0; cap * d];
        data[(cap - keep) * d..].copy_from_slice(kept);
        layers.push(Tensor::from_vec(vec![cap, d], data)?);
    }
    Ok(MemoryState { layers, capacity: cap, valid: new_valid })
}

#[cfg(test)]
#[path = "attention_tests.rs"]
mod tests;
