//! Splittable forward passes over the residual stream.
//!
//! `forward_until` stops after block `j` (with `j = 0` meaning embeddings
//! plus positional rows only) and `forward_from` resumes at block `j+1`;
//! their composition is bit-identical to a full pass because both paths run
//! the same per-row operations in the same order.

use alloc::vec;
use alloc::vec::Vec;

use super::{EngineError, LayerWeights, Model, NormParams, TokenSeq};
use crate::matrix::Matrix;

/// A t×D slice of the residual stream, tagged with the layer it sits after.
///
/// `layer_index = 0` is the post-embedding stream; `layer_index = l` is the
/// stream after block `l`'s residual addition.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    pub values: Matrix,
    pub layer_index: usize,
}

impl ResidualState {
    pub fn n_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn last_row(&self) -> &[f32] {
        self.values.row(self.values.rows() - 1)
    }
}

pub(super) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub(super) fn layer_norm(row: &[f32], params: &NormParams, eps: f32) -> Vec<f32> {
    let d = row.len();
    let mean = row.iter().sum::<f32>() / d as f32;
    let mut var = 0.0f32;
    for &x in row {
        let c = x - mean;
        var += c * c;
    }
    var /= d as f32;
    let denom = libm::sqrtf(var + eps);
    row.iter()
        .zip(params.gain.iter().zip(params.bias.iter()))
        .map(|(&x, (&g, &b))| g * (x - mean) / denom + b)
        .collect()
}

pub(super) fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + libm::tanhf(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

/// In-place softmax over a slice (max-subtracted for stability).
pub(super) fn softmax_in_place(xs: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `row (1×r) · w (r×c)`, accumulated in the same order as `Matrix::matmul`.
pub(super) fn row_matmul(row: &[f32], w: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; w.cols()];
    for (i, &xv) in row.iter().enumerate() {
        let wrow = w.row(i);
        for (o, &wv) in out.iter_mut().zip(wrow.iter()) {
            *o += xv * wv;
        }
    }
    out
}

/// Cached key/value rows for one layer (each row is a full D-wide vector,
/// heads occupying contiguous K-sized column groups).
pub(super) struct LayerKv {
    pub(super) k: Vec<f32>,
    pub(super) v: Vec<f32>,
    pub(super) positions: usize,
    dim: usize,
}

impl LayerKv {
    pub(super) fn new(dim: usize) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            positions: 0,
            dim,
        }
    }

    pub(super) fn push(&mut self, k_row: &[f32], v_row: &[f32]) {
        debug_assert_eq!(k_row.len(), self.dim);
        self.k.extend_from_slice(k_row);
        self.v.extend_from_slice(v_row);
        self.positions += 1;
    }

    pub(super) fn k_row(&self, pos: usize) -> &[f32] {
        &self.k[pos * self.dim..(pos + 1) * self.dim]
    }

    pub(super) fn v_row(&self, pos: usize) -> &[f32] {
        &self.v[pos * self.dim..(pos + 1) * self.dim]
    }
}

/// One block over a whole t×D matrix with causal attention.
///
/// When `cache` is provided the block's key/value rows are appended to it
/// (prefill). Row `i`'s output depends only on rows `0..=i`, and each row is
/// processed with the identical arithmetic used by [`block_step`], so cached
/// and recomputed paths agree bit-for-bit.
pub(super) fn block_forward(
    model: &Model,
    lw: &LayerWeights,
    x: &mut Matrix,
    cache: Option<&mut LayerKv>,
) {
    let cfg = &model.config;
    let t = x.rows();
    let d = cfg.model_dim;
    let heads = cfg.n_heads;
    let ks = cfg.key_size;
    let inv_sqrt_k = 1.0 / libm::sqrtf(ks as f32);

    let mut normed = Matrix::zeros(t, d);
    for i in 0..t {
        let n = layer_norm(x.row(i), &lw.attn_norm, cfg.ln_epsilon);
        normed.row_mut(i).copy_from_slice(&n);
    }
    let q = normed.matmul(&lw.wq);
    let k = normed.matmul(&lw.wk);
    let v = normed.matmul(&lw.wv);
    if let Some(c) = cache {
        for i in 0..t {
            c.push(k.row(i), v.row(i));
        }
    }

    let mut attn = Matrix::zeros(t, d);
    let mut scores = vec![0.0f32; t];
    for h in 0..heads {
        let lo = h * ks;
        let hi = lo + ks;
        for i in 0..t {
            let qh = &q.row(i)[lo..hi];
            for (jj, s) in scores.iter_mut().enumerate().take(i + 1) {
                *s = dot(qh, &k.row(jj)[lo..hi]) * inv_sqrt_k;
            }
            softmax_in_place(&mut scores[..=i]);
            let out = &mut attn.row_mut(i)[lo..hi];
            for (jj, &w) in scores.iter().enumerate().take(i + 1) {
                for (o, &vv) in out.iter_mut().zip(v.row(jj)[lo..hi].iter()) {
                    *o += w * vv;
                }
            }
        }
    }
    let proj = attn.matmul(&lw.wo);
    for (xv, pv) in x.data_mut().iter_mut().zip(proj.data().iter()) {
        *xv += pv;
    }

    for i in 0..t {
        let n = layer_norm(x.row(i), &lw.ffn_norm, cfg.ln_epsilon);
        let mut up = row_matmul(&n, &lw.w_up);
        for (u, &b) in up.iter_mut().zip(lw.b_up.iter()) {
            *u = gelu(*u + b);
        }
        let mut down = row_matmul(&up, &lw.w_down);
        for (dv, &b) in down.iter_mut().zip(lw.b_down.iter()) {
            *dv += b;
        }
        for (xv, dv) in x.row_mut(i).iter_mut().zip(down.iter()) {
            *xv += dv;
        }
    }
}

/// One block over a single new row at the next cached position.
pub(super) fn block_step(model: &Model, lw: &LayerWeights, row: &mut [f32], cache: &mut LayerKv) {
    let cfg = &model.config;
    let heads = cfg.n_heads;
    let ks = cfg.key_size;
    let inv_sqrt_k = 1.0 / libm::sqrtf(ks as f32);

    let normed = layer_norm(row, &lw.attn_norm, cfg.ln_epsilon);
    let q = row_matmul(&normed, &lw.wq);
    let k = row_matmul(&normed, &lw.wk);
    let v = row_matmul(&normed, &lw.wv);
    cache.push(&k, &v);
    let positions = cache.positions;

    let mut attn = vec![0.0f32; cfg.model_dim];
    let mut scores = vec![0.0f32; positions];
    for h in 0..heads {
        let lo = h * ks;
        let hi = lo + ks;
        let qh = &q[lo..hi];
        for (jj, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &cache.k_row(jj)[lo..hi]) * inv_sqrt_k;
        }
        softmax_in_place(&mut scores);
        let out = &mut attn[lo..hi];
        for (jj, &w) in scores.iter().enumerate() {
            for (o, &vv) in out.iter_mut().zip(cache.v_row(jj)[lo..hi].iter()) {
                *o += w * vv;
            }
        }
    }
    let proj = row_matmul(&attn, &lw.wo);
    for (xv, pv) in row.iter_mut().zip(proj.iter()) {
        *xv += pv;
    }

    let normed2 = layer_norm(row, &lw.ffn_norm, cfg.ln_epsilon);
    let mut up = row_matmul(&normed2, &lw.w_up);
    for (u, &b) in up.iter_mut().zip(lw.b_up.iter()) {
        *u = gelu(*u + b);
    }
    let mut down = row_matmul(&up, &lw.w_down);
    for (dv, &b) in down.iter_mut().zip(lw.b_down.iter()) {
        *dv += b;
    }
    for (xv, dv) in row.iter_mut().zip(down.iter()) {
        *xv += dv;
    }
}

fn validate_tokens(model: &Model, tokens: &TokenSeq) -> Result<(), EngineError> {
    if tokens.is_empty() {
        return Err(EngineError::EmptySequence);
    }
    if tokens.len() > model.config.max_seq_len {
        return Err(EngineError::SequenceTooLong {
            len: tokens.len(),
            max: model.config.max_seq_len,
        });
    }
    let vocab = model.config.vocab_size;
    for &id in &tokens.ids {
        if id as usize >= vocab {
            return Err(EngineError::TokenOutOfRange { id, vocab });
        }
    }
    Ok(())
}

pub(super) fn embed_row(model: &Model, id: u32, pos: usize) -> Vec<f32> {
    let tok = model.weights.token_embedding.row(id as usize);
    let p = model.weights.positional_embedding.row(pos);
    tok.iter().zip(p.iter()).map(|(&a, &b)| a + b).collect()
}

/// Token plus positional embeddings: the layer-0 residual stream.
pub fn embed(model: &Model, tokens: &TokenSeq) -> Result<ResidualState, EngineError> {
    validate_tokens(model, tokens)?;
    let t = tokens.len();
    let d = model.config.model_dim;
    let mut values = Matrix::zeros(t, d);
    for (i, &id) in tokens.ids.iter().enumerate() {
        values.row_mut(i).copy_from_slice(&embed_row(model, id, i));
    }
    Ok(ResidualState {
        values,
        layer_index: 0,
    })
}

/// Residual stream after block `j` (`j = 0`: embeddings only).
pub fn forward_until(
    model: &Model,
    tokens: &TokenSeq,
    j: usize,
) -> Result<ResidualState, EngineError> {
    let depth = model.config.n_layers;
    if j > depth {
        return Err(EngineError::LayerOutOfRange { layer: j, depth });
    }
    let mut state = embed(model, tokens)?;
    for lw in &model.weights.layers[..j] {
        block_forward(model, lw, &mut state.values, None);
    }
    state.layer_index = j;
    Ok(state)
}

pub(super) fn final_logits_row(model: &Model, row: &[f32]) -> Vec<f32> {
    let normed = layer_norm(row, &model.weights.final_norm, model.config.ln_epsilon);
    row_matmul(&normed, &model.weights.unembedding)
}

/// Applies blocks `j+1..=L`, the final norm, and the unembedding, yielding
/// a t×V logit matrix.
pub fn forward_from(model: &Model, state: &ResidualState, j: usize) -> Result<Matrix, EngineError> {
    let depth = model.config.n_layers;
    if j > depth {
        return Err(EngineError::LayerOutOfRange { layer: j, depth });
    }
    if state.layer_index != j {
        return Err(EngineError::LayerMismatch {
            expected: j,
            actual: state.layer_index,
        });
    }
    if state.dim() != model.config.model_dim {
        return Err(EngineError::DimMismatch {
            expected: model.config.model_dim,
            actual: state.dim(),
        });
    }
    let mut values = state.values.clone();
    for lw in &model.weights.layers[j..] {
        block_forward(model, lw, &mut values, None);
    }
    let t = values.rows();
    let mut logits = Matrix::zeros(t, model.config.vocab_size);
    for i in 0..t {
        logits
            .row_mut(i)
            .copy_from_slice(&final_logits_row(model, values.row(i)));
    }
    Ok(logits)
}

/// Full forward pass: t×V logits for every position.
pub fn forward_full(model: &Model, tokens: &TokenSeq) -> Result<Matrix, EngineError> {
    let state = forward_until(model, tokens, model.config.n_layers)?;
    forward_from(model, &state, model.config.n_layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{zero_model, ModelConfig};

    fn toy_model(seed: u64) -> Model {
        Model::random(ModelConfig::toy(), seed).unwrap()
    }

    #[test]
    fn layer_zero_is_embeddings_exactly() {
        let model = toy_model(1);
        let tokens = model.tokenize("hi").unwrap();
        let state = forward_until(&model, &tokens, 0).unwrap();
        for (i, &id) in tokens.ids.iter().enumerate() {
            let expected = embed_row(&model, id, i);
            assert_eq!(state.values.row(i), expected.as_slice());
        }
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let model = zero_model(&ModelConfig::toy()).unwrap();
        let tokens = model.tokenize("anything").unwrap();
        for j in 0..=model.depth() {
            let state = forward_until(&model, &tokens, j).unwrap();
            assert!(state.values.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn split_forward_composition_identity() {
        for seed in 0..3u64 {
            let model = toy_model(seed);
            let tokens = model.tokenize("composition").unwrap();
            let full = forward_full(&model, &tokens).unwrap();
            for j in 0..=model.depth() {
                let state = forward_until(&model, &tokens, j).unwrap();
                let composed = forward_from(&model, &state, j).unwrap();
                for (a, b) in composed.data().iter().zip(full.data().iter()) {
                    let denom = b.abs().max(1.0);
                    assert!(
                        (a - b).abs() / denom <= 1e-5,
                        "mismatch at j={j}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_from_at_depth_applies_only_head() {
        let model = toy_model(5);
        let tokens = model.tokenize("xy").unwrap();
        let state = forward_until(&model, &tokens, model.depth()).unwrap();
        let logits = forward_from(&model, &state, model.depth()).unwrap();
        let manual = final_logits_row(&model, state.last_row());
        assert_eq!(logits.row(logits.rows() - 1), manual.as_slice());
    }

    #[test]
    fn layer_mismatch_rejected() {
        let model = toy_model(2);
        let tokens = model.tokenize("x").unwrap();
        let state = forward_until(&model, &tokens, 1).unwrap();
        assert!(matches!(
            forward_from(&model, &state, 2),
            Err(EngineError::LayerMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let model = toy_model(2);
        let tokens = model.tokenize("x").unwrap();
        assert!(forward_until(&model, &tokens, model.depth() + 1).is_err());
    }

    #[test]
    fn random_model_forward_is_finite() {
        let model = toy_model(42);
        let tokens = model.tokenize("abcd").unwrap();
        let logits = forward_full(&model, &tokens).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn deterministic_forward() {
        let a = toy_model(7);
        let b = toy_model(7);
        let ta = a.tokenize("determinism").unwrap();
        let tb = b.tokenize("determinism").unwrap();
        assert_eq!(
            forward_full(&a, &ta).unwrap(),
            forward_full(&b, &tb).unwrap()
        );
    }
}
