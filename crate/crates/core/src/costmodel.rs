//! Analytical FLOP models for natural-language vs activation communication.
//!
//! Two closed-form counts are implemented exactly as formulated, in checked
//! 128-bit integer arithmetic so every result is an exact integer:
//!
//! * [`flops_nl`] — agent A decodes an M-token message (M forward passes at
//!   context P), then agent B decodes T output tokens at context P+M.
//! * [`flops_ac`] — agent A runs one partial forward pass up to layer k,
//!   B decodes T tokens at context P, plus the cost of the combine step
//!   (`D` for the non-learned functions, `2·d_A·d_B` for the learned map).
//!
//! Per-pass cost at context length `t` follows the Hoffmann-style accounting
//! `4tVD + L(8tDKH + 4t²KH + 3Ht² + 4tDF)`; only the leading embedding
//! coefficient differs between the two counts (see the formulas below,
//! which are kept verbatim).

use alloc::format;
use alloc::string::String;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Inputs to the two FLOP formulas.
///
/// Architecture counts (`L`, `H`, `K`, `F`, `D`, `V`) describe both agents
/// (the formulas assume a shared architecture); `P`/`M`/`T` are prompt,
/// message, and output token counts; `k` is the graft layer; `d_a`/`d_b`
/// feed the learned-map term when `map_used` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CostParams {
    pub n_layers: u64,
    pub n_heads: u64,
    pub key_size: u64,
    pub ffn_size: u64,
    pub model_dim: u64,
    pub vocab_size: u64,
    pub prompt_tokens: u64,
    pub message_tokens: u64,
    pub output_tokens: u64,
    pub graft_layer: u64,
    pub map_used: bool,
    pub d_a: u64,
    pub d_b: u64,
}

/// Exact FLOP totals plus derived ratios.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CostReport {
    pub nl_flops: u128,
    pub ac_flops: u128,
    /// `ac / nl`; `None` when `nl` is zero.
    pub ratio: Option<f64>,
    /// Totals divided by one reference-model forward pass at context P.
    pub normalized_nl: f64,
    pub normalized_ac: f64,
}

fn mul(a: u128, b: u128) -> u128 {
    a.checked_mul(b).expect("cost arithmetic overflow")
}

fn add(a: u128, b: u128) -> u128 {
    a.checked_add(b).expect("cost arithmetic overflow")
}

/// Per-layer cost of one forward pass at context length `t`:
/// `8tDKH + 4t²KH + 3Ht² + 4tDF`.
fn layer_flops(p: &CostParams, t: u128) -> u128 {
    let d = p.model_dim as u128;
    let k = p.key_size as u128;
    let h = p.n_heads as u128;
    let f = p.ffn_size as u128;
    let t2 = mul(t, t);
    let attn_proj = mul(8, mul(t, mul(d, mul(k, h))));
    let attn_scores = mul(4, mul(t2, mul(k, h)));
    let attn_softmax = mul(3, mul(h, t2));
    let ffn = mul(4, mul(t, mul(d, f)));
    add(add(attn_proj, attn_scores), add(attn_softmax, ffn))
}

/// Natural-language communication:
/// `M(4PVD + L·layer(P)) + T(4(P+M)VD + L·layer(P+M))`.
pub fn flops_nl(p: &CostParams) -> u128 {
    let d = p.model_dim as u128;
    let v = p.vocab_size as u128;
    let l = p.n_layers as u128;
    let pt = p.prompt_tokens as u128;
    let m = p.message_tokens as u128;
    let t = p.output_tokens as u128;
    let pm = add(pt, m);
    let send = mul(
        m,
        add(mul(4, mul(pt, mul(v, d))), mul(l, layer_flops(p, pt))),
    );
    let answer = mul(
        t,
        add(mul(4, mul(pm, mul(v, d))), mul(l, layer_flops(p, pm))),
    );
    add(send, answer)
}

/// Activation communication:
/// `2PVD + k·layer(P) + T(4PVD + L·layer(P)) + F(D)`
/// with `F(D) = D` for the non-learned combine functions and
/// `F(D) = 2·d_A·d_B` when the learned map is applied.
pub fn flops_ac(p: &CostParams) -> u128 {
    let d = p.model_dim as u128;
    let v = p.vocab_size as u128;
    let l = p.n_layers as u128;
    let pt = p.prompt_tokens as u128;
    let t = p.output_tokens as u128;
    let k = p.graft_layer as u128;
    debug_assert!(k <= l, "graft layer exceeds depth");
    let partial = add(mul(2, mul(pt, mul(v, d))), mul(k, layer_flops(p, pt)));
    let answer = mul(
        t,
        add(mul(4, mul(pt, mul(v, d))), mul(l, layer_flops(p, pt))),
    );
    let combine = if p.map_used {
        mul(2, mul(p.d_a as u128, p.d_b as u128))
    } else {
        d
    };
    add(add(partial, answer), combine)
}

/// Architecture-only view used for normalization denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ArchParams {
    pub n_layers: u64,
    pub n_heads: u64,
    pub key_size: u64,
    pub ffn_size: u64,
    pub model_dim: u64,
    pub vocab_size: u64,
}

impl ArchParams {
    /// Full [`CostParams`] with the given token counts and no grafting.
    pub fn with_tokens(self, prompt: u64, message: u64, output: u64) -> CostParams {
        CostParams {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            key_size: self.key_size,
            ffn_size: self.ffn_size,
            model_dim: self.model_dim,
            vocab_size: self.vocab_size,
            prompt_tokens: prompt,
            message_tokens: message,
            output_tokens: output,
            graft_layer: 0,
            map_used: false,
            d_a: self.model_dim,
            d_b: self.model_dim,
        }
    }
}

/// `out_tokens` forward passes at a fixed context length: the `M = 0`
/// reduction of the second summand of [`flops_nl`].
pub fn flops_single_forward(arch: &ArchParams, context_len: u64, out_tokens: u64) -> u128 {
    let p = arch.with_tokens(context_len, 0, out_tokens);
    flops_nl(&p)
}

/// Evaluates both formulas and normalizes against one forward pass of
/// `reference` at context length `prompt_tokens`.
pub fn cost_report(params: &CostParams, reference: &ArchParams) -> CostReport {
    let nl = flops_nl(params);
    let ac = flops_ac(params);
    let ratio = if nl > 0 {
        Some(ac as f64 / nl as f64)
    } else {
        None
    };
    let denom = flops_single_forward(reference, params.prompt_tokens, 1) as f64;
    CostReport {
        nl_flops: nl,
        ac_flops: ac,
        ratio,
        normalized_nl: nl as f64 / denom,
        normalized_ac: ac as f64 / denom,
    }
}

/// Well-known architecture presets for the `cost` command and tests.
pub fn preset(name: &str) -> Result<ArchParams, String> {
    match name {
        // desk-scale model used throughout the test suite
        "toy" => Ok(ArchParams {
            n_layers: 4,
            n_heads: 4,
            key_size: 8,
            ffn_size: 64,
            model_dim: 32,
            vocab_size: 259,
        }),
        "llama1b" => Ok(ArchParams {
            n_layers: 16,
            n_heads: 32,
            key_size: 64,
            ffn_size: 8192,
            model_dim: 2048,
            vocab_size: 128_256,
        }),
        "llama3b" => Ok(ArchParams {
            n_layers: 28,
            n_heads: 24,
            key_size: 128,
            ffn_size: 8192,
            model_dim: 3072,
            vocab_size: 128_256,
        }),
        "llama8b" => Ok(ArchParams {
            n_layers: 32,
            n_heads: 32,
            key_size: 128,
            ffn_size: 14_336,
            model_dim: 4096,
            vocab_size: 128_256,
        }),
        other => Err(format!("unknown architecture preset: {other}")),
    }
}
