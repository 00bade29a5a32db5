//! Autoregressive decoding with a KV cache, selection strategies, and the
//! prefill graft hook.
//!
//! [`decode`] runs the cached path: one prefill over the prompt (during
//! which an optional [`GraftHook`] edits the residual stream once, at its
//! configured layer), then one cached step per generated token.
//! [`decode_uncached`] recomputes the whole sequence every step and
//! re-applies the hook to the prompt rows each time; both paths produce
//! bit-identical streams, which the tests pin down.

use alloc::vec::Vec;

use super::forward::{block_forward, block_step, embed, embed_row, final_logits_row, LayerKv};
use super::{EngineError, Model, TokenSeq, EOS};
use crate::rng::SeededRng;

/// How the next token is selected from the logits.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DecodeStrategy {
    /// Argmax; ties broken by lowest token id.
    Greedy,
    /// Nucleus (top-p) sampling over the renormalized support.
    Nucleus { p: f32 },
    /// Softmax sampling at the given temperature over the full vocabulary.
    Temperature { temperature: f32 },
}

/// Decoding parameters. The seed drives all sampling draws; greedy decoding
/// consumes no randomness.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodingConfig {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        match self.strategy {
            DecodeStrategy::Greedy => Ok(()),
            DecodeStrategy::Nucleus { p } => {
                if p > 0.0 && p <= 1.0 {
                    Ok(())
                } else {
                    Err(EngineError::InvalidSampling("nucleus p must lie in (0, 1]"))
                }
            }
            DecodeStrategy::Temperature { temperature } => {
                if temperature > 0.0 && temperature.is_finite() {
                    Ok(())
                } else {
                    Err(EngineError::InvalidSampling("temperature must be positive"))
                }
            }
        }
    }
}

/// Edits the prompt's residual rows after the configured block during
/// prefill. The closure receives the flattened prompt rows (t_prompt × D).
pub struct GraftHook<'a> {
    pub layer: usize,
    pub edit: &'a dyn Fn(&mut [f32], usize, usize),
}

/// Per-layer cached key/value tensors for all processed positions.
pub struct DecodeCache {
    layers: Vec<LayerKv>,
    positions: usize,
}

impl DecodeCache {
    fn new(model: &Model) -> Self {
        let layers = (0..model.config.n_layers)
            .map(|_| LayerKv::new(model.config.model_dim))
            .collect();
        Self {
            layers,
            positions: 0,
        }
    }

    /// Number of token positions processed through the blocks.
    pub fn positions(&self) -> usize {
        self.positions
    }
}

/// Smallest descending-probability prefix with cumulative mass ≥ p,
/// renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    /// Token ids in descending-probability (then ascending-id) order.
    pub support: Vec<u32>,
    /// Renormalized probabilities aligned with `support`.
    pub probs: Vec<f32>,
}

/// Restricts a distribution to its nucleus.
///
/// The input must sum to 1 within 1e-6 with no negative entries. Tokens are
/// ordered by descending probability with ties broken by lowest id; the
/// prefix is cut as soon as its cumulative mass reaches `p`.
pub fn nucleus_filter(probabilities: &[f32], p: f32) -> Result<Nucleus, EngineError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EngineError::InvalidSampling("nucleus p must lie in (0, 1]"));
    }
    let mut sum = 0.0f32;
    for &q in probabilities {
        if !q.is_finite() || q < 0.0 {
            return Err(EngineError::NotNormalized);
        }
        sum += q;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(EngineError::NotNormalized);
    }

    let mut order: Vec<u32> = (0..probabilities.len() as u32).collect();
    // stable sort keeps ascending-id order among equal probabilities
    order.sort_by(|&a, &b| {
        probabilities[b as usize]
            .partial_cmp(&probabilities[a as usize])
            .expect("finite probabilities")
    });

    let mut support = Vec::new();
    let mut kept = Vec::new();
    let mut cum = 0.0f32;
    for &id in &order {
        let q = probabilities[id as usize];
        support.push(id);
        kept.push(q);
        cum += q;
        if cum >= p {
            break;
        }
    }
    for q in kept.iter_mut() {
        *q /= cum;
    }
    Ok(Nucleus {
        support,
        probs: kept,
    })
}

pub(super) fn softmax_vec(logits: &[f32]) -> Vec<f32> {
    let mut probs = logits.to_vec();
    super::forward::softmax_in_place(&mut probs);
    probs
}

fn greedy_pick(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_cumulative(ids: &[u32], probs: &[f32], u: f32) -> u32 {
    let mut cum = 0.0f32;
    for (&id, &q) in ids.iter().zip(probs.iter()) {
        cum += q;
        if u < cum {
            return id;
        }
    }
    *ids.last().expect("non-empty support")
}

fn select_token(
    logits: &[f32],
    strategy: DecodeStrategy,
    rng: &mut SeededRng,
) -> Result<u32, EngineError> {
    match strategy {
        DecodeStrategy::Greedy => Ok(greedy_pick(logits)),
        DecodeStrategy::Nucleus { p } => {
            let probs = softmax_vec(logits);
            let nucleus = nucleus_filter(&probs, p)?;
            let u = rng.uniform_f32();
            Ok(sample_cumulative(&nucleus.support, &nucleus.probs, u))
        }
        DecodeStrategy::Temperature { temperature } => {
            let scaled: Vec<f32> = logits.iter().map(|&x| x / temperature).collect();
            let probs = softmax_vec(&scaled);
            let ids: Vec<u32> = (0..probs.len() as u32).collect();
            let u = rng.uniform_f32();
            Ok(sample_cumulative(&ids, &probs, u))
        }
    }
}

fn validate_decode(
    model: &Model,
    prompt: &TokenSeq,
    cfg: &DecodingConfig,
    hook: Option<&GraftHook<'_>>,
) -> Result<(), EngineError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(EngineError::EmptySequence);
    }
    if prompt.len() + cfg.max_new_tokens > model.config.max_seq_len {
        return Err(EngineError::ContextOverflow {
            prompt: prompt.len(),
            new: cfg.max_new_tokens,
            max: model.config.max_seq_len,
        });
    }
    if let Some(h) = hook {
        if h.layer > model.config.n_layers {
            return Err(EngineError::LayerOutOfRange {
                layer: h.layer,
                depth: model.config.n_layers,
            });
        }
    }
    Ok(())
}

pub(super) fn decode_impl(
    model: &Model,
    prompt: &TokenSeq,
    cfg: &DecodingConfig,
    hook: Option<&GraftHook<'_>>,
) -> Result<(TokenSeq, DecodeCache), EngineError> {
    validate_decode(model, prompt, cfg, hook)?;
    let t_prompt = prompt.len();
    let d = model.config.model_dim;

    // prefill: whole prompt through every block, grafting once at the hook layer
    let mut state = embed(model, prompt)?;
    let mut cache = DecodeCache::new(model);
    let apply_hook = |values: &mut crate::matrix::Matrix, layer: usize| {
        if let Some(h) = hook {
            if h.layer == layer {
                (h.edit)(values.data_mut(), t_prompt, d);
            }
        }
    };
    apply_hook(&mut state.values, 0);
    for (idx, lw) in model.weights.layers.iter().enumerate() {
        block_forward(model, lw, &mut state.values, Some(&mut cache.layers[idx]));
        apply_hook(&mut state.values, idx + 1);
    }
    cache.positions = t_prompt;

    let mut rng = SeededRng::new(cfg.seed);
    let mut logits = final_logits_row(model, state.values.row(t_prompt - 1));
    let mut generated = Vec::new();

    while generated.len() < cfg.max_new_tokens {
        let tok = select_token(&logits, cfg.strategy, &mut rng)?;
        generated.push(tok);
        if tok == EOS || generated.len() == cfg.max_new_tokens {
            break;
        }
        let pos = t_prompt + generated.len() - 1;
        let mut row = embed_row(model, tok, pos);
        for (idx, lw) in model.weights.layers.iter().enumerate() {
            block_step(model, lw, &mut row, &mut cache.layers[idx]);
        }
        cache.positions += 1;
        debug_assert!(cache.layers.iter().all(|l| l.positions == cache.positions));
        logits = final_logits_row(model, &row);
    }

    Ok((TokenSeq { ids: generated }, cache))
}

/// KV-cached autoregressive decoding.
///
/// Generates until EOS or `max_new_tokens`. The optional hook is invoked
/// exactly once per block boundary match, on the prompt rows, during
/// prefill; its effect persists through the cache. Returns only the
/// generated tokens (including a terminal EOS when one is produced).
pub fn decode(
    model: &Model,
    prompt: &TokenSeq,
    cfg: &DecodingConfig,
    hook: Option<&GraftHook<'_>>,
) -> Result<TokenSeq, EngineError> {
    decode_impl(model, prompt, cfg, hook).map(|(tokens, _)| tokens)
}

/// Full-recompute decoding: every step re-runs the whole sequence through
/// every block and re-applies the hook to the prompt rows. Token-for-token
/// equal to [`decode`]; exists to validate the cached path.
pub fn decode_uncached(
    model: &Model,
    prompt: &TokenSeq,
    cfg: &DecodingConfig,
    hook: Option<&GraftHook<'_>>,
) -> Result<TokenSeq, EngineError> {
    validate_decode(model, prompt, cfg, hook)?;
    let t_prompt = prompt.len();
    let d = model.config.model_dim;

    let mut rng = SeededRng::new(cfg.seed);
    let mut seq = prompt.clone();
    let mut generated = Vec::new();

    while generated.len() < cfg.max_new_tokens {
        let mut state = embed(model, &seq)?;
        let apply_hook = |values: &mut crate::matrix::Matrix, layer: usize| {
            if let Some(h) = hook {
                if h.layer == layer {
                    (h.edit)(&mut values.data_mut()[..t_prompt * d], t_prompt, d);
                }
            }
        };
        apply_hook(&mut state.values, 0);
        for (idx, lw) in model.weights.layers.iter().enumerate() {
            block_forward(model, lw, &mut state.values, None);
            apply_hook(&mut state.values, idx + 1);
        }
        let logits = final_logits_row(model, state.values.row(seq.len() - 1));
        let tok = select_token(&logits, cfg.strategy, &mut rng)?;
        generated.push(tok);
        seq.ids.push(tok);
        if tok == EOS {
            break;
        }
    }

    Ok(TokenSeq { ids: generated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{zero_model, DecodeStrategy, ModelConfig};

    fn toy_model(seed: u64) -> Model {
        Model::random(ModelConfig::toy(), seed).unwrap()
    }

    #[test]
    fn zero_model_greedy_emits_token_zero() {
        let model = zero_model(&ModelConfig::toy()).unwrap();
        let prompt = model.tokenize("prompt").unwrap();
        let out = decode(&model, &prompt, &DecodingConfig::greedy(5), None).unwrap();
        assert_eq!(out.ids, alloc::vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn greedy_tie_break_lowest_id() {
        assert_eq!(greedy_pick(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(greedy_pick(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn nucleus_filter_hand_case() {
        let n = nucleus_filter(&[0.5, 0.4, 0.05, 0.05], 0.9).unwrap();
        assert_eq!(n.support, alloc::vec![0, 1]);
        assert!((n.probs[0] - 5.0 / 9.0).abs() < 1e-6);
        assert!((n.probs[1] - 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn nucleus_filter_full_simplex() {
        let probs = [0.25f32, 0.25, 0.25, 0.25];
        let n = nucleus_filter(&probs, 1.0).unwrap();
        assert_eq!(n.support.len(), 4);
        for (a, b) in n.probs.iter().zip(probs.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nucleus_filter_tiny_p_is_argmax() {
        let n = nucleus_filter(&[0.2, 0.5, 0.3], 0.01).unwrap();
        assert_eq!(n.support, alloc::vec![1]);
        assert_eq!(n.probs, alloc::vec![1.0]);
    }

    #[test]
    fn nucleus_filter_tie_order_is_ascending_id() {
        let n = nucleus_filter(&[0.25, 0.25, 0.25, 0.25], 0.6).unwrap();
        assert_eq!(n.support, alloc::vec![0, 1, 2]);
    }

    #[test]
    fn nucleus_filter_rejects_unnormalized() {
        assert!(matches!(
            nucleus_filter(&[0.5, 0.6], 0.9),
            Err(EngineError::NotNormalized)
        ));
        assert!(nucleus_filter(&[-0.1, 1.1], 0.9).is_err());
    }

    #[test]
    fn nucleus_decode_is_reproducible() {
        let model = toy_model(3);
        let prompt = model.tokenize("seeded").unwrap();
        let cfg = DecodingConfig {
            strategy: DecodeStrategy::Nucleus { p: 0.9 },
            max_new_tokens: 12,
            seed: 77,
        };
        let a = decode(&model, &prompt, &cfg, None).unwrap();
        let b = decode(&model, &prompt, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cached_equals_uncached_greedy_and_sampled() {
        for seed in 0..4u64 {
            let model = toy_model(seed);
            let prompt = model.tokenize("equivalence").unwrap();
            for strategy in [
                DecodeStrategy::Greedy,
                DecodeStrategy::Nucleus { p: 0.9 },
                DecodeStrategy::Temperature { temperature: 0.7 },
            ] {
                let cfg = DecodingConfig {
                    strategy,
                    max_new_tokens: 10,
                    seed: seed + 100,
                };
                let cached = decode(&model, &prompt, &cfg, None).unwrap();
                let uncached = decode_uncached(&model, &prompt, &cfg, None).unwrap();
                assert_eq!(cached, uncached);
            }
        }
    }

    #[test]
    fn cached_equals_uncached_with_all_token_graft() {
        use crate::grafting::{graft_rows, CombineKind, CombineSpec, GraftScope};

        let model_a = toy_model(60);
        let model_b = toy_model(61);
        let source = model_a.tokenize("a longer source prompt").unwrap();
        let h_a = crate::engine::forward_until(&model_a, &source, 3).unwrap();
        let spec = CombineSpec::new(CombineKind::Sum, GraftScope::AllTokens).unwrap();
        let edit = |data: &mut [f32], rows: usize, cols: usize| {
            graft_rows(data, rows, cols, &h_a, &spec).unwrap();
        };
        let hook = GraftHook {
            layer: 3,
            edit: &edit,
        };
        let prompt = model_b.tokenize("short prompt").unwrap();
        for strategy in [DecodeStrategy::Greedy, DecodeStrategy::Nucleus { p: 0.9 }] {
            let cfg = DecodingConfig {
                strategy,
                max_new_tokens: 8,
                seed: 5,
            };
            let cached = decode(&model_b, &prompt, &cfg, Some(&hook)).unwrap();
            let uncached = decode_uncached(&model_b, &prompt, &cfg, Some(&hook)).unwrap();
            assert_eq!(cached, uncached);
        }
    }

    #[test]
    fn nucleus_sampling_frequencies_match_distribution() {
        // fixed nucleus over 4 tokens: support {0, 1} renormalized to 5/9, 4/9
        let probs = [0.5f32, 0.4, 0.05, 0.05];
        let nucleus = nucleus_filter(&probs, 0.9).unwrap();
        let mut rng = SeededRng::new(321);
        let draws = 20_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let u = rng.uniform_f32();
            counts[sample_cumulative(&nucleus.support, &nucleus.probs, u) as usize] += 1;
        }
        assert_eq!(counts[2] + counts[3], 0);
        let f0 = counts[0] as f32 / draws as f32;
        let f1 = counts[1] as f32 / draws as f32;
        assert!((f0 - 5.0 / 9.0).abs() < 0.02, "token 0 frequency {f0}");
        assert!((f1 - 4.0 / 9.0).abs() < 0.02, "token 1 frequency {f1}");
    }

    #[test]
    fn cache_positions_track_processed_tokens() {
        let model = toy_model(9);
        let prompt = model.tokenize("cache").unwrap();
        let cfg = DecodingConfig::greedy(6);
        let (tokens, cache) = decode_impl(&model, &prompt, &cfg, None).unwrap();
        // the final generated token is never fed back through the blocks
        let expected = prompt.len() + tokens.len().saturating_sub(1);
        assert_eq!(cache.positions(), expected);
    }

    #[test]
    fn context_overflow_rejected() {
        let model = toy_model(1);
        let text = "a".repeat(500);
        let prompt = model.tokenize(&text).unwrap();
        let cfg = DecodingConfig::greedy(100);
        assert!(matches!(
            decode(&model, &prompt, &cfg, None),
            Err(EngineError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn hook_layer_out_of_range_rejected() {
        let model = toy_model(1);
        let prompt = model.tokenize("x").unwrap();
        let edit = |_: &mut [f32], _: usize, _: usize| {};
        let hook = GraftHook {
            layer: model.depth() + 1,
            edit: &edit,
        };
        assert!(decode(&model, &prompt, &DecodingConfig::greedy(2), Some(&hook)).is_err());
    }

    #[test]
    fn hook_runs_once_during_prefill_on_cached_path() {
        let model = toy_model(4);
        let prompt = model.tokenize("hook count").unwrap();
        let calls = core::cell::Cell::new(0usize);
        let edit = |_: &mut [f32], _: usize, _: usize| calls.set(calls.get() + 1);
        let hook = GraftHook {
            layer: 2,
            edit: &edit,
        };
        decode(&model, &prompt, &DecodingConfig::greedy(8), Some(&hook)).unwrap();
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn invalid_sampling_params_rejected() {
        let model = toy_model(1);
        let prompt = model.tokenize("x").unwrap();
        for strategy in [
            DecodeStrategy::Nucleus { p: 0.0 },
            DecodeStrategy::Nucleus { p: 1.5 },
            DecodeStrategy::Temperature { temperature: 0.0 },
        ] {
            let cfg = DecodingConfig {
                strategy,
                max_new_tokens: 1,
                seed: 0,
            };
            assert!(decode(&model, &prompt, &cfg, None).is_err());
        }
    }
}
