//! Deterministic decoder-only transformer inference.
//!
//! Pre-norm GPT-style blocks (layer norm → causal multi-head attention →
//! residual add; layer norm → GELU feed-forward → residual add) with learned
//! absolute positional embeddings and a byte-level tokenizer. Forward passes
//! can be split at any residual-stream boundary ([`forward_until`] /
//! [`forward_from`]), and decoding supports both KV-cached and
//! full-recompute paths so graft hooks can be validated against each other.
//!
//! All arithmetic is 32-bit and performed in a fixed order, so identical
//! inputs produce bit-identical outputs across runs and platforms.

mod decode;
mod forward;
mod tokenizer;

pub use decode::{
    decode, decode_uncached, nucleus_filter, DecodeCache, DecodeStrategy, DecodingConfig,
    GraftHook, Nucleus,
};
pub use forward::{embed, forward_from, forward_full, forward_until, ResidualState};
pub use tokenizer::{
    detokenize, detokenize_lossy, tokenize, tokenize_bytes, TokenSeq, BOS, EOS, MIN_VOCAB, PAD,
};

use alloc::string::String;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("forward pass requires a non-empty token sequence")]
    EmptySequence,
    #[error("layer {layer} out of range for depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("residual state is at layer {actual}, expected {expected}")]
    LayerMismatch { expected: usize, actual: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("prompt of {prompt} tokens plus {new} new tokens exceeds max_seq_len {max}")]
    ContextOverflow {
        prompt: usize,
        new: usize,
        max: usize,
    },
    #[error("probabilities are not a normalized distribution")]
    NotNormalized,
    #[error("invalid sampling parameter: {0}")]
    InvalidSampling(&'static str),
    #[error("residual state dimension {actual} does not match model dim {expected}")]
    DimMismatch { expected: usize, actual: usize },
}

/// Architecture hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub key_size: usize,
    pub ffn_size: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ln_epsilon: f32,
}

impl ModelConfig {
    /// Desk-scale configuration used throughout the test suite.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            key_size: 8,
            ffn_size: 64,
            model_dim: 32,
            vocab_size: MIN_VOCAB,
            max_seq_len: 512,
            ln_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |msg: String| Err(EngineError::InvalidConfig(msg));
        if self.n_layers < 1
            || self.n_heads < 1
            || self.key_size < 1
            || self.ffn_size < 1
            || self.model_dim < 1
            || self.max_seq_len < 1
        {
            return err("all counts must be at least 1".into());
        }
        if self.model_dim != self.n_heads * self.key_size {
            return err(alloc::format!(
                "model_dim {} != n_heads {} * key_size {}",
                self.model_dim,
                self.n_heads,
                self.key_size
            ));
        }
        if self.vocab_size < MIN_VOCAB {
            return err(alloc::format!(
                "vocab_size {} below minimum {MIN_VOCAB} (256 bytes + BOS/EOS/PAD)",
                self.vocab_size
            ));
        }
        if !self.ln_epsilon.is_finite() || self.ln_epsilon <= 0.0 {
            return err("ln_epsilon must be a positive finite real".into());
        }
        Ok(())
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: NormParams,
    pub w_up: Matrix,
    pub b_up: Vec<f32>,
    pub w_down: Matrix,
    pub b_down: Vec<f32>,
}

/// All parameter tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormParams,
    pub unembedding: Matrix,
}

impl ModelWeights {
    /// Checks every tensor shape against `config` and that every element is finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), EngineError> {
        let d = config.model_dim;
        let f = config.ffn_size;
        let v = config.vocab_size;
        let bad = |what: &str| {
            Err(EngineError::InvalidConfig(alloc::format!(
                "bad tensor: {what}"
            )))
        };

        let shape = |m: &Matrix, r: usize, c: usize| m.rows() == r && m.cols() == c;
        if !shape(&self.token_embedding, v, d) {
            return bad("token_embedding");
        }
        if !shape(&self.positional_embedding, config.max_seq_len, d) {
            return bad("positional_embedding");
        }
        if self.layers.len() != config.n_layers {
            return bad("layer count");
        }
        for lw in &self.layers {
            if lw.attn_norm.gain.len() != d || lw.attn_norm.bias.len() != d {
                return bad("attn_norm");
            }
            if !(shape(&lw.wq, d, d)
                && shape(&lw.wk, d, d)
                && shape(&lw.wv, d, d)
                && shape(&lw.wo, d, d))
            {
                return bad("attention projection");
            }
            if lw.ffn_norm.gain.len() != d || lw.ffn_norm.bias.len() != d {
                return bad("ffn_norm");
            }
            if !shape(&lw.w_up, d, f) || lw.b_up.len() != f {
                return bad("ffn up");
            }
            if !shape(&lw.w_down, f, d) || lw.b_down.len() != d {
                return bad("ffn down");
            }
        }
        if self.final_norm.gain.len() != d || self.final_norm.bias.len() != d {
            return bad("final_norm");
        }
        if !shape(&self.unembedding, d, v) {
            return bad("unembedding");
        }

        let finite = self.token_embedding.is_finite()
            && self.positional_embedding.is_finite()
            && self.unembedding.is_finite()
            && self
                .final_norm
                .gain
                .iter()
                .chain(&self.final_norm.bias)
                .all(|x| x.is_finite())
            && self.layers.iter().all(|lw| {
                lw.wq.is_finite()
                    && lw.wk.is_finite()
                    && lw.wv.is_finite()
                    && lw.wo.is_finite()
                    && lw.w_up.is_finite()
                    && lw.w_down.is_finite()
                    && lw
                        .attn_norm
                        .gain
                        .iter()
                        .chain(&lw.attn_norm.bias)
                        .chain(&lw.ffn_norm.gain)
                        .chain(&lw.ffn_norm.bias)
                        .chain(&lw.b_up)
                        .chain(&lw.b_down)
                        .all(|x| x.is_finite())
            });
        if !finite {
            return Err(EngineError::InvalidConfig(
                "non-finite weight element".into(),
            ));
        }
        Ok(())
    }
}

/// A validated (config, weights) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self, EngineError> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    /// Seeded random model; see [`init_random_model`].
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, EngineError> {
        let weights = init_random_model(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn depth(&self) -> usize {
        self.config.n_layers
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, EngineError> {
        tokenize(text, self.config.max_seq_len)
    }
}

fn fill_uniform(rng: &mut SeededRng, data: &mut [f32], bound: f32) {
    for x in data.iter_mut() {
        *x = rng.uniform_range(-bound, bound);
    }
}

fn xavier_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let bound = libm::sqrtf(6.0 / (rows + cols) as f32);
    let mut m = Matrix::zeros(rows, cols);
    fill_uniform(rng, m.data_mut(), bound);
    m
}

fn random_norm(rng: &mut SeededRng, dim: usize) -> NormParams {
    let mut gain = alloc::vec![0.0f32; dim];
    let mut bias = alloc::vec![0.0f32; dim];
    for g in gain.iter_mut() {
        *g = 1.0 + rng.uniform_range(-0.1, 0.1);
    }
    fill_uniform(rng, &mut bias, 0.1);
    NormParams { gain, bias }
}

/// Fills every tensor from a seeded generator: Xavier-uniform matrices,
/// norm gains near 1, small uniform biases. Tensors are drawn in a fixed
/// order, so equal seeds give bit-identical weights.
pub fn init_random_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights, EngineError> {
    config.validate()?;
    let d = config.model_dim;
    let f = config.ffn_size;
    let v = config.vocab_size;
    let mut rng = SeededRng::new(seed);

    let token_embedding = xavier_matrix(&mut rng, v, d);
    let positional_embedding = xavier_matrix(&mut rng, config.max_seq_len, d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn_norm = random_norm(&mut rng, d);
        let wq = xavier_matrix(&mut rng, d, d);
        let wk = xavier_matrix(&mut rng, d, d);
        let wv = xavier_matrix(&mut rng, d, d);
        let wo = xavier_matrix(&mut rng, d, d);
        let ffn_norm = random_norm(&mut rng, d);
        let w_up = xavier_matrix(&mut rng, d, f);
        let mut b_up = alloc::vec![0.0f32; f];
        fill_uniform(&mut rng, &mut b_up, 0.1);
        let w_down = xavier_matrix(&mut rng, f, d);
        let mut b_down = alloc::vec![0.0f32; d];
        fill_uniform(&mut rng, &mut b_down, 0.1);
        layers.push(LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_up,
            b_up,
            w_down,
            b_down,
        });
    }
    let final_norm = random_norm(&mut rng, d);
    let unembedding = xavier_matrix(&mut rng, d, v);

    Ok(ModelWeights {
        token_embedding,
        positional_embedding,
        layers,
        final_norm,
        unembedding,
    })
}

/// All-zero weights for a config; useful for degenerate-case tests.
pub fn zero_model(config: &ModelConfig) -> Result<Model, EngineError> {
    config.validate()?;
    let d = config.model_dim;
    let f = config.ffn_size;
    let v = config.vocab_size;
    let zeros_norm = || NormParams {
        gain: alloc::vec![0.0; d],
        bias: alloc::vec![0.0; d],
    };
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: zeros_norm(),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: zeros_norm(),
            w_up: Matrix::zeros(d, f),
            b_up: alloc::vec![0.0; f],
            w_down: Matrix::zeros(f, d),
            b_down: alloc::vec![0.0; d],
        })
        .collect();
    let weights = ModelWeights {
        token_embedding: Matrix::zeros(v, d),
        positional_embedding: Matrix::zeros(config.max_seq_len, d),
        layers,
        final_norm: zeros_norm(),
        unembedding: Matrix::zeros(d, v),
    };
    Model::new(*config, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_valid() {
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        let mut c = ModelConfig::toy();
        c.model_dim = 33;
        assert!(matches!(c.validate(), Err(EngineError::InvalidConfig(_))));

        let mut c = ModelConfig::toy();
        c.vocab_size = 258;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::toy();
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn random_model_deterministic_per_seed() {
        let config = ModelConfig::toy();
        let a = init_random_model(&config, 99).unwrap();
        let b = init_random_model(&config, 99).unwrap();
        assert_eq!(a, b);
        let c = init_random_model(&config, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_model_validates() {
        let config = ModelConfig::toy();
        let weights = init_random_model(&config, 1).unwrap();
        weights.validate(&config).unwrap();
    }

    #[test]
    fn weight_shape_mismatch_rejected() {
        let config = ModelConfig::toy();
        let mut weights = init_random_model(&config, 1).unwrap();
        weights.unembedding = Matrix::zeros(1, 1);
        assert!(weights.validate(&config).is_err());
    }

    #[test]
    fn non_finite_weight_rejected() {
        let config = ModelConfig::toy();
        let mut weights = init_random_model(&config, 1).unwrap();
        weights.token_embedding.data_mut()[0] = f32::NAN;
        assert!(weights.validate(&config).is_err());
    }
}
