//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by the
//! specials BOS/EOS/PAD. Every byte string maps bijectively onto a
//! BOS-prefixed token sequence, so exact-match scoring needs no vocabulary
//! file.

use alloc::string::String;
use alloc::vec::Vec;

use super::EngineError;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// 256 byte values plus BOS/EOS/PAD.
pub const MIN_VOCAB: usize = 259;

/// An ordered list of token ids in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[BOS]` followed by the raw bytes of `text`.
pub fn tokenize_bytes(bytes: &[u8], max_seq_len: usize) -> Result<TokenSeq, EngineError> {
    let len = bytes.len() + 1;
    if len > max_seq_len {
        return Err(EngineError::SequenceTooLong {
            len,
            max: max_seq_len,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as u32));
    Ok(TokenSeq { ids })
}

pub fn tokenize(text: &str, max_seq_len: usize) -> Result<TokenSeq, EngineError> {
    tokenize_bytes(text.as_bytes(), max_seq_len)
}

/// Inverse of [`tokenize_bytes`]: byte-valued ids are emitted, specials
/// (BOS/EOS/PAD) are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect()
}

/// Detokenizes into text, replacing invalid UTF-8 with U+FFFD.
pub fn detokenize_lossy(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}
