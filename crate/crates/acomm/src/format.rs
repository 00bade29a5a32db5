//! The ACWT weight file format.
//!
//! Layout: magic bytes `ACWT`, version `u32` little-endian (currently 1),
//! header length `u32` little-endian, a UTF-8 JSON header, then a payload
//! of little-endian IEEE-754 f32 values in row-major order. Tensor offsets
//! are relative to the payload start; tensors are contiguous and
//! non-overlapping in directory order.
//!
//! Two kinds of files share the container: full models (`kind = "model"`,
//! with the architecture config in the header) and trained activation maps
//! (`kind = "map"`, a single `map.W` tensor plus the digests of the model
//! pair it was trained for).

use std::fs;
use std::path::Path;

use acomm_core::engine::{LayerWeights, Model, ModelConfig, ModelWeights, NormParams};
use acomm_core::mapper::MapMatrix;
use acomm_core::matrix::Matrix;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"ACWT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not an ACWT file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported ACWT version {0} (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("tensor directory inconsistent: {0}")]
    BadDirectory(String),
    #[error("payload length {actual} does not match directory total {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("file holds a {0}, not the requested kind")]
    WrongKind(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(#[from] acomm_core::engine::EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<u64>,
    pub byte_offset: u64,
}

/// Provenance stamped into the header of every written file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcwtHeader {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_model_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_model_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_layer: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_layer: Option<u64>,
    #[serde(flatten)]
    pub provenance: Provenance,
}

fn push_tensor(
    tensors: &mut Vec<TensorEntry>,
    payload: &mut Vec<u8>,
    name: String,
    shape: Vec<u64>,
    data: &[f32],
) {
    debug_assert_eq!(shape.iter().product::<u64>() as usize, data.len());
    tensors.push(TensorEntry {
        name,
        shape,
        byte_offset: payload.len() as u64,
    });
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

/// Canonical tensor directory order for a model.
fn model_tensor_names(config: &ModelConfig) -> Vec<(String, Vec<u64>)> {
    let d = config.model_dim as u64;
    let f = config.ffn_size as u64;
    let v = config.vocab_size as u64;
    let mut names = vec![
        ("token_embedding".to_string(), vec![v, d]),
        (
            "positional_embedding".to_string(),
            vec![config.max_seq_len as u64, d],
        ),
    ];
    for i in 0..config.n_layers {
        names.push((format!("layers.{i}.attn_norm.gain"), vec![d]));
        names.push((format!("layers.{i}.attn_norm.bias"), vec![d]));
        names.push((format!("layers.{i}.wq"), vec![d, d]));
        names.push((format!("layers.{i}.wk"), vec![d, d]));
        names.push((format!("layers.{i}.wv"), vec![d, d]));
        names.push((format!("layers.{i}.wo"), vec![d, d]));
        names.push((format!("layers.{i}.ffn_norm.gain"), vec![d]));
        names.push((format!("layers.{i}.ffn_norm.bias"), vec![d]));
        names.push((format!("layers.{i}.w_up"), vec![d, f]));
        names.push((format!("layers.{i}.b_up"), vec![f]));
        names.push((format!("layers.{i}.w_down"), vec![f, d]));
        names.push((format!("layers.{i}.b_down"), vec![d]));
    }
    names.push(("final_norm.gain".to_string(), vec![d]));
    names.push(("final_norm.bias".to_string(), vec![d]));
    names.push(("unembedding".to_string(), vec![d, v]));
    names
}

fn assemble(header: &AcwtHeader, payload: &[u8]) -> Vec<u8> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(payload);
    out
}

/// Serializes a model into ACWT bytes.
pub fn encode_model(model: &Model, provenance: Provenance) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let w = &model.weights;
    let push_matrix =
        |tensors: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, name: String, m: &Matrix| {
            push_tensor(
                tensors,
                payload,
                name,
                vec![m.rows() as u64, m.cols() as u64],
                m.data(),
            );
        };
    push_matrix(
        &mut tensors,
        &mut payload,
        "token_embedding".into(),
        &w.token_embedding,
    );
    push_matrix(
        &mut tensors,
        &mut payload,
        "positional_embedding".into(),
        &w.positional_embedding,
    );
    for (i, lw) in w.layers.iter().enumerate() {
        let d = model.config.model_dim as u64;
        let f = model.config.ffn_size as u64;
        push_tensor(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.attn_norm.gain"),
            vec![d],
            &lw.attn_norm.gain,
        );
        push_tensor(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.attn_norm.bias"),
            vec![d],
            &lw.attn_norm.bias,
        );
        push_matrix(&mut tensors, &mut payload, format!("layers.{i}.wq"), &lw.wq);
        push_matrix(&mut tensors, &mut payload, format!("layers.{i}.wk"), &lw.wk);
        push_matrix(&mut tensors, &mut payload, format!("layers.{i}.wv"), &lw.wv);
        push_matrix(&mut tensors, &mut payload, format!("layers.{i}.wo"), &lw.wo);
        push_tensor(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.ffn_norm.gain"),
            vec![d],
            &lw.ffn_norm.gain,
        );
        push_tensor(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.ffn_norm.bias"),
            vec![d],
            &lw.ffn_norm.bias,
        );
        push_matrix(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.w_up"),
            &lw.w_up,
        );
        push_tensor(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.b_up"),
            vec![f],
            &lw.b_up,
        );
        push_matrix(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.w_down"),
            &lw.w_down,
        );
        push_tensor(
            &mut tensors,
            &mut payload,
            format!("layers.{i}.b_down"),
            vec![d],
            &lw.b_down,
        );
    }
    let d = model.config.model_dim as u64;
    push_tensor(
        &mut tensors,
        &mut payload,
        "final_norm.gain".into(),
        vec![d],
        &w.final_norm.gain,
    );
    push_tensor(
        &mut tensors,
        &mut payload,
        "final_norm.bias".into(),
        vec![d],
        &w.final_norm.bias,
    );
    push_matrix(
        &mut tensors,
        &mut payload,
        "unembedding".into(),
        &w.unembedding,
    );

    let header = AcwtHeader {
        kind: "model".into(),
        config: Some(model.config),
        tensors,
        source_model_digest: None,
        target_model_digest: None,
        source_layer: None,
        target_layer: None,
        provenance,
    };
    assemble(&header, &payload)
}

struct Reader<'a> {
    payload: &'a [u8],
    tensors: &'a [TensorEntry],
    cursor: usize,
    offset_check: u64,
}

impl<'a> Reader<'a> {
    fn take(&mut self, name: &str, shape: &[u64]) -> Result<Vec<f32>, FormatError> {
        let entry = self
            .tensors
            .get(self.cursor)
            .ok_or_else(|| FormatError::BadDirectory(format!("missing tensor {name}")))?;
        self.cursor += 1;
        if entry.name != name {
            return Err(FormatError::BadDirectory(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        if entry.shape != shape {
            return Err(FormatError::BadDirectory(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        if entry.byte_offset != self.offset_check {
            return Err(FormatError::BadDirectory(format!(
                "tensor {name} at offset {}, expected {} (tensors must be contiguous)",
                entry.byte_offset, self.offset_check
            )));
        }
        // header values are untrusted: overflow means a corrupt directory
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .ok_or_else(|| FormatError::BadDirectory(format!("tensor {name} shape overflows")))?;
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| FormatError::BadDirectory(format!("tensor {name} size overflows")))?;
        let start = usize::try_from(entry.byte_offset)
            .map_err(|_| FormatError::BadDirectory(format!("tensor {name} offset overflows")))?;
        let end = start
            .checked_add(bytes)
            .ok_or_else(|| FormatError::BadDirectory(format!("tensor {name} extent overflows")))?;
        if end > self.payload.len() {
            return Err(FormatError::Truncated("payload ends inside a tensor"));
        }
        self.offset_check += bytes as u64;
        Ok(self.payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn take_matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix, FormatError> {
        let data = self.take(name, &[rows as u64, cols as u64])?;
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.cursor != self.tensors.len() {
            return Err(FormatError::BadDirectory(format!(
                "{} unexpected trailing tensors",
                self.tensors.len() - self.cursor
            )));
        }
        if self.offset_check as usize != self.payload.len() {
            return Err(FormatError::PayloadLength {
                expected: self.offset_check as usize,
                actual: self.payload.len(),
            });
        }
        Ok(())
    }
}

fn split_container(bytes: &[u8]) -> Result<(AcwtHeader, &[u8]), FormatError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated("missing version/header length"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(FormatError::VersionMismatch(version));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .ok_or(FormatError::Truncated("header length overflow"))?;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated("header extends past end of file"));
    }
    let header: AcwtHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

/// Parses ACWT bytes into a validated model.
pub fn decode_model(bytes: &[u8]) -> Result<(Model, AcwtHeader), FormatError> {
    let (header, payload) = split_container(bytes)?;
    if header.kind != "model" {
        return Err(FormatError::WrongKind(header.kind.clone()));
    }
    let config = header
        .config
        .ok_or_else(|| FormatError::BadHeader("model file without config".into()))?;
    config.validate()?;

    let expected = model_tensor_names(&config);
    if header.tensors.len() != expected.len() {
        return Err(FormatError::BadDirectory(format!(
            "directory lists {} tensors, architecture needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut reader = Reader {
        payload,
        tensors: &header.tensors,
        cursor: 0,
        offset_check: 0,
    };
    let d = config.model_dim;
    let f = config.ffn_size;
    let v = config.vocab_size;

    let token_embedding = reader.take_matrix("token_embedding", v, d)?;
    let positional_embedding = reader.take_matrix("positional_embedding", config.max_seq_len, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let attn_norm = NormParams {
            gain: reader.take(&format!("layers.{i}.attn_norm.gain"), &[d as u64])?,
            bias: reader.take(&format!("layers.{i}.attn_norm.bias"), &[d as u64])?,
        };
        let wq = reader.take_matrix(&format!("layers.{i}.wq"), d, d)?;
        let wk = reader.take_matrix(&format!("layers.{i}.wk"), d, d)?;
        let wv = reader.take_matrix(&format!("layers.{i}.wv"), d, d)?;
        let wo = reader.take_matrix(&format!("layers.{i}.wo"), d, d)?;
        let ffn_norm = NormParams {
            gain: reader.take(&format!("layers.{i}.ffn_norm.gain"), &[d as u64])?,
            bias: reader.take(&format!("layers.{i}.ffn_norm.bias"), &[d as u64])?,
        };
        let w_up = reader.take_matrix(&format!("layers.{i}.w_up"), d, f)?;
        let b_up = reader.take(&format!("layers.{i}.b_up"), &[f as u64])?;
        let w_down = reader.take_matrix(&format!("layers.{i}.w_down"), f, d)?;
        let b_down = reader.take(&format!("layers.{i}.b_down"), &[d as u64])?;
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
    let final_norm = NormParams {
        gain: reader.take("final_norm.gain", &[d as u64])?,
        bias: reader.take("final_norm.bias", &[d as u64])?,
    };
    let unembedding = reader.take_matrix("unembedding", d, v)?;
    reader.finish()?;

    let weights = ModelWeights {
        token_embedding,
        positional_embedding,
        layers,
        final_norm,
        unembedding,
    };
    let model = Model::new(config, weights)?;
    Ok((model, header))
}

/// Pairing metadata for a trained map.
#[derive(Debug, Clone)]
pub struct MapMeta {
    pub source_model_digest: String,
    pub target_model_digest: String,
    pub source_layer: usize,
    pub target_layer: usize,
}

/// Serializes a trained map (single `map.W` tensor) into ACWT bytes.
pub fn encode_map(map: &MapMatrix, meta: &MapMeta, provenance: Provenance) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    push_tensor(
        &mut tensors,
        &mut payload,
        "map.W".into(),
        vec![map.rows() as u64, map.cols() as u64],
        map.values().data(),
    );
    let header = AcwtHeader {
        kind: "map".into(),
        config: None,
        tensors,
        source_model_digest: Some(meta.source_model_digest.clone()),
        target_model_digest: Some(meta.target_model_digest.clone()),
        source_layer: Some(meta.source_layer as u64),
        target_layer: Some(meta.target_layer as u64),
        provenance,
    };
    assemble(&header, &payload)
}

/// Parses ACWT bytes into a map and its pairing metadata.
pub fn decode_map(bytes: &[u8]) -> Result<(MapMatrix, AcwtHeader), FormatError> {
    let (header, payload) = split_container(bytes)?;
    if header.kind != "map" {
        return Err(FormatError::WrongKind(header.kind.clone()));
    }
    if header.tensors.len() != 1 {
        return Err(FormatError::BadDirectory(
            "map file must hold exactly one tensor".into(),
        ));
    }
    let entry = &header.tensors[0];
    if entry.shape.len() != 2 {
        return Err(FormatError::BadDirectory(
            "map.W must be two-dimensional".into(),
        ));
    }
    let (rows, cols) = (entry.shape[0] as usize, entry.shape[1] as usize);
    let mut reader = Reader {
        payload,
        tensors: &header.tensors,
        cursor: 0,
        offset_check: 0,
    };
    let data = reader.take("map.W", &[rows as u64, cols as u64])?;
    reader.finish()?;
    if !data.iter().all(|x| x.is_finite()) {
        return Err(FormatError::BadHeader(
            "map tensor contains non-finite values".into(),
        ));
    }
    Ok((MapMatrix::from_vec(rows, cols, data), header))
}

pub fn save_model(path: &Path, model: &Model, provenance: Provenance) -> Result<(), FormatError> {
    fs::write(path, encode_model(model, provenance))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, AcwtHeader), FormatError> {
    decode_model(&fs::read(path)?)
}

pub fn save_map(
    path: &Path,
    map: &MapMatrix,
    meta: &MapMeta,
    provenance: Provenance,
) -> Result<(), FormatError> {
    fs::write(path, encode_map(map, meta, provenance))?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<(MapMatrix, AcwtHeader), FormatError> {
    decode_map(&fs::read(path)?)
}
