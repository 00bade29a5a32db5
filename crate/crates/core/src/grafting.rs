//! Combine functions and the activation-graft step.
//!
//! [`combine`] merges one of A's residual vectors into one of B's (sum,
//! mean, or replace, optionally preceded by a linear map into B's space);
//! [`graft`] applies it to whole residual states, either on the last token
//! or across all end-aligned tokens. When the dimensions differ, the
//! leading `d_B - min(d_A, d_B)` entries of B's vector are kept and only
//! the trailing entries are combined.

use alloc::string::String;
use alloc::vec::Vec;

use crate::engine::ResidualState;
use crate::mapper::MapMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraftError {
    #[error("replace over all tokens would discard B entirely")]
    InvalidScope,
    #[error("map of shape {map_rows}x{map_cols} cannot project a vector of length {input}")]
    MapShapeMismatch {
        map_rows: usize,
        map_cols: usize,
        input: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("graft layer mismatch: {0}")]
    LayerMismatch(String),
}

/// The three non-learned combine functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CombineKind {
    Sum,
    Mean,
    Replace,
}

impl core::fmt::Display for CombineKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CombineKind::Sum => write!(f, "sum"),
            CombineKind::Mean => write!(f, "mean"),
            CombineKind::Replace => write!(f, "replace"),
        }
    }
}

/// Which token positions of B receive the graft.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GraftScope {
    /// Only B's final token (the information carrier).
    #[cfg_attr(feature = "serde", serde(rename = "last"))]
    LastToken,
    /// Every token, end-aligned when the sequence lengths differ.
    #[cfg_attr(feature = "serde", serde(rename = "all"))]
    AllTokens,
}

/// The grafting function: kind, token scope, and optional pre-map applied
/// to A's vector(s) before combining.
#[derive(Debug, Clone, PartialEq)]
pub struct CombineSpec {
    pub kind: CombineKind,
    pub scope: GraftScope,
    pub pre_map: Option<MapMatrix>,
}

impl CombineSpec {
    pub fn new(kind: CombineKind, scope: GraftScope) -> Result<Self, GraftError> {
        Self::with_map(kind, scope, None)
    }

    pub fn with_map(
        kind: CombineKind,
        scope: GraftScope,
        pre_map: Option<MapMatrix>,
    ) -> Result<Self, GraftError> {
        if scope == GraftScope::AllTokens && kind == CombineKind::Replace {
            return Err(GraftError::InvalidScope);
        }
        Ok(Self {
            kind,
            scope,
            pre_map,
        })
    }
}

/// Graft placement: read A after block `source_layer` (k), edit B after
/// block `target_layer` (j).
#[derive(Debug, Clone, PartialEq)]
pub struct GraftConfig {
    pub source_layer: usize,
    pub target_layer: usize,
    pub combine: CombineSpec,
}

fn check_finite(values: &[f32], what: &'static str) -> Result<(), GraftError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GraftError::NonFinite(what))
    }
}

fn combine_equal_dim(kind: CombineKind, a: &[f32], b: &[f32], out: &mut [f32]) {
    match kind {
        CombineKind::Sum => {
            for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                *o = x + y;
            }
        }
        CombineKind::Mean => {
            for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                *o = 0.5 * (x + y);
            }
        }
        CombineKind::Replace => out.copy_from_slice(a),
    }
}

/// Merges A's vector into B's, yielding a vector of B's length.
///
/// With a pre-map, A is first projected into B's space and the equal-dim
/// forms apply. Without one and with `d_A != d_B`, B keeps its leading
/// `d_B - d` entries (`d = min(d_A, d_B)`) and the trailing `d` entries of
/// both vectors are combined.
pub fn combine(a: &[f32], b: &[f32], spec: &CombineSpec) -> Result<Vec<f32>, GraftError> {
    check_finite(a, "a")?;
    check_finite(b, "b")?;

    let mapped;
    let a = match &spec.pre_map {
        Some(map) => {
            if map.cols() != a.len() || map.rows() != b.len() {
                return Err(GraftError::MapShapeMismatch {
                    map_rows: map.rows(),
                    map_cols: map.cols(),
                    input: a.len(),
                });
            }
            mapped = map.apply(a);
            mapped.as_slice()
        }
        None => a,
    };

    let d_a = a.len();
    let d_b = b.len();
    let mut out = b.to_vec();
    let d = d_a.min(d_b);
    let b_lead = d_b - d;
    let a_lead = d_a - d;
    combine_equal_dim(spec.kind, &a[a_lead..], &b[b_lead..], &mut out[b_lead..]);
    Ok(out)
}

/// Applies the combine function to residual states.
///
/// LastToken: only B's final row changes. AllTokens: the last
/// `min(t_A, t_B)` rows of B are combined with A's end-aligned rows.
/// Every other row is bit-identical to the input.
pub fn graft(
    h_a: &ResidualState,
    h_b: &ResidualState,
    spec: &CombineSpec,
) -> Result<ResidualState, GraftError> {
    let mut out = h_b.clone();
    graft_rows(out.values.data_mut(), h_b.n_tokens(), h_b.dim(), h_a, spec)?;
    Ok(out)
}

/// In-place graft over a flattened rows×cols residual block; used both by
/// [`graft`] and by the engine's prefill hook.
pub fn graft_rows(
    data: &mut [f32],
    rows: usize,
    cols: usize,
    h_a: &ResidualState,
    spec: &CombineSpec,
) -> Result<(), GraftError> {
    debug_assert_eq!(data.len(), rows * cols);
    match spec.scope {
        GraftScope::LastToken => {
            let b_row = &data[(rows - 1) * cols..rows * cols];
            let merged = combine(h_a.last_row(), b_row, spec)?;
            data[(rows - 1) * cols..rows * cols].copy_from_slice(&merged);
        }
        GraftScope::AllTokens => {
            if spec.kind == CombineKind::Replace {
                return Err(GraftError::InvalidScope);
            }
            let t_a = h_a.n_tokens();
            let span = t_a.min(rows);
            for offset in 0..span {
                let b_idx = rows - span + offset;
                let a_idx = t_a - span + offset;
                let b_row = &data[b_idx * cols..(b_idx + 1) * cols];
                let merged = combine(h_a.values.row(a_idx), b_row, spec)?;
                data[b_idx * cols..(b_idx + 1) * cols].copy_from_slice(&merged);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn state(rows: usize, cols: usize, data: Vec<f32>, layer: usize) -> ResidualState {
        ResidualState {
            values: Matrix::from_vec(rows, cols, data),
            layer_index: layer,
        }
    }

    fn spec(kind: CombineKind) -> CombineSpec {
        CombineSpec::new(kind, GraftScope::LastToken).unwrap()
    }

    #[test]
    fn equal_dim_definitions() {
        assert_eq!(
            combine(&[1.0, 2.0], &[3.0, 4.0], &spec(CombineKind::Sum)).unwrap(),
            alloc::vec![4.0, 6.0]
        );
        assert_eq!(
            combine(&[2.0, 4.0], &[4.0, 8.0], &spec(CombineKind::Mean)).unwrap(),
            alloc::vec![3.0, 6.0]
        );
        assert_eq!(
            combine(&[1.0, 2.0], &[9.0, 9.0], &spec(CombineKind::Replace)).unwrap(),
            alloc::vec![1.0, 2.0]
        );
    }

    #[test]
    fn unequal_dim_sum_keeps_trailing_entries_of_a() {
        // d = 2, trailing entries of a are [2, 3]
        assert_eq!(
            combine(&[1.0, 2.0, 3.0], &[10.0, 20.0], &spec(CombineKind::Sum)).unwrap(),
            alloc::vec![12.0, 23.0]
        );
    }

    #[test]
    fn unequal_dim_replace_keeps_leading_entries_of_b() {
        // d = 2, leading max(d_B - d, 0) = 1 entry of b retained
        assert_eq!(
            combine(
                &[1.0, 2.0],
                &[10.0, 20.0, 30.0],
                &spec(CombineKind::Replace)
            )
            .unwrap(),
            alloc::vec![10.0, 1.0, 2.0]
        );
    }

    #[test]
    fn output_length_and_leading_preservation_grid() {
        let mut rng = crate::rng::SeededRng::new(31);
        for d_a in 1..=8usize {
            for d_b in 1..=8usize {
                let a: Vec<f32> = (0..d_a).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                let b: Vec<f32> = (0..d_b).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                for kind in [CombineKind::Sum, CombineKind::Mean, CombineKind::Replace] {
                    let out = combine(&a, &b, &spec(kind)).unwrap();
                    assert_eq!(out.len(), d_b);
                    let lead = d_b - d_a.min(d_b);
                    assert_eq!(&out[..lead], &b[..lead]);
                }
            }
        }
    }

    #[test]
    fn mean_idempotence_and_sum_with_zero() {
        let mut rng = crate::rng::SeededRng::new(8);
        for _ in 0..20 {
            let n = 1 + rng.index(16);
            let a: Vec<f32> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            assert_eq!(combine(&a, &a, &spec(CombineKind::Mean)).unwrap(), a);
            let zeros = alloc::vec![0.0f32; n];
            assert_eq!(combine(&zeros, &a, &spec(CombineKind::Sum)).unwrap(), a);
        }
    }

    #[test]
    fn pre_map_bypasses_footnote_path() {
        // 2x3 map projecting a onto b's 2-dim space
        let map = MapMatrix::from_vec(2, 3, alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let s =
            CombineSpec::with_map(CombineKind::Replace, GraftScope::LastToken, Some(map)).unwrap();
        let out = combine(&[5.0, 6.0, 7.0], &[1.0, 2.0], &s).unwrap();
        assert_eq!(out, alloc::vec![5.0, 6.0]);
    }

    #[test]
    fn pre_map_shape_mismatch_rejected() {
        let map = MapMatrix::from_vec(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]);
        let s = CombineSpec::with_map(CombineKind::Sum, GraftScope::LastToken, Some(map)).unwrap();
        assert!(matches!(
            combine(&[1.0, 2.0, 3.0], &[1.0, 2.0], &s),
            Err(GraftError::MapShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(combine(&[f32::NAN], &[1.0], &spec(CombineKind::Sum)).is_err());
        assert!(combine(&[1.0], &[f32::INFINITY], &spec(CombineKind::Sum)).is_err());
    }

    #[test]
    fn replace_all_tokens_rejected() {
        assert_eq!(
            CombineSpec::new(CombineKind::Replace, GraftScope::AllTokens),
            Err(GraftError::InvalidScope)
        );
    }

    #[test]
    fn last_token_graft_touches_only_final_row() {
        let h_a = state(2, 3, alloc::vec![9.0, 9.0, 9.0, 1.0, 2.0, 3.0], 2);
        let h_b = state(3, 3, alloc::vec![0.5; 9], 2);
        let out = graft(&h_a, &h_b, &spec(CombineKind::Replace)).unwrap();
        assert_eq!(out.values.row(0), h_b.values.row(0));
        assert_eq!(out.values.row(1), h_b.values.row(1));
        assert_eq!(out.values.row(2), &[1.0, 2.0, 3.0]);
        assert_eq!(out.layer_index, 2);
    }

    #[test]
    fn replace_identity_when_states_match() {
        let h = state(2, 4, (0..8).map(|x| x as f32).collect(), 1);
        let out = graft(&h, &h.clone(), &spec(CombineKind::Replace)).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn all_tokens_sum_end_aligned() {
        // t_A = 3, t_B = 5: B rows 0-1 unchanged, rows 2-4 summed with A rows 0-2
        let h_a = state(3, 2, alloc::vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], 0);
        let h_b = state(5, 2, alloc::vec![10.0; 10], 0);
        let s = CombineSpec::new(CombineKind::Sum, GraftScope::AllTokens).unwrap();
        let out = graft(&h_a, &h_b, &s).unwrap();
        assert_eq!(out.values.row(0), &[10.0, 10.0]);
        assert_eq!(out.values.row(1), &[10.0, 10.0]);
        assert_eq!(out.values.row(2), &[11.0, 11.0]);
        assert_eq!(out.values.row(3), &[12.0, 12.0]);
        assert_eq!(out.values.row(4), &[13.0, 13.0]);
    }

    #[test]
    fn all_tokens_with_longer_a_uses_a_tail() {
        let h_a = state(4, 1, alloc::vec![1.0, 2.0, 3.0, 4.0], 0);
        let h_b = state(2, 1, alloc::vec![10.0, 20.0], 0);
        let s = CombineSpec::new(CombineKind::Sum, GraftScope::AllTokens).unwrap();
        let out = graft(&h_a, &h_b, &s).unwrap();
        assert_eq!(out.values.data(), &[13.0, 24.0]);
    }

    #[test]
    fn graft_rows_no_mutation_outside_scope() {
        let mut rng = crate::rng::SeededRng::new(44);
        let h_a = state(
            3,
            4,
            (0..12).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            0,
        );
        let before: Vec<f32> = (0..20).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut data = before.clone();
        graft_rows(&mut data, 5, 4, &h_a, &spec(CombineKind::Sum)).unwrap();
        assert_eq!(&data[..16], &before[..16]);
        assert_ne!(&data[16..], &before[16..]);
    }
}
