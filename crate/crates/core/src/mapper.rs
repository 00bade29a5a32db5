//! The task-agnostic linear map between two models' activation spaces.
//!
//! For a model pair (A, B), `W` (d_B×d_A) is trained once by plain MSE
//! regression on paired final-token activations collected from both models
//! over the same sentences. Training uses Xavier-uniform init and Adam over
//! seeded shuffled mini-batches, so a (dataset, seed) pair always produces
//! bit-identical weights. Also hosts the activation-space similarity
//! diagnostic `‖YᵀX‖²_F / (‖X‖²_F ‖Y‖²_F)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{forward_until, EngineError, Model};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MapperError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("similarity is undefined for an all-zero matrix")]
    ZeroMatrix,
    #[error("engine failure while collecting pairs: {0}")]
    Engine(#[from] EngineError),
}

/// A d_B×d_A projection from A's activation space into B's.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatrix {
    values: Matrix,
}

impl MapMatrix {
    pub fn from_matrix(values: Matrix) -> Self {
        Self { values }
    }

    pub fn from_vec(d_b: usize, d_a: usize, data: Vec<f32>) -> Self {
        Self {
            values: Matrix::from_vec(d_b, d_a, data),
        }
    }

    /// Output dimension d_B.
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    /// Input dimension d_A.
    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// `W · a`.
    pub fn apply(&self, a: &[f32]) -> Vec<f32> {
        debug_assert_eq!(a.len(), self.cols());
        (0..self.rows())
            .map(|r| {
                let row = self.values.row(r);
                let mut acc = 0.0f32;
                for (w, x) in row.iter().zip(a.iter()) {
                    acc += w * x;
                }
                acc
            })
            .collect()
    }
}

/// Paired activations: row i holds A's vector (input) and B's vector
/// (target) for the same sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl PairDataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self, MapperError> {
        if inputs.rows() != targets.rows() {
            return Err(MapperError::ShapeMismatch("input/target row counts differ"));
        }
        if inputs.rows() == 0 {
            return Err(MapperError::EmptyDataset);
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim_a(&self) -> usize {
        self.inputs.cols()
    }

    pub fn dim_b(&self) -> usize {
        self.targets.cols()
    }
}

/// Runs both models over the same sentences and pairs their final-token
/// activations (A at layer k, B at layer j).
pub fn collect_pairs(
    model_a: &Model,
    model_b: &Model,
    sentences: &[&str],
    k: usize,
    j: usize,
) -> Result<PairDataset, MapperError> {
    if sentences.is_empty() {
        return Err(MapperError::EmptyDataset);
    }
    let mut inputs = Matrix::zeros(sentences.len(), model_a.dim());
    let mut targets = Matrix::zeros(sentences.len(), model_b.dim());
    for (i, sentence) in sentences.iter().enumerate() {
        let tokens_a = model_a.tokenize(sentence)?;
        let tokens_b = model_b.tokenize(sentence)?;
        let h_a = forward_until(model_a, &tokens_a, k)?;
        let h_b = forward_until(model_b, &tokens_b, j)?;
        inputs.row_mut(i).copy_from_slice(h_a.last_row());
        targets.row_mut(i).copy_from_slice(h_b.last_row());
    }
    PairDataset::new(inputs, targets)
}

/// `(1/N) Σ_i ‖z_i − W y_i‖²`.
pub fn mse_loss(map: &MapMatrix, dataset: &PairDataset) -> Result<f64, MapperError> {
    check_shapes(map, dataset)?;
    let n = dataset.len();
    let mut total = 0.0f64;
    for i in 0..n {
        let pred = map.apply(dataset.inputs.row(i));
        for (p, &z) in pred.iter().zip(dataset.targets.row(i).iter()) {
            let e = (*p - z) as f64;
            total += e * e;
        }
    }
    Ok(total / n as f64)
}

/// Analytic gradient of [`mse_loss`]: `(2/N) Σ_i (W y_i − z_i) y_iᵀ`.
pub fn loss_gradient(map: &MapMatrix, batch: &PairDataset) -> Result<Matrix, MapperError> {
    check_shapes(map, batch)?;
    let n = batch.len();
    let mut grad = Matrix::zeros(map.rows(), map.cols());
    let scale = 2.0 / n as f32;
    for i in 0..n {
        let y = batch.inputs.row(i);
        let pred = map.apply(y);
        for (r, (&p, &z)) in pred.iter().zip(batch.targets.row(i).iter()).enumerate() {
            let err = scale * (p - z);
            let grow = grad.row_mut(r);
            for (g, &yv) in grow.iter_mut().zip(y.iter()) {
                *g += err * yv;
            }
        }
    }
    Ok(grad)
}

fn check_shapes(map: &MapMatrix, dataset: &PairDataset) -> Result<(), MapperError> {
    if dataset.is_empty() {
        return Err(MapperError::EmptyDataset);
    }
    if map.cols() != dataset.dim_a() || map.rows() != dataset.dim_b() {
        return Err(MapperError::ShapeMismatch(
            "map shape does not match dataset dims",
        ));
    }
    Ok(())
}

/// Training hyperparameters. Defaults: 10 epochs, batch size 32, Adam with
/// learning rate 0.001 (β1 = 0.9, β2 = 0.999, ε = 1e-8, no weight decay).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.001,
        }
    }
}

/// Training trace: per-epoch mean batch loss plus the settings used.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub params: TrainParams,
    pub seed: u64,
}

fn gather_batch(dataset: &PairDataset, idx: &[usize]) -> PairDataset {
    let mut inputs = Matrix::zeros(idx.len(), dataset.dim_a());
    let mut targets = Matrix::zeros(idx.len(), dataset.dim_b());
    for (row, &i) in idx.iter().enumerate() {
        inputs.row_mut(row).copy_from_slice(dataset.inputs.row(i));
        targets.row_mut(row).copy_from_slice(dataset.targets.row(i));
    }
    PairDataset { inputs, targets }
}

/// Trains W by Adam over seeded shuffled mini-batches (the trailing
/// incomplete batch is used). Deterministic per seed; `epochs = 0` returns
/// the Xavier init untouched with an empty loss curve.
pub fn train_map(
    dataset: &PairDataset,
    params: TrainParams,
    seed: u64,
) -> Result<(MapMatrix, TrainReport), MapperError> {
    if dataset.is_empty() {
        return Err(MapperError::EmptyDataset);
    }
    if params.batch_size == 0 {
        return Err(MapperError::ShapeMismatch("batch_size must be positive"));
    }
    let d_a = dataset.dim_a();
    let d_b = dataset.dim_b();
    let mut rng = SeededRng::new(seed);

    // Xavier-uniform init: ±sqrt(6 / (d_A + d_B))
    let bound = libm::sqrtf(6.0 / (d_a + d_b) as f32);
    let mut w = Matrix::zeros(d_b, d_a);
    for x in w.data_mut() {
        *x = rng.uniform_range(-bound, bound);
    }

    let n_params = d_a * d_b;
    let mut m = vec![0.0f32; n_params];
    let mut v = vec![0.0f32; n_params];
    let (beta1, beta2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let mut step = 0u32;

    let mut epoch_losses = Vec::with_capacity(params.epochs);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();

    for _ in 0..params.epochs {
        rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in indices.chunks(params.batch_size) {
            let batch = gather_batch(dataset, chunk);
            let map = MapMatrix::from_matrix(w.clone());
            epoch_loss += mse_loss(&map, &batch)?;
            let grad = loss_gradient(&map, &batch)?;
            batches += 1;
            step += 1;
            let bc1 = 1.0 - libm::powf(beta1, step as f32);
            let bc2 = 1.0 - libm::powf(beta2, step as f32);
            for ((wv, &g), (mv, vv)) in w
                .data_mut()
                .iter_mut()
                .zip(grad.data().iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = beta1 * *mv + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *wv -= params.learning_rate * m_hat / (libm::sqrtf(v_hat) + eps);
            }
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    let map = MapMatrix::from_matrix(w);
    let final_loss = mse_loss(&map, dataset)?;
    let report = TrainReport {
        epoch_losses,
        final_loss,
        params,
        seed,
    };
    Ok((map, report))
}

/// Matrix analogue of squared cosine similarity between activation spaces:
/// `‖YᵀX‖²_F / (‖X‖²_F ‖Y‖²_F)` for X (N×d) and Y (N×d') over the same N
/// sentences. Bounded in [0, 1]; 1 exactly for aligned rank-1 matrices.
pub fn activation_similarity(x: &Matrix, y: &Matrix) -> Result<f64, MapperError> {
    if x.rows() != y.rows() {
        return Err(MapperError::ShapeMismatch(
            "similarity needs equal row counts",
        ));
    }
    let x_sq = x.frobenius_sq();
    let y_sq = y.frobenius_sq();
    if x_sq == 0.0 || y_sq == 0.0 {
        return Err(MapperError::ZeroMatrix);
    }
    // ‖YᵀX‖²_F without materializing the d'×d product
    let mut cross_sq = 0.0f64;
    for i in 0..y.cols() {
        for j in 0..x.cols() {
            let mut acc = 0.0f64;
            for n in 0..x.rows() {
                acc += (y.row(n)[i] as f64) * (x.row(n)[j] as f64);
            }
            cross_sq += acc * acc;
        }
    }
    Ok(cross_sq / (x_sq * y_sq))
}
