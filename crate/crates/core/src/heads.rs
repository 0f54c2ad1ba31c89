//! Trainable heads over frozen embeddings and their Adam optimiser.
//!
//! The clustering head is a single linear layer followed by a row softmax. The
//! projection head is `relu(E W1 + b1) W2 + b2` with hidden width `D1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, softmax_rows, DenseMatrix};

/// Head weights. Gradients and Adam moments use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub gp_weight: DenseMatrix,
    pub gp_bias: Vec<f64>,
    pub gz_weight1: DenseMatrix,
    pub gz_bias1: Vec<f64>,
    pub gz_weight2: DenseMatrix,
    pub gz_bias2: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 6] = [
    "gp_weight",
    "gp_bias",
    "gz_weight1",
    "gz_bias1",
    "gz_weight2",
    "gz_bias2",
];

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    DenseMatrix::from_vec_unchecked(rows, cols, data)
}

fn bias(fan_in: usize, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let limit = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-limit..=limit)).collect()
}

impl HeadParams {
    /// Glorot-uniform weights; biases uniform in `±1/sqrt(fan_in)` so a row whose
    /// hidden units are all inactive still has a nonzero projection.
    pub fn init(input_dim: usize, classes: usize, proj_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || classes == 0 || proj_dim == 0 {
            return Err(Error::InvalidArgument("head dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        Ok(Self {
            gp_weight: glorot(input_dim, classes, &mut rng),
            gp_bias: bias(input_dim, classes, &mut rng),
            gz_weight1: glorot(input_dim, input_dim, &mut rng),
            gz_bias1: bias(input_dim, input_dim, &mut rng),
            gz_weight2: glorot(input_dim, proj_dim, &mut rng),
            gz_bias2: bias(input_dim, proj_dim, &mut rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            gp_weight: z(&self.gp_weight),
            gp_bias: vec![0.0; self.gp_bias.len()],
            gz_weight1: z(&self.gz_weight1),
            gz_bias1: vec![0.0; self.gz_bias1.len()],
            gz_weight2: z(&self.gz_weight2),
            gz_bias2: vec![0.0; self.gz_bias2.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gp_weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.gp_weight.cols()
    }

    pub fn proj_dim(&self) -> usize {
        self.gz_weight2.cols()
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.gp_weight.as_slice(),
            &self.gp_bias,
            self.gz_weight1.as_slice(),
            &self.gz_bias1,
            self.gz_weight2.as_slice(),
            &self.gz_bias2,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.gp_weight.data_mut(),
            &mut self.gp_bias,
            self.gz_weight1.data_mut(),
            &mut self.gz_bias1,
            self.gz_weight2.data_mut(),
            &mut self.gz_bias2,
        ]
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|(a, b)| a.len() == b.len())
            && self.gp_weight.shape() == other.gp_weight.shape()
            && self.gz_weight1.shape() == other.gz_weight1.shape()
            && self.gz_weight2.shape() == other.gz_weight2.shape()
    }

    fn check_input(&self, e: &DenseMatrix) -> Result<()> {
        if e.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "embeddings have {} columns, heads expect {}",
                e.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Pre-softmax scores `E W + b` of the clustering head.
pub fn clustering_logits(e: &DenseMatrix, params: &HeadParams) -> Result<DenseMatrix> {
    params.check_input(e)?;
    e.matmul(&params.gp_weight)?.add_row_broadcast(&params.gp_bias)
}

/// Cluster probabilities `P = softmax(E W + b)`.
pub fn forward_clustering(e: &DenseMatrix, params: &HeadParams) -> Result<DenseMatrix> {
    softmax_rows(&clustering_logits(e, params)?)
}

/// Intermediate values of the projection head needed for backprop.
#[derive(Clone, Debug)]
pub struct ProjectionPass {
    /// Post-ReLU hidden layer.
    pub hidden: DenseMatrix,
    pub output: DenseMatrix,
}

pub fn projection_pass(e: &DenseMatrix, params: &HeadParams) -> Result<ProjectionPass> {
    params.check_input(e)?;
    let hidden = e
        .matmul(&params.gz_weight1)?
        .add_row_broadcast(&params.gz_bias1)?
        .map(|v| v.max(0.0))?;
    let output = hidden
        .matmul(&params.gz_weight2)?
        .add_row_broadcast(&params.gz_bias2)?;
    Ok(ProjectionPass { hidden, output })
}

/// Projections `Z = relu(E W1 + b1) W2 + b2`.
pub fn forward_projection(e: &DenseMatrix, params: &HeadParams) -> Result<DenseMatrix> {
    Ok(projection_pass(e, params)?.output)
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates clustering-head gradients given the gradient at the logits.
pub fn clustering_backward(e: &DenseMatrix, d_logits: &DenseMatrix, grads: &mut HeadParams) -> Result<()> {
    if d_logits.shape() != (e.rows(), grads.classes()) {
        return Err(Error::Shape("logit gradient does not match the batch".into()));
    }
    add_assign(grads.gp_weight.data_mut(), e.t_matmul(d_logits)?.as_slice());
    add_assign(&mut grads.gp_bias, &d_logits.column_sums());
    Ok(())
}

/// Accumulates projection-head gradients given the gradient at `Z`.
pub fn projection_backward(
    e: &DenseMatrix,
    pass: &ProjectionPass,
    params: &HeadParams,
    d_out: &DenseMatrix,
    grads: &mut HeadParams,
) -> Result<()> {
    if d_out.shape() != pass.output.shape() {
        return Err(Error::Shape("projection gradient does not match the batch".into()));
    }
    add_assign(grads.gz_weight2.data_mut(), pass.hidden.t_matmul(d_out)?.as_slice());
    add_assign(&mut grads.gz_bias2, &d_out.column_sums());
    let mut d_hidden = d_out.matmul_t(&params.gz_weight2)?;
    for (d, &h) in d_hidden.data_mut().iter_mut().zip(pass.hidden.as_slice()) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    add_assign(grads.gz_weight1.data_mut(), e.t_matmul(&d_hidden)?.as_slice());
    add_assign(&mut grads.gz_bias1, &d_hidden.column_sums());
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: HeadParams,
    pub second_moment: HeadParams,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &HeadParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut HeadParams, grads: &HeadParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.first_moment) {
        return Err(Error::Shape("gradient layout differs from parameters".into()));
    }
    if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("head gradients".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let g_all = grads.tensors();
    let m_all = state.first_moment.tensors_mut();
    let v_all = state.second_moment.tensors_mut();
    let p_all = params.tensors_mut();
    for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
