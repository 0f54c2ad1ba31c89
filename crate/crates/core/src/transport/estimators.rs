//! Moving-average class-marginal estimate, paired with the fixed-marginal solver.

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ProbVector};

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalEstimatorState {
    /// Last marginal estimate `b̂`.
    pub previous_b: ProbVector,
    /// Weight kept on `b̂`, in `[0, 1]`.
    pub mu: f64,
}

impl MarginalEstimatorState {
    pub fn new(previous_b: ProbVector, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidArgument(format!("mu {mu} outside [0, 1]")));
        }
        Ok(Self { previous_b, mu })
    }
}

/// `μ b̂ + (1 - μ) γ`, with `γ` the histogram of row-wise argmax classes of `P`.
pub fn estimate_marginal_moving_average(
    p: &DenseMatrix,
    state: &MarginalEstimatorState,
) -> Result<ProbVector> {
    let c = state.previous_b.len();
    if p.cols() != c {
        return Err(Error::Shape(format!(
            "predictions have {} classes, estimate has {c}",
            p.cols()
        )));
    }
    if p.rows() == 0 {
        return Ok(state.previous_b.clone());
    }
    let mut gamma = vec![0.0; c];
    for k in p.argmax_rows() {
        gamma[k] += 1.0;
    }
    let n = p.rows() as f64;
    let mu = state.mu;
    let mixed: Vec<f64> = state
        .previous_b
        .as_slice()
        .iter()
        .zip(&gamma)
        .map(|(&prev, &count)| mu * prev + (1.0 - mu) * count / n)
        .collect();
    // guard against rounding drift in the convex combination
    ProbVector::normalized(mixed)
}
