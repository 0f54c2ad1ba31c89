//! Optimal-transport pseudo-labelling solvers.
//!
//! Every solver couples `N` samples (marginal `a`, usually uniform) with `C`
//! classes (marginal `b`) under the cost `M = -log P`, with entropic weight
//! `epsilon1`. Plans are parameterised by dual potentials:
//!
//! ```text
//! π_ij = exp((f_i + g_j - M_ij) / ε1)
//! f_i  = ε1 · (log a_i - LSE_j((g_j - M_ij) / ε1))
//! g_j  = ε1 · (log b_j - LSE_i((f_i - M_ij) / ε1))
//! ```
//!
//! and all updates are carried out on `f` and `g` directly (log domain), so no
//! `exp(-M/ε1)` kernel is ever materialised.
//!
//! * [`solve_fixed_marginal_ot`] keeps `b` fixed (classic Sinkhorn).
//! * [`solve_saot`] also optimises `b` under a penalty `ε2 · Ψ(b)`:
//!   - [`Penalty::LogBarrier`], `Ψ(b) = -log b - log(1 - b)`. With `f`, `g`
//!     fixed the minimiser is `b_j(h)` from [`marginal_from_h`], where the
//!     multiplier `h` is the root of `Σ_j b_j(h) = 1` ([`newton_root_h`]).
//!   - [`Penalty::KlToPrevious`], `Ψ(b) = KL(b ‖ b̂)` with `b̂` the initial
//!     marginal. Setting the derivative of `ε2·KL(b‖b̂) + gᵀb - h(bᵀ1 - 1)`
//!     to zero gives `ε2(log(b_j/b̂_j) + 1) + g_j = h`, i.e. the closed form
//!     `b_j ∝ b̂_j · exp(-g_j / ε2)` once `h` is fixed by normalisation.
//!
//! # Relaxed marginal step
//!
//! `g` carries the current marginal: `g_j = ε1 log b_j - K_j(f)`. Feeding it
//! straight into the marginal update makes the new `b_j` respond to the old one
//! with gain `-r_j`, where for the log barrier
//!
//! ```text
//! r_j = (ε1 / b_j) / (ε2 Ψ''(b_j)) = ε1 b_j (1-b_j)² / (ε2 ((1-b_j)² + b_j²))
//! ```
//!
//! and `r = ε1/ε2` (in log space) for the KL penalty. Whenever `r_j > 1`
//! (e.g. `ε1 = 0.1`, `ε2 ≤ 0.025` at a uniform marginal) the plain update
//! oscillates instead of converging. The solver therefore moves each `b_j`
//! only a fraction `1 / (1 + r_j)` of the way to its target, which cancels the
//! linearised feedback and keeps the fixed points unchanged: a fixed point
//! satisfies `ε2 Ψ'(b_j) + g_j = h` together with both marginal constraints,
//! which are the stationarity conditions of the full objective. For the KL
//! penalty the log-space step with weight `ε2 / (ε1 + ε2)` is exactly the
//! joint minimiser over `(g, b)` given `f`.
//!
//! After the outer loop the marginal is frozen and a short fixed-marginal
//! Sinkhorn pass tightens both marginal residuals.

mod estimators;
mod marginal;
mod saot;
mod sinkhorn;

pub use estimators::{estimate_marginal_moving_average, MarginalEstimatorState};
pub use marginal::{
    marginal_from_h, marginal_residual, marginal_residual_derivative, newton_root_h,
    SINGULAR_GAP,
};
pub use saot::solve_saot;
pub use sinkhorn::solve_fixed_marginal_ot;

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ProbVector};

/// Floor applied to probabilities before taking `-log`.
pub const P_FLOOR: f64 = 1e-30;

/// Tolerance on prediction row sums accepted by [`CostMatrix::from_predictions`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Nonnegative `N × C` transport cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(DenseMatrix);

impl CostMatrix {
    /// `M = -log(max(P, P_FLOOR))`.
    pub fn from_predictions(p: &DenseMatrix) -> Result<Self> {
        for (i, row) in p.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "prediction row {i} has entries outside [0, 1]"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "prediction row {i} sums to {total}"
                )));
            }
        }
        Ok(Self(p.map(|v| -v.max(P_FLOOR).ln())?))
    }

    /// Wraps an explicit cost; entries must lie in `[0, -log P_FLOOR]`.
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        let cap = -P_FLOOR.ln();
        if matrix.as_slice().iter().any(|v| !(0.0..=cap).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "cost entries must lie in [0, {cap}]"
            )));
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn samples(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }
}

/// Penalty on the class marginal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    LogBarrier,
    KlToPrevious,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaotConfig {
    /// Entropy weight.
    pub epsilon1: f64,
    /// Marginal penalty weight.
    pub epsilon2: f64,
    pub outer_iters: usize,
    pub newton_iters: usize,
    /// Marginal entries are kept in `[marginal_floor, 1 - marginal_floor]`.
    pub marginal_floor: f64,
    /// L1 marginal residual accepted for early exit and polishing.
    pub stall_tol: f64,
    /// L∞ change of `b` between outer iterations accepted for early exit.
    pub b_change_tol: f64,
    /// Cap on fixed-marginal iterations spent tightening the final plan.
    pub polish_iters: usize,
    pub penalty: Penalty,
}

impl Default for SaotConfig {
    fn default() -> Self {
        Self {
            epsilon1: 0.1,
            epsilon2: 0.1,
            outer_iters: 200,
            newton_iters: 10,
            marginal_floor: 1e-6,
            stall_tol: 1e-6,
            b_change_tol: 1e-7,
            polish_iters: 20_000,
            penalty: Penalty::LogBarrier,
        }
    }
}

impl SaotConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon1 > 0.0 && self.epsilon1.is_finite()) {
            return bad(format!("epsilon1 must be positive, got {}", self.epsilon1));
        }
        if !(self.epsilon2 >= 0.0 && self.epsilon2.is_finite()) {
            return bad(format!("epsilon2 must be nonnegative, got {}", self.epsilon2));
        }
        if self.outer_iters == 0 || self.newton_iters == 0 {
            return bad("outer_iters and newton_iters must be at least 1".into());
        }
        if classes > 0 && !(self.marginal_floor > 0.0 && self.marginal_floor < 1.0 / classes as f64)
        {
            return bad(format!(
                "marginal_floor {} outside (0, 1/{classes})",
                self.marginal_floor
            ));
        }
        if self.stall_tol.is_nan() || self.stall_tol <= 0.0 || self.b_change_tol.is_nan() || self.b_change_tol <= 0.0 {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }
}

/// Per-solve record for the CLI and reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveDiagnostics {
    /// Objective after each outer iteration (plan from the current potentials).
    pub objective_trace: Vec<f64>,
    /// Class marginal after each outer iteration.
    pub b_trace: Vec<Vec<f64>>,
    /// Number of marginal entries pushed back inside the floor.
    pub clamp_events: usize,
    /// Whether the outer loop met both early-exit tolerances.
    pub converged: bool,
    /// Fixed-marginal iterations spent after the outer loop.
    pub polish_iters: usize,
    pub row_residual: f64,
    pub col_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaotSolution {
    pub plan: DenseMatrix,
    pub marginal: ProbVector,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub h: f64,
    pub objective: f64,
    pub outer_iters_used: usize,
    pub diagnostics: SolveDiagnostics,
}

/// Penalty value `Ψ(b)ᵀ1`.
///
/// `previous` is the reference marginal for the KL penalty and is ignored by
/// the log barrier.
pub fn penalty_value(penalty: Penalty, b: &[f64], previous: Option<&ProbVector>) -> Result<f64> {
    match penalty {
        Penalty::LogBarrier => Ok(b.iter().map(|&v| -v.ln() - (1.0 - v).ln()).sum()),
        Penalty::KlToPrevious => {
            let prev = previous.ok_or_else(|| {
                Error::InvalidArgument("KL penalty needs a reference marginal".into())
            })?;
            if prev.len() != b.len() {
                return Err(Error::Shape("reference marginal length".into()));
            }
            Ok(b.iter()
                .zip(prev.as_slice())
                .map(|(&v, &r)| if v > 0.0 { v * (v / r).ln() } else { 0.0 })
                .sum())
        }
    }
}

/// `⟨π, M⟩ + ε1 H(π) + ε2 Ψ(b)ᵀ1` with `H(π) = ⟨π, log π - 1⟩` and `0 log 0 = 0`.
pub fn saot_objective(
    plan: &DenseMatrix,
    cost: &CostMatrix,
    b: &[f64],
    cfg: &SaotConfig,
    previous: Option<&ProbVector>,
) -> Result<f64> {
    if plan.shape() != cost.matrix().shape() || b.len() != plan.cols() {
        return Err(Error::Shape("plan, cost and marginal disagree".into()));
    }
    let mut transport = 0.0;
    let mut entropy = 0.0;
    for (&p, &m) in plan.as_slice().iter().zip(cost.matrix().as_slice()) {
        transport += p * m;
        if p > 0.0 {
            entropy += p * (p.ln() - 1.0);
        }
    }
    let mut value = transport;
    if cfg.epsilon1 != 0.0 {
        value += cfg.epsilon1 * entropy;
    }
    if cfg.epsilon2 != 0.0 {
        value += cfg.epsilon2 * penalty_value(cfg.penalty, b, previous)?;
    }
    Ok(value)
}
