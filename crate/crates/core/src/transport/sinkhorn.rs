//! Log-domain Sinkhorn updates with both marginals fixed.

use super::{CostMatrix, SaotConfig, SaotSolution, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ProbVector};

/// `f_i = ε · (log a_i - LSE_j((g_j - M_ij) / ε))`.
pub(super) fn update_f(cost: &CostMatrix, log_a: &[f64], g: &[f64], eps: f64, f: &mut [f64]) {
    let m = cost.matrix();
    let mut scratch = vec![0.0; g.len()];
    for (i, fi) in f.iter_mut().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for ((s, &gj), &mij) in scratch.iter_mut().zip(g).zip(m.row(i)) {
            *s = (gj - mij) / eps;
            max = max.max(*s);
        }
        let lse = max + scratch.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        *fi = eps * (log_a[i] - lse);
    }
}

/// `g_j = ε · (log b_j - LSE_i((f_i - M_ij) / ε))`; `g_j = -∞` where `b_j = 0`.
pub(super) fn update_g(cost: &CostMatrix, log_b: &[f64], f: &[f64], eps: f64, g: &mut [f64]) {
    let m = cost.matrix();
    let cols = m.cols();
    let mut max = vec![f64::NEG_INFINITY; cols];
    for (i, &fi) in f.iter().enumerate() {
        for (mx, &mij) in max.iter_mut().zip(m.row(i)) {
            *mx = mx.max((fi - mij) / eps);
        }
    }
    let mut sums = vec![0.0; cols];
    for (i, &fi) in f.iter().enumerate() {
        for ((s, &mij), &mx) in sums.iter_mut().zip(m.row(i)).zip(&max) {
            *s += ((fi - mij) / eps - mx).exp();
        }
    }
    for j in 0..cols {
        g[j] = eps * (log_b[j] - (max[j] + sums[j].ln()));
    }
}

pub(super) fn plan_from(cost: &CostMatrix, f: &[f64], g: &[f64], eps: f64) -> DenseMatrix {
    let m = cost.matrix();
    let mut data = Vec::with_capacity(m.rows() * m.cols());
    for (i, &fi) in f.iter().enumerate() {
        for (&gj, &mij) in g.iter().zip(m.row(i)) {
            data.push(((fi + gj - mij) / eps).exp());
        }
    }
    DenseMatrix::from_vec_unchecked(m.rows(), m.cols(), data)
}

/// L1 residuals of the row and column marginals.
pub(super) fn residuals(plan: &DenseMatrix, a: &[f64], b: &[f64]) -> (f64, f64) {
    let rows = plan
        .row_sums()
        .iter()
        .zip(a)
        .map(|(s, t)| (s - t).abs())
        .sum();
    let cols = plan
        .column_sums()
        .iter()
        .zip(b)
        .map(|(s, t)| (s - t).abs())
        .sum();
    (rows, cols)
}

/// `⟨π, M⟩ + ε H(π)` using `log π_ij = (f_i + g_j - M_ij) / ε`.
pub(super) fn entropic_cost(cost: &CostMatrix, plan: &DenseMatrix, f: &[f64], g: &[f64], eps: f64) -> f64 {
    let m = cost.matrix();
    let mut total = 0.0;
    for (i, &fi) in f.iter().enumerate() {
        for ((&gj, &mij), &p) in g.iter().zip(m.row(i)).zip(plan.row(i)) {
            if p > 0.0 {
                let log_p = (fi + gj - mij) / eps;
                total += p * mij + eps * p * (log_p - 1.0);
            }
        }
    }
    total
}

pub(super) fn check_potentials(
    solver: &'static str,
    iteration: usize,
    f: &[f64],
    g: &[f64],
    b: &[f64],
) -> Result<()> {
    let f_ok = f.iter().all(|v| v.is_finite());
    let g_ok = g
        .iter()
        .zip(b)
        .all(|(v, &bj)| v.is_finite() || (bj == 0.0 && *v == f64::NEG_INFINITY));
    if f_ok && g_ok {
        Ok(())
    } else {
        Err(Error::Diverged { solver, iteration })
    }
}

pub(super) struct FixedRun {
    pub iters: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    pub plan: DenseMatrix,
}

/// Alternates `g` then `f` updates until both residuals are at most `tol`.
///
/// Always performs at least one sweep; the returned plan reflects the final
/// potentials, so its row marginal is exact up to rounding.
#[allow(clippy::too_many_arguments)]
pub(super) fn run_fixed(
    solver: &'static str,
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    eps: f64,
    f: &mut [f64],
    g: &mut [f64],
    max_iters: usize,
    tol: f64,
) -> Result<FixedRun> {
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut iters = 0;
    loop {
        iters += 1;
        update_g(cost, &log_b, f, eps, g);
        update_f(cost, &log_a, g, eps, f);
        check_potentials(solver, iters, f, g, b)?;
        let plan = plan_from(cost, f, g, eps);
        let (row_residual, col_residual) = residuals(&plan, a, b);
        if (row_residual <= tol && col_residual <= tol) || iters >= max_iters {
            return Ok(FixedRun {
                iters,
                row_residual,
                col_residual,
                plan,
            });
        }
    }
}

/// Entropic OT with both marginals fixed.
///
/// Runs at most `iters` Sinkhorn sweeps and stops early once both L1 marginal
/// residuals are below `1e-6`. The reported objective is `⟨π, M⟩ + ε1 H(π)`.
pub fn solve_fixed_marginal_ot(
    cost: &CostMatrix,
    a: &ProbVector,
    b: &ProbVector,
    epsilon1: f64,
    iters: usize,
) -> Result<SaotSolution> {
    let (n, c) = cost.matrix().shape();
    if a.len() != n || b.len() != c {
        return Err(Error::Shape(format!(
            "cost is {n}x{c} but marginals have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(epsilon1 > 0.0 && epsilon1.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon1 must be positive, got {epsilon1}"
        )));
    }
    let tol = SaotConfig::default().stall_tol;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; c];
    let run = run_fixed(
        "fixed-marginal OT",
        cost,
        a.as_slice(),
        b.as_slice(),
        epsilon1,
        &mut f,
        &mut g,
        iters.max(1),
        tol,
    )?;
    let objective = entropic_cost(cost, &run.plan, &f, &g, epsilon1);
    Ok(SaotSolution {
        plan: run.plan,
        marginal: b.clone(),
        f,
        g,
        h: 0.0,
        objective,
        outer_iters_used: run.iters,
        diagnostics: SolveDiagnostics {
            converged: run.row_residual <= tol && run.col_residual <= tol,
            row_residual: run.row_residual,
            col_residual: run.col_residual,
            ..SolveDiagnostics::default()
        },
    })
}
