use super::marginal::{marginal_from_h, newton_root_h};
use super::sinkhorn::{check_potentials, entropic_cost, plan_from, run_fixed, update_f, update_g};
use super::{penalty_value, CostMatrix, Penalty, SaotConfig, SaotSolution, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::numerics::ProbVector;

/// Initial multiplier for the marginal root solve.
const H_INIT: f64 = 1.0;

/// Clamps into `[floor, 1 - floor]` and renormalises; returns the number of
/// entries that had to move.
fn clamp_marginal(b: &mut [f64], floor: f64) -> usize {
    let mut moved = 0;
    for v in b.iter_mut() {
        let clamped = v.clamp(floor, 1.0 - floor);
        if clamped != *v || !v.is_finite() {
            moved += 1;
        }
        *v = if v.is_finite() { clamped } else { floor };
    }
    let total: f64 = b.iter().sum();
    for v in b.iter_mut() {
        *v /= total;
    }
    moved
}

/// Self-adaptive OT: entropic transport whose class marginal is optimised jointly
/// with the plan under the configured penalty. See the module docs for the update
/// order and the relaxed marginal step.
pub fn solve_saot(
    cost: &CostMatrix,
    a: &ProbVector,
    cfg: &SaotConfig,
    init_b: &ProbVector,
) -> Result<SaotSolution> {
    let (n, c) = cost.matrix().shape();
    if a.len() != n || init_b.len() != c {
        return Err(Error::Shape(format!(
            "cost is {n}x{c} but marginals have lengths {} and {}",
            a.len(),
            init_b.len()
        )));
    }
    if c < 2 {
        return Err(Error::InvalidArgument(
            "self-adaptive transport needs at least two classes".into(),
        ));
    }
    cfg.validate(c)?;

    let eps1 = cfg.epsilon1;
    let eps2 = cfg.epsilon2;
    let reference = init_b;
    let a_slice = a.as_slice();
    let log_a: Vec<f64> = a_slice.iter().map(|v| v.ln()).collect();

    let mut diagnostics = SolveDiagnostics::default();
    let mut b = init_b.as_slice().to_vec();
    diagnostics.clamp_events += clamp_marginal(&mut b, cfg.marginal_floor);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; c];
    let mut h = H_INIT;
    let mut outer_iters_used = 0;

    if eps2 == 0.0 {
        // No penalty: the optimal marginal is the column mass of the
        // row-normalised Gibbs kernel.
        update_f(cost, &log_a, &g, eps1, &mut f);
        check_potentials("self-adaptive OT", 0, &f, &g, &b)?;
        b = plan_from(cost, &f, &g, eps1).column_sums();
        diagnostics.clamp_events += clamp_marginal(&mut b, cfg.marginal_floor);
        h = 0.0;
        outer_iters_used = 1;
        diagnostics.converged = true;
    } else {
        let mut log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
        let log_ref: Vec<f64> = reference.as_slice().iter().map(|v| v.ln()).collect();
        let kl_weight = eps2 / (eps1 + eps2);
        for it in 1..=cfg.outer_iters {
            outer_iters_used = it;
            update_f(cost, &log_a, &g, eps1, &mut f);
            update_g(cost, &log_b, &f, eps1, &mut g);
            check_potentials("self-adaptive OT", it, &f, &g, &b)?;

            let mut next = match cfg.penalty {
                Penalty::LogBarrier => {
                    h = newton_root_h(&g, eps2, h, cfg.newton_iters)?;
                    let target = marginal_from_h(&g, h, eps2);
                    b.iter()
                        .zip(&target)
                        .map(|(&bj, &tj)| {
                            let q = (1.0 - bj) * (1.0 - bj);
                            let gain = eps1 * bj * q / (eps2 * (q + bj * bj));
                            bj + (tj - bj) / (1.0 + gain)
                        })
                        .collect::<Vec<_>>()
                }
                Penalty::KlToPrevious => {
                    // target ∝ b̂ exp(-g/ε2), mixed geometrically with the current b
                    let logits: Vec<f64> = log_ref
                        .iter()
                        .zip(&g)
                        .map(|(lr, gj)| lr - gj / eps2)
                        .collect();
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                    h = eps2 * (logits[0] - lse - log_ref[0] + 1.0) + g[0];
                    let mixed: Vec<f64> = log_b
                        .iter()
                        .zip(&logits)
                        .map(|(lb, l)| (1.0 - kl_weight) * lb + kl_weight * (l - lse))
                        .collect();
                    let max = mixed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    mixed.iter().map(|m| (m - max).exp()).collect()
                }
            };
            if next.iter().any(|v| v.is_nan()) {
                return Err(Error::Diverged {
                    solver: "self-adaptive OT",
                    iteration: it,
                });
            }
            diagnostics.clamp_events += clamp_marginal(&mut next, cfg.marginal_floor);
            let change = b
                .iter()
                .zip(&next)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);

            let plan = plan_from(cost, &f, &g, eps1);
            let row_residual: f64 = plan
                .row_sums()
                .iter()
                .zip(a_slice)
                .map(|(s, t)| (s - t).abs())
                .sum();
            b = next;
            log_b = b.iter().map(|v| v.ln()).collect();
            let objective = entropic_cost(cost, &plan, &f, &g, eps1)
                + eps2 * penalty_value(cfg.penalty, &b, Some(reference))?;
            diagnostics.objective_trace.push(objective);
            diagnostics.b_trace.push(b.clone());

            if change < cfg.b_change_tol && row_residual <= cfg.stall_tol {
                diagnostics.converged = true;
                break;
            }
        }
    }

    let polish = run_fixed(
        "self-adaptive OT (polish)",
        cost,
        a_slice,
        &b,
        eps1,
        &mut f,
        &mut g,
        cfg.polish_iters.max(1),
        cfg.stall_tol,
    )?;
    diagnostics.polish_iters = polish.iters;
    diagnostics.row_residual = polish.row_residual;
    diagnostics.col_residual = polish.col_residual;

    let mut objective = entropic_cost(cost, &polish.plan, &f, &g, eps1);
    if eps2 != 0.0 {
        objective += eps2 * penalty_value(cfg.penalty, &b, Some(reference))?;
    }
    Ok(SaotSolution {
        plan: polish.plan,
        marginal: ProbVector::from_vec_unchecked(b),
        f,
        g,
        h,
        objective,
        outer_iters_used,
        diagnostics,
    })
}
