//! The log-barrier marginal update and the scalar root solve for its multiplier.
//!
//! With `f`, `g` fixed, minimising `ε2 Σ_j (-log b_j - log(1 - b_j)) + gᵀb - h(bᵀ1 - 1)`
//! coordinate-wise gives the quadratic
//!
//! ```text
//! (g_j - h) b_j² - ((g_j - h) + 2ε2) b_j + ε2 = 0,   Δ_j = (g_j - h)² + 4ε2²
//! ```
//!
//! whose root inside `(0, 1)` is `b_j = ((g_j - h) + 2ε2 - √Δ_j) / (2(g_j - h))`.
//! Writing `x = g_j - h` and rationalising,
//!
//! ```text
//! b(x) = 2ε2 / (x + 2ε2 + √(x² + 4ε2²)),    b(-x) = 1 - b(x)
//! ```
//!
//! which equals the logistic `σ(-asinh(x / 2ε2))`. This form has no cancellation
//! for `x ≥ 0`, and the reflection covers `x < 0`.
//!
//! # Root solve
//!
//! `h` must satisfy `Σ_j b_j(h) = 1`. With `p = argmin_j g_j` and the change of
//! variable `h = g_p + 2ε2 sinh(t)` the pivot term becomes `b_p = σ(t)`, so the
//! constraint is equivalent to
//!
//! ```text
//! F(t) = log σ(-t) - log Σ_{j≠p} b_j(h(t)) = 0.
//! ```
//!
//! Newton's method runs on `F(t)`, which is nearly linear where the plain
//! residual `Σ b_j - 1` saturates, so wide spreads in `g` relative to `ε2`
//! still converge in a handful of steps. The root lies in
//! `[g_p - x*, min(g_(2), g_(C) - x*)]` with `x* = 2ε2 sinh(log(C - 1))`
//! (`b(x*) = 1/C`); any step leaving that bracket, or landing where `F` cannot
//! be evaluated, is replaced by bisection.

use crate::error::{Error, Result};

/// `|g_j - h|` below which `b_j` is taken to be exactly one half.
pub const SINGULAR_GAP: f64 = 1e-12;

#[inline]
fn b_nonneg(x: f64, eps2: f64) -> f64 {
    2.0 * eps2 / (x + 2.0 * eps2 + x.hypot(2.0 * eps2))
}

/// `b(x)` for gap `x = g_j - h`.
#[inline]
fn b_of_gap(x: f64, eps2: f64) -> f64 {
    if x.abs() < SINGULAR_GAP {
        0.5
    } else if x > 0.0 {
        b_nonneg(x, eps2)
    } else {
        1.0 - b_nonneg(-x, eps2)
    }
}

/// `db/dh = -db/dx`, an even function of `x`.
#[inline]
fn db_dh(x: f64, eps2: f64) -> f64 {
    let x = x.abs();
    let s = x.hypot(2.0 * eps2);
    let d = x + 2.0 * eps2 + s;
    2.0 * eps2 * (1.0 + x / s) / (d * d)
}

/// Marginal entries `b_j(h)`; they sum to one only when `h` is the root.
pub fn marginal_from_h(g: &[f64], h: f64, epsilon2: f64) -> Vec<f64> {
    g.iter().map(|&gj| b_of_gap(gj - h, epsilon2)).collect()
}

/// `Σ_j b_j(h) - 1`.
pub fn marginal_residual(g: &[f64], h: f64, epsilon2: f64) -> f64 {
    g.iter().map(|&gj| b_of_gap(gj - h, epsilon2)).sum::<f64>() - 1.0
}

/// Analytic derivative of [`marginal_residual`] with respect to `h`.
pub fn marginal_residual_derivative(g: &[f64], h: f64, epsilon2: f64) -> f64 {
    g.iter().map(|&gj| db_dh(gj - h, epsilon2)).sum()
}

#[inline]
fn log_sigmoid(t: f64) -> f64 {
    // log σ(t) = -softplus(-t)
    if t > 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Multiplier `h` solving `Σ_j b_j(h) = 1`, after `iters` safeguarded Newton steps
/// starting from `h0` (projected into the bracket that contains the root).
pub fn newton_root_h(g: &[f64], epsilon2: f64, h0: f64, iters: usize) -> Result<f64> {
    if g.len() < 2 {
        return Err(Error::InvalidArgument(
            "marginal root needs at least two classes".into(),
        ));
    }
    if !(epsilon2 > 0.0 && epsilon2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon2 must be positive, got {epsilon2}"
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("class potentials".into()));
    }
    let c = g.len();
    let mut pivot = 0;
    for (j, &v) in g.iter().enumerate() {
        if v < g[pivot] {
            pivot = j;
        }
    }
    let gp = g[pivot];
    let mut sorted = g.to_vec();
    sorted.sort_by(f64::total_cmp);
    let scale = 2.0 * epsilon2;
    let log_cm1 = ((c - 1) as f64).ln();
    let x_star = scale * log_cm1.sinh();
    let to_t = |h: f64| ((h - gp) / scale).asinh();
    let to_h = |t: f64| gp + scale * t.sinh();

    let mut hi = to_t((sorted[1]).min(sorted[c - 1] - x_star));
    let mut lo = (-log_cm1).min(hi);
    let mut t = if h0.is_finite() {
        to_t(h0).clamp(lo, hi)
    } else {
        0.5 * (lo + hi)
    };

    // F(t) and F'(t); None when the rest-mass underflows.
    let eval = |t: f64| -> Option<(f64, f64)> {
        let h = to_h(t);
        let mut rest = 0.0;
        let mut d_rest = 0.0;
        for (j, &gj) in g.iter().enumerate() {
            if j != pivot {
                rest += b_of_gap(gj - h, epsilon2);
                d_rest += db_dh(gj - h, epsilon2);
            }
        }
        if !(rest > 0.0 && rest.is_finite()) {
            return None;
        }
        d_rest *= scale * t.cosh();
        let value = log_sigmoid(-t) - rest.ln();
        let slope = -sigmoid(t) - d_rest / rest;
        value.is_finite().then_some((value, slope))
    };

    for _ in 0..iters {
        if hi - lo <= 0.0 {
            break;
        }
        let next = match eval(t) {
            Some((value, slope)) => {
                if value == 0.0 {
                    break;
                }
                // F decreases in t: positive means the masses still sum below one.
                if value > 0.0 {
                    lo = t;
                } else {
                    hi = t;
                }
                let step = t - value / slope;
                if step == t {
                    // converged: the update no longer moves t
                    break;
                }
                // t itself is now a bracket end, so the endpoints must be allowed
                if slope.abs() > 1e-14 && step >= lo && step <= hi {
                    step
                } else {
                    0.5 * (lo + hi)
                }
            }
            None => {
                // rest mass underflowed: t is far too small
                lo = t;
                0.5 * (lo + hi)
            }
        };
        t = next;
    }
    Ok(to_h(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    /// Bisection on the plain residual, used as an independent oracle.
    pub(crate) fn bisect_root(g: &[f64], eps2: f64) -> f64 {
        let c = g.len() as f64;
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = gmin - 10.0 * eps2 * c - 1.0;
        let mut hi = gmax + 10.0 * eps2 * c + 1.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if marginal_residual(g, mid, eps2) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn singular_gap_is_exactly_half() {
        assert_eq!(marginal_from_h(&[2.0], 2.0, 0.1), vec![0.5]);
        assert_eq!(marginal_from_h(&[2.0 + 1e-13], 2.0, 0.1), vec![0.5]);
    }

    #[test]
    fn gap_of_two_eps() {
        for eps in [1e-3, 0.1, 7.0] {
            let b = marginal_from_h(&[2.0 * eps], 0.0, eps)[0];
            assert!((b - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_quadratic_formula_and_its_roots() {
        let eps: f64 = 0.05;
        for x in [-3.0f64, -0.2, -0.01, 0.003, 0.4, 9.0] {
            let direct = ((x + 2.0 * eps) - (x * x + 4.0 * eps * eps).sqrt()) / (2.0 * x);
            let b = marginal_from_h(&[x], 0.0, eps)[0];
            assert!((b - direct).abs() < 1e-12, "x={x}");
            assert!(b > 0.0 && b < 1.0);
            let q = x * b * b - (x + 2.0 * eps) * b + eps;
            assert!(q.abs() < 1e-12);
        }
    }

    #[test]
    fn large_gap_tail() {
        let eps = 0.01;
        for x in [1.0, 10.0, 1e3, 1e8] {
            let b = marginal_from_h(&[x], 0.0, eps)[0];
            assert!(b > 0.0);
            // b = (ε/x)(1 - ε/x + O(ε²/x²))
            let rel = (b - eps / x).abs() / (eps / x);
            assert!(rel < 2.0 * eps / x + 1e-12, "x={x} rel={rel}");
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let mut rng = seeded_rng(5);
        for _ in 0..200 {
            let c = rng.random_range(2..8);
            let eps = 10f64.powf(rng.random_range(-2.0..0.0));
            let g: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = rng.random_range(-1.5..1.5);
            if g.iter().any(|gj| (gj - h).abs() < 1e-3) {
                continue;
            }
            let step = 1e-6 * eps;
            let fd = (marginal_residual(&g, h + step, eps) - marginal_residual(&g, h - step, eps))
                / (2.0 * step);
            let an = marginal_residual_derivative(&g, h, eps);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-12), "{fd} vs {an}");
        }
    }

    #[test]
    fn equal_pair_has_root_at_common_value() {
        for eps in [1e-3, 0.1, 2.0] {
            let h = newton_root_h(&[3.7, 3.7], eps, 1.0, 10).unwrap();
            assert!((h - 3.7).abs() < 1e-12);
            let b = marginal_from_h(&[3.7, 3.7], h, eps);
            assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn three_equal_classes_agree_with_bisection() {
        let g = [0.8; 3];
        let h = newton_root_h(&g, 0.1, 1.0, 10).unwrap();
        assert!(marginal_residual(&g, h, 0.1).abs() < 1e-8);
        assert!((h - bisect_root(&g, 0.1)).abs() < 1e-8);
        for b in marginal_from_h(&g, h, 0.1) {
            assert!((b - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_five_classes_converge_in_ten_steps() {
        let mut rng = seeded_rng(9);
        for _ in 0..100 {
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = newton_root_h(&g, 0.01, 1.0, 10).unwrap();
            assert!(marginal_residual(&g, h, 0.01).abs() < 1e-8);
            let oracle = bisect_root(&g, 0.01);
            let gap = marginal_residual(&g, oracle, 0.01).abs();
            assert!(marginal_residual(&g, h, 0.01).abs() <= gap + 1e-8);
        }
    }

    #[test]
    fn converged_iterate_is_kept() {
        // Newton lands on a bracket end once converged; it must not bisect away.
        let g = [
            -3.0428538091685464,
            4.3804850273560945,
            -1.0116559007242865,
            -1.4609675996728688,
            3.5550901598446156,
            2.1003214012436455,
            -1.416042921013072,
            -1.8205546062557554,
            4.250542548498476,
            3.574823508606146,
        ];
        let eps = 0.38667219608446846;
        let h = newton_root_h(&g, eps, 3.68, 10).unwrap();
        assert!(marginal_residual(&g, h, eps).abs() < 1e-12);
    }

    #[test]
    fn wide_random_draws_converge_in_ten_steps() {
        let mut rng = seeded_rng(13);
        for _ in 0..2000 {
            let c = rng.random_range(2..=20);
            let eps = 10f64.powf(rng.random_range(-4.0..1.0));
            let g: Vec<f64> = (0..c).map(|_| rng.random_range(-30.0..30.0)).collect();
            let h = newton_root_h(&g, eps, rng.random_range(-40.0..40.0), 10).unwrap();
            assert!(marginal_residual(&g, h, eps).abs() < 1e-8, "{g:?} {eps}");
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(newton_root_h(&[1.0], 0.1, 1.0, 10).is_err());
        assert!(newton_root_h(&[1.0, 2.0], 0.0, 1.0, 10).is_err());
        assert!(newton_root_h(&[1.0, f64::NAN], 0.1, 1.0, 10).is_err());
    }
}
