//! Clustering accuracy under optimal label matching, and normalised mutual information.

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Result of a minimum-cost matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Matched column for each row; `None` for rows left over when there are
    /// more rows than columns.
    pub columns: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost matching (Kuhn–Munkres with potentials, O(n³)).
///
/// Rectangular inputs are padded to square with a constant larger than any
/// achievable real total.
pub fn hungarian(cost: &DenseMatrix) -> Result<Assignment> {
    let (rows, cols) = cost.shape();
    if cost.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            total_cost: 0.0,
        });
    }
    let max_abs = cost.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pad = max_abs * n as f64 + 1.0;
    let at = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost.get(i, j)
        } else {
            pad
        }
    };

    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut columns = vec![None; rows];
    let mut total_cost = 0.0;
    for (j, &o) in owner.iter().enumerate().skip(1) {
        let i = o - 1;
        if i < rows && j - 1 < cols {
            columns[i] = Some(j - 1);
            total_cost += cost.get(i, j - 1);
        }
    }
    Ok(Assignment {
        columns,
        total_cost,
    })
}

/// Co-occurrence counts of true (rows) and predicted (columns) labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        if y_true.is_empty() {
            return Err(Error::Empty("label vectors"));
        }
        let rows = y_true.iter().max().map_or(0, |m| m + 1);
        let cols = y_pred.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            counts[t][p] += 1;
        }
        Ok(Self {
            counts,
            total: y_true.len() as u64,
        })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_totals(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

/// Fraction of samples whose predicted cluster maps to their true class under
/// the best one-to-one mapping.
pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(y_true, y_pred)?;
    let rows = table.counts.len();
    let cols = table.counts[0].len();
    // rows are predicted clusters, columns true classes
    let cost = DenseMatrix::from_fn(cols, rows, |p, t| -(table.counts[t][p] as f64))?;
    let matched = -hungarian(&cost)?.total_cost;
    Ok(matched / table.total as f64)
}

fn entropy(totals: &[u64], n: f64) -> f64 {
    totals
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(Y, Ŷ) / sqrt(H(Y) H(Ŷ))` with natural logarithms.
///
/// When either entropy is zero the ratio is undefined; it is reported as 1 if
/// both partitions are a single cluster and 0 otherwise.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(y_true, y_pred)?;
    let n = table.total as f64;
    let rt = table.row_totals();
    let ct = table.col_totals();
    let h_true = entropy(&rt, n);
    let h_pred = entropy(&ct, n);
    if h_true == 0.0 || h_pred == 0.0 {
        return Ok(if h_true == 0.0 && h_pred == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (t, row) in table.counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rt[t] as f64 * ct[p] as f64)).ln();
            }
        }
    }
    Ok((mi / (h_true * h_pred).sqrt()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identity_preferring_cost() {
        let cost = DenseMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 }).unwrap();
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.columns, (0..4).map(Some).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn one_by_one() {
        let a = hungarian(&DenseMatrix::filled(1, 1, 3.5)).unwrap();
        assert_eq!(a.columns, vec![Some(0)]);
    }

    #[test]
    fn matches_enumeration_on_random_square() {
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        let mut rng = seeded_rng(17);
        let cost = DenseMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..10.0)).unwrap();
        let best = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!((hungarian(&cost).unwrap().total_cost - best).abs() < 1e-9);
    }

    #[test]
    fn rectangular_inputs() {
        let wide = DenseMatrix::from_rows(&[[5.0, 1.0, 3.0], [2.0, 4.0, 0.5]]).unwrap();
        let a = hungarian(&wide).unwrap();
        assert_eq!(a.columns, vec![Some(1), Some(2)]);
        assert_eq!(a.total_cost, 1.5);
        let tall = DenseMatrix::from_rows(&[[5.0, 1.0], [2.0, 4.0], [0.0, 9.0]]).unwrap();
        let a = hungarian(&tall).unwrap();
        assert_eq!(a.columns, vec![Some(1), None, Some(0)]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn accuracy_with_unequal_label_counts() {
        // three predicted clusters, two classes: best map keeps 5 of 6
        assert!((accuracy(&[0, 0, 0, 1, 1, 1], &[0, 0, 2, 1, 1, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[1, 1, 1], &[0, 0, 0]).unwrap(), 1.0);
        // independent 40-digit evaluation from the 2x2 contingency table
        let v = nmi(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert!((v - 0.345_592_029_944_211_36).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariant_under_relabelling(
            truth in proptest::collection::vec(0usize..4, 1..60),
            seed in 0u64..1000,
        ) {
            let mut rng = seeded_rng(seed);
            let pred: Vec<usize> = truth.iter().map(|_| rng.random_range(0..4)).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let relabelled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let acc = accuracy(&truth, &pred).unwrap();
            prop_assert!((acc - accuracy(&truth, &relabelled).unwrap()).abs() < 1e-12);
            let v = nmi(&truth, &pred).unwrap();
            prop_assert!((v - nmi(&truth, &relabelled).unwrap()).abs() < 1e-12);
            prop_assert!((v - nmi(&pred, &truth).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn hungarian_beats_identity_and_random(seed in 0u64..500) {
            let mut rng = seeded_rng(seed);
            let n = rng.random_range(1..8);
            let cost = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0)).unwrap();
            let best = hungarian(&cost).unwrap().total_cost;
            let ident: f64 = (0..n).map(|i| cost.get(i, i)).sum();
            prop_assert!(best <= ident + 1e-9);
            let mut perm: Vec<usize> = (0..n).collect();
            for _ in 0..100 {
                perm.shuffle(&mut rng);
                let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
                prop_assert!(best <= total + 1e-9);
            }
        }

        #[test]
        fn balanced_accuracy_at_least_chance(seed in 0u64..300, c in 2usize..6) {
            let mut rng = seeded_rng(seed);
            let truth: Vec<usize> = (0..c * 10).map(|i| i % c).collect();
            let pred: Vec<usize> = truth.iter().map(|_| rng.random_range(0..c)).collect();
            prop_assert!(accuracy(&truth, &pred).unwrap() >= 1.0 / c as f64 - 1e-12);
        }
    }
}
