//! Pseudo-label lifecycle: hardening, k-means initialisation and the refresh schedule.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{argmax, seeded_rng, DenseMatrix};

/// Hard one-hot targets, stored as one class index per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    labels: Vec<usize>,
    classes: usize,
    /// Number of refreshes that produced these labels (0 for the k-means init).
    pub generation: usize,
}

impl PseudoLabels {
    pub fn new(labels: Vec<usize>, classes: usize, generation: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            labels,
            classes,
            generation,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One-hot `N × C` matrix.
    pub fn matrix(&self) -> DenseMatrix {
        let mut data = vec![0.0; self.labels.len() * self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * self.classes + l] = 1.0;
        }
        DenseMatrix::from_vec_unchecked(self.labels.len(), self.classes, data)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            generation: self.generation,
        }
    }
}

/// Row-wise argmax of a plan; ties go to the lowest column.
pub fn harden(plan: &DenseMatrix) -> PseudoLabels {
    PseudoLabels {
        labels: plan.argmax_rows(),
        classes: plan.cols(),
        generation: 0,
    }
}

pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: DenseMatrix,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seeds(e: &DenseMatrix, k: usize, rng: &mut impl Rng) -> DenseMatrix {
    let n = e.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = e.row_iter().map(|r| sq_dist(r, e.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // all remaining points coincide with a centre
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (d, r) in dist.iter_mut().zip(e.row_iter()) {
            *d = d.min(sq_dist(r, e.row(next)));
        }
    }
    e.select_rows(&chosen)
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean distance.
pub fn kmeans(e: &DenseMatrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let (n, d) = e.shape();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = plus_plus_seeds(e, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for (i, row) in e.row_iter().enumerate() {
            let (best, dist) = nearest(row, &centroids);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            dists[i] = dist;
            inertia += dist;
        }
        inertia_trace.push(inertia);
        if !changed {
            break;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &l) in e.row_iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the point farthest from its own centroid, never
                // emptying a singleton cluster in the process.
                let candidates: Vec<f64> = dists
                    .iter()
                    .zip(&labels)
                    .map(|(&dist, &l)| if counts[l] > 1 { dist } else { -1.0 })
                    .collect();
                let far = argmax(&candidates);
                let old = labels[far];
                counts[old] -= 1;
                for (s, v) in sums[old * d..(old + 1) * d].iter_mut().zip(e.row(far)) {
                    *s -= v;
                }
                labels[far] = c;
                counts[c] = 1;
                sums[c * d..(c + 1) * d].copy_from_slice(e.row(far));
                dists[far] = 0.0;
            }
        }
        let data: Vec<f64> = sums
            .chunks(d.max(1))
            .zip(&counts)
            .flat_map(|(s, &cnt)| s.iter().map(move |v| v / cnt as f64))
            .collect();
        centroids = DenseMatrix::from_vec_unchecked(k, d, if d == 0 { Vec::new() } else { data });
    }
    Ok(KMeansResult {
        labels,
        centroids,
        inertia_trace,
        iterations,
    })
}

/// Initial pseudo-labels from k-means on the raw embeddings.
pub fn kmeans_init(e: &DenseMatrix, classes: usize, seed: u64) -> Result<PseudoLabels> {
    let result = kmeans(e, classes, seed)?;
    PseudoLabels::new(result.labels, classes, 0)
}

/// Training steps at which pseudo-labels are refreshed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefreshSchedule {
    steps: Vec<usize>,
}

impl RefreshSchedule {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn contains(&self, step: usize) -> bool {
        self.steps.binary_search(&step).is_ok()
    }

    /// The same schedule starting `offset` steps later.
    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            steps: self.steps.iter().map(|s| s + offset).collect(),
        }
    }
}

/// Geometric spacing: `round(total^(k/n))` for `k = 1..=n`, deduplicated, last step `total`.
pub fn make_schedule(total_steps: usize, num_refreshes: usize) -> Result<RefreshSchedule> {
    if num_refreshes == 0 || total_steps < num_refreshes {
        return Err(Error::InvalidArgument(format!(
            "schedule needs 1 <= refreshes <= steps, got {num_refreshes} refreshes over {total_steps} steps"
        )));
    }
    let t = total_steps as f64;
    let mut steps: Vec<usize> = (1..=num_refreshes)
        .map(|k| (t.powf(k as f64 / num_refreshes as f64).round() as usize).clamp(1, total_steps))
        .collect();
    *steps.last_mut().expect("at least one refresh") = total_steps;
    steps.dedup();
    Ok(RefreshSchedule { steps })
}
