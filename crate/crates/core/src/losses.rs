//! Class-wise and instance-wise contrastive losses with analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::pseudo::PseudoLabels;

/// Floor inside `log` of the class-wise loss.
pub const LOG_FLOOR: f64 = 1e-30;
/// Floor on row norms in the cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub class_wise: f64,
    pub instance_wise: f64,
}

impl LossValue {
    pub fn new(class_wise: f64, instance_wise: f64, lambda_i: f64) -> Self {
        Self {
            total: total_loss(class_wise, instance_wise, lambda_i),
            class_wise,
            instance_wise,
        }
    }
}

/// `L_C + λ L_I`.
pub fn total_loss(class_wise: f64, instance_wise: f64, lambda_i: f64) -> f64 {
    class_wise + lambda_i * instance_wise
}

#[derive(Clone, Debug)]
pub struct ClassWiseLoss {
    pub value: f64,
    /// Gradient at the first view's pre-softmax scores, `(P1 - Q) / N`.
    pub d_logits1: DenseMatrix,
    pub d_logits2: DenseMatrix,
}

/// Cross-entropy of both views' predictions against hard pseudo-labels,
/// each averaged over the batch and summed.
pub fn class_wise_loss(q: &PseudoLabels, p1: &DenseMatrix, p2: &DenseMatrix) -> Result<ClassWiseLoss> {
    let shape = (q.len(), q.classes());
    if p1.shape() != shape || p2.shape() != shape {
        return Err(Error::Shape(format!(
            "pseudo-labels are {}x{}, predictions {:?} and {:?}",
            shape.0,
            shape.1,
            p1.shape(),
            p2.shape()
        )));
    }
    if q.is_empty() {
        return Err(Error::Empty("class-wise loss batch"));
    }
    let n = q.len() as f64;
    let mut value = 0.0;
    let grad = |p: &DenseMatrix| {
        let mut d = p.map(|v| v / n).expect("finite predictions");
        for (i, &l) in q.labels().iter().enumerate() {
            d.row_mut(i)[l] -= 1.0 / n;
        }
        d
    };
    for p in [p1, p2] {
        for (i, &l) in q.labels().iter().enumerate() {
            value -= p.get(i, l).max(LOG_FLOOR).ln() / n;
        }
    }
    Ok(ClassWiseLoss {
        value,
        d_logits1: grad(p1),
        d_logits2: grad(p2),
    })
}

#[derive(Clone, Debug)]
pub struct InstanceWiseLoss {
    pub value: f64,
    pub d_z1: DenseMatrix,
    pub d_z2: DenseMatrix,
}

/// NT-Xent over the stacked views: row `i` and row `i + N` are positives, every
/// other row except itself is a negative; averaged over all `2N` anchors.
pub fn instance_wise_loss(z1: &DenseMatrix, z2: &DenseMatrix, tau: f64) -> Result<InstanceWiseLoss> {
    if z1.shape() != z2.shape() {
        return Err(Error::Shape(format!(
            "views have shapes {:?} and {:?}",
            z1.shape(),
            z2.shape()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let n = z1.rows();
    if n == 0 {
        return Err(Error::Empty("instance-wise loss batch"));
    }
    let z = z1.vstack(z2)?;
    let m = 2 * n;
    let dim = z.cols();

    let mut norms = Vec::with_capacity(m);
    let mut unit = z.clone();
    for k in 0..m {
        let norm = z.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "projection row {k} has zero norm"
            )));
        }
        let norm = norm.max(NORM_FLOOR);
        norms.push(norm);
        for v in unit.row_mut(k) {
            *v /= norm;
        }
    }
    let sim = unit.matmul_t(&unit)?;
    let partner = |k: usize| if k < n { k + n } else { k - n };

    // coef[k][l] = dL / d s_kl, with s_kl = cos_kl / τ
    let mut coef = vec![0.0; m * m];
    let mut value = 0.0;
    let scale = 1.0 / m as f64;
    for k in 0..m {
        let row = sim.row(k);
        let max = (0..m)
            .filter(|&l| l != k)
            .map(|l| row[l] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m)
            .filter(|&l| l != k)
            .map(|l| (row[l] / tau - max).exp())
            .sum();
        let p = partner(k);
        value += scale * (max + denom.ln() - row[p] / tau);
        for l in 0..m {
            if l != k {
                coef[k * m + l] = scale * (row[l] / tau - max).exp() / denom;
            }
        }
        coef[k * m + p] -= scale;
    }

    let mut d_z = DenseMatrix::zeros(m, dim);
    for k in 0..m {
        let mut d_unit = vec![0.0; dim];
        for l in 0..m {
            let w = (coef[k * m + l] + coef[l * m + k]) / tau;
            if w != 0.0 {
                for (d, u) in d_unit.iter_mut().zip(unit.row(l)) {
                    *d += w * u;
                }
            }
        }
        let u_k = unit.row(k);
        let radial: f64 = d_unit.iter().zip(u_k).map(|(d, u)| d * u).sum();
        for ((out, d), u) in d_z.row_mut(k).iter_mut().zip(&d_unit).zip(u_k) {
            *out = (d - radial * u) / norms[k];
        }
    }
    let top: Vec<usize> = (0..n).collect();
    let bottom: Vec<usize> = (n..m).collect();
    Ok(InstanceWiseLoss {
        value,
        d_z1: d_z.select_rows(&top),
        d_z2: d_z.select_rows(&bottom),
    })
}
