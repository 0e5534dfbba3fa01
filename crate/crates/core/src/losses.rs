//! Transfer losses and classification primitives, each returning its value
//! together with analytic gradients.
//!
//! Conventions:
//! - batches are row-major matrices, one example per row;
//! - covariance uses the unbiased n-1 denominator, so batches need at least
//!   two rows;
//! - the adversarial loss is the batch-mean binary cross-entropy over the
//!   combined source+target batch with source labelled 1 and target 0, and
//!   per-example weights are treated as constants (no gradient flows through
//!   the entropy weights);
//! - `mmd_linear` returns the mean-embedding distance itself; trainers square
//!   it, which keeps the gradient smooth at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Guard inside logarithms; also the clamp width for discriminator
/// probabilities.
pub const LOG_EPS: f64 = 1e-12;

/// A scalar loss value plus one gradient matrix per differentiable input.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

/// Weight of the transfer term over training time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "base", rename_all = "kebab-case")]
pub enum LambdaSchedule {
    Constant(f64),
    /// base / epoch, the 1/t rule.
    InverseEpoch(f64),
}

impl LambdaSchedule {
    pub fn base(&self) -> f64 {
        match *self {
            LambdaSchedule::Constant(b) | LambdaSchedule::InverseEpoch(b) => b,
        }
    }
}

/// Which adaptation objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferLossKind {
    None,
    Coral,
    Mmd,
    Cdan,
    CdanE,
}

impl TransferLossKind {
    pub fn is_adversarial(self) -> bool {
        matches!(self, TransferLossKind::Cdan | TransferLossKind::CdanE)
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferLossKind::None => "none",
            TransferLossKind::Coral => "coral",
            TransferLossKind::Mmd => "mmd",
            TransferLossKind::Cdan => "cdan",
            TransferLossKind::CdanE => "cdan_e",
        }
    }
}

impl std::str::FromStr for TransferLossKind {
    type Err = Error;

    /// Accepts the method names used in the benchmark table; `ddc` is the
    /// MMD objective under its method name.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(TransferLossKind::None),
            "coral" | "deepcoral" => Ok(TransferLossKind::Coral),
            "mmd" | "ddc" => Ok(TransferLossKind::Mmd),
            "cdan" => Ok(TransferLossKind::Cdan),
            "cdan_e" | "cdan+e" | "cdane" => Ok(TransferLossKind::CdanE),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Unbiased feature covariance of a batch:
/// `(D'D - (1'D)'(1'D)/n) / (n - 1)`.
pub fn covariance(batch: &Matrix) -> Result<Matrix> {
    let n = batch.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch {
            op: "covariance",
            min: 2,
            got: n,
        });
    }
    let sums = batch.col_sums();
    let d = batch.cols();
    let gram = batch.transpose().matmul(batch)?;
    let inv_n = 1.0 / n as f64;
    let inv_nm1 = 1.0 / (n - 1) as f64;
    Ok(Matrix::from_fn(d, d, |i, j| {
        (gram.get(i, j) - sums[i] * sums[j] * inv_n) * inv_nm1
    }))
}

/// Squared Frobenius distance between source and target covariances, scaled
/// by `1/(4 d^2)`. Gradients with respect to both batches follow the chain
/// rule through the covariance: `centered(X) * (C_s - C_t) / ((n_x-1) d^2)`,
/// negated for the target side.
pub fn coral_loss(source: &Matrix, target: &Matrix) -> Result<GradPair> {
    if source.cols() != target.cols() {
        return Err(Error::dim("coral_loss", source.shape(), target.shape()));
    }
    let d = source.cols();
    let c_s = covariance(source).map_err(|_| Error::DegenerateBatch {
        op: "coral_loss",
        min: 2,
        got: source.rows(),
    })?;
    let c_t = covariance(target).map_err(|_| Error::DegenerateBatch {
        op: "coral_loss",
        min: 2,
        got: target.rows(),
    })?;
    let delta = c_s.sub(&c_t)?;
    let d_sq = (d * d) as f64;
    let value = delta.frobenius_sq() / (4.0 * d_sq);

    let grad_of = |batch: &Matrix, sign: f64| -> Result<Matrix> {
        let scale = sign / ((batch.rows() - 1) as f64 * d_sq);
        Ok(batch.center_rows().matmul(&delta)?.scale(scale))
    };
    let g_s = grad_of(source, 1.0)?;
    let g_t = grad_of(target, -1.0)?;
    Ok(GradPair {
        value,
        grads: vec![g_s, g_t],
    })
}

/// Linear-kernel maximum mean discrepancy: the Euclidean norm of the
/// difference between the two batch means. The gradient at exactly zero is
/// taken as zero; trainers use the squared distance, whose gradient is
/// `2 * value * grad` and therefore smooth there.
pub fn mmd_linear(source: &Matrix, target: &Matrix) -> Result<GradPair> {
    if source.cols() != target.cols() {
        return Err(Error::dim("mmd_linear", source.shape(), target.shape()));
    }
    for (batch, op) in [
        (source, "mmd_linear(source)"),
        (target, "mmd_linear(target)"),
    ] {
        if batch.rows() == 0 {
            return Err(Error::DegenerateBatch { op, min: 1, got: 0 });
        }
    }
    let mean_s = source.row_mean();
    let mean_t = target.row_mean();
    let delta: Vec<f64> = mean_s.iter().zip(&mean_t).map(|(a, b)| a - b).collect();
    let value = delta.iter().map(|v| v * v).sum::<f64>().sqrt();

    let grad_for = |rows: usize, sign: f64| -> Matrix {
        if value == 0.0 {
            return Matrix::zeros(rows, delta.len());
        }
        let scale = sign / (value * rows as f64);
        Matrix::from_fn(rows, delta.len(), |_, j| delta[j] * scale)
    };
    let g_s = grad_for(source.rows(), 1.0);
    let g_t = grad_for(target.rows(), -1.0);
    Ok(GradPair {
        value,
        grads: vec![g_s, g_t],
    })
}

/// Mean negative log-likelihood of the labelled class:
/// `mean_i -ln(p[i, y_i] + eps)`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<GradPair> {
    if probs.rows() != labels.len() {
        return Err(Error::dim(
            "cross_entropy",
            probs.shape(),
            (labels.len(), 1),
        ));
    }
    let n = probs.rows();
    let mut grad = Matrix::zeros(n, probs.cols());
    let mut value = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= probs.cols() {
            return Err(Error::LabelOutOfRange {
                row: i,
                label,
                classes: probs.cols(),
            });
        }
        let p = probs.get(i, label) + LOG_EPS;
        value -= p.ln();
        grad.set(i, label, -inv_n / p);
    }
    Ok(GradPair {
        value: value * inv_n,
        grads: vec![grad],
    })
}

/// Shannon entropy of each prediction row, `-sum_c g_c ln g_c`, with the
/// `0 ln 0 = 0` convention. Rows must be probability vectors.
pub fn entropy(predictions: &Matrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(predictions.rows());
    for i in 0..predictions.rows() {
        let row = predictions.row(i);
        let sum: f64 = row.iter().sum();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > 1e-9 || min < -1e-12 {
            return Err(Error::NotAProbabilityRow { row: i, sum, min });
        }
        let h = row.iter().filter(|&&g| g > 0.0).map(|&g| -g * g.ln()).sum();
        out.push(h);
    }
    Ok(out)
}

/// Entropy-aware example weight `w(h) = 1 + e^{-h}`; confident predictions
/// (low entropy) get weights near 2, uncertain ones decay toward 1.
pub fn entropy_weight(h: f64) -> f64 {
    debug_assert!(h >= 0.0, "entropy is non-negative");
    1.0 + (-h).exp()
}

/// Per-row flattened outer product `f_i (x) g_i`, laid out so that entry
/// `a * g.cols() + b` is `f[i,a] * g[i,b]`. This is the joint variable the
/// conditional discriminator sees.
pub fn multilinear_map(f: &Matrix, g: &Matrix) -> Result<Matrix> {
    if f.rows() != g.rows() {
        return Err(Error::dim("multilinear_map", f.shape(), g.shape()));
    }
    let (df, dg) = (f.cols(), g.cols());
    let mut out = Matrix::zeros(f.rows(), df * dg);
    for i in 0..f.rows() {
        let frow = f.row(i);
        let grow = g.row(i);
        let orow = out.row_mut(i);
        for (a, &fa) in frow.iter().enumerate() {
            for (b, &gb) in grow.iter().enumerate() {
                orow[a * dg + b] = fa * gb;
            }
        }
    }
    Ok(out)
}

/// Back-propagate an upstream gradient through [`multilinear_map`]: returns
/// the gradients with respect to `f` and `g`.
pub fn multilinear_backward(f: &Matrix, g: &Matrix, d_joint: &Matrix) -> Result<(Matrix, Matrix)> {
    let (df, dg) = (f.cols(), g.cols());
    if d_joint.rows() != f.rows() || d_joint.cols() != df * dg {
        return Err(Error::dim(
            "multilinear_backward",
            d_joint.shape(),
            (f.rows(), df * dg),
        ));
    }
    let mut grad_f = Matrix::zeros(f.rows(), df);
    let mut grad_g = Matrix::zeros(g.rows(), dg);
    for i in 0..f.rows() {
        for a in 0..df {
            let mut acc = 0.0;
            for b in 0..dg {
                acc += d_joint.get(i, a * dg + b) * g.get(i, b);
            }
            grad_f.set(i, a, acc);
        }
        for b in 0..dg {
            let mut acc = 0.0;
            for a in 0..df {
                acc += d_joint.get(i, a * dg + b) * f.get(i, a);
            }
            grad_g.set(i, b, acc);
        }
    }
    Ok((grad_f, grad_g))
}

/// Domain-adversarial binary cross-entropy over the combined batch:
/// source examples are labelled 1, target examples 0, and each term is
/// scaled by its (constant) weight. With unit weights this is the plain
/// conditional-adversarial objective; entropy-aware weights give the
/// entropy-conditioned variant. A chance-level discriminator scores ln 2.
///
/// Gradients are with respect to the discriminator output probabilities;
/// entries pinned by the eps-clamp get a zero gradient, matching the
/// flat clamped forward value.
pub fn adversarial_loss(
    d_src: &Matrix,
    d_tgt: &Matrix,
    weights_src: &[f64],
    weights_tgt: &[f64],
) -> Result<GradPair> {
    if d_src.cols() != 1 || d_src.rows() != weights_src.len() {
        return Err(Error::dim(
            "adversarial_loss",
            d_src.shape(),
            (weights_src.len(), 1),
        ));
    }
    if d_tgt.cols() != 1 || d_tgt.rows() != weights_tgt.len() {
        return Err(Error::dim(
            "adversarial_loss",
            d_tgt.shape(),
            (weights_tgt.len(), 1),
        ));
    }
    for (batch, op) in [
        (d_src, "adversarial_loss(source)"),
        (d_tgt, "adversarial_loss(target)"),
    ] {
        if batch.rows() == 0 {
            return Err(Error::DegenerateBatch { op, min: 1, got: 0 });
        }
    }
    let n_total = (d_src.rows() + d_tgt.rows()) as f64;
    let inv_n = 1.0 / n_total;

    let mut value = 0.0;
    let mut g_src = Matrix::zeros(d_src.rows(), 1);
    for i in 0..d_src.rows() {
        let raw = d_src.get(i, 0);
        let p = raw.clamp(LOG_EPS, 1.0 - LOG_EPS);
        value -= weights_src[i] * p.ln();
        if raw > LOG_EPS && raw < 1.0 - LOG_EPS {
            g_src.set(i, 0, -weights_src[i] * inv_n / p);
        }
    }
    let mut g_tgt = Matrix::zeros(d_tgt.rows(), 1);
    for j in 0..d_tgt.rows() {
        let raw = d_tgt.get(j, 0);
        let p = raw.clamp(LOG_EPS, 1.0 - LOG_EPS);
        value -= weights_tgt[j] * (1.0 - p).ln();
        if raw > LOG_EPS && raw < 1.0 - LOG_EPS {
            g_tgt.set(j, 0, weights_tgt[j] * inv_n / (1.0 - p));
        }
    }
    Ok(GradPair {
        value: value * inv_n,
        grads: vec![g_src, g_tgt],
    })
}

/// Joint objective `cls + lambda * transfer`.
pub fn total_loss(cls: f64, transfer: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    cls + lambda * transfer
}

/// Evaluate a schedule at a 1-based epoch.
pub fn lambda_value(schedule: &LambdaSchedule, epoch: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::EpochOutOfRange { op: "lambda_value" });
    }
    Ok(match *schedule {
        LambdaSchedule::Constant(base) => base,
        LambdaSchedule::InverseEpoch(base) => base / epoch as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn covariance_of_identical_rows_is_zero() {
        let d = mat(&[&[1.0, -2.0, 3.0], &[1.0, -2.0, 3.0]]);
        let c = covariance(&d).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn covariance_single_column() {
        // (4 - (1/2)*2*2) / (2-1) = 2
        let d = mat(&[&[0.0], &[2.0]]);
        let c = covariance(&d).unwrap();
        assert_eq!(c.get(0, 0), 2.0);
    }

    #[test]
    fn covariance_two_by_two() {
        let d = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = covariance(&d).unwrap();
        assert_eq!(c.data(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn covariance_rejects_single_row() {
        let d = mat(&[&[1.0, 2.0]]);
        assert!(matches!(
            covariance(&d),
            Err(Error::DegenerateBatch { got: 1, .. })
        ));
    }

    #[test]
    fn coral_of_equal_batches_is_exactly_zero() {
        let d = mat(&[&[0.3, -1.2], &[2.0, 0.7], &[-0.5, 0.1]]);
        let pair = coral_loss(&d, &d).unwrap();
        assert_eq!(pair.value, 0.0);
        assert_eq!(pair.grads[0].max_abs(), 0.0);
        assert_eq!(pair.grads[1].max_abs(), 0.0);
    }

    #[test]
    fn coral_hand_computed_value() {
        // C_s = [[2]], C_t = [[0]], d = 1: (2-0)^2 / 4 = 1.
        let s = mat(&[&[0.0], &[2.0]]);
        let t = mat(&[&[0.0], &[0.0]]);
        let pair = coral_loss(&s, &t).unwrap();
        assert!((pair.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coral_column_mismatch() {
        let s = mat(&[&[0.0, 1.0], &[2.0, 0.0]]);
        let t = mat(&[&[0.0], &[0.0]]);
        assert!(matches!(
            coral_loss(&s, &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mmd_of_identical_batches_is_zero() {
        let d = mat(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let pair = mmd_linear(&d, &d).unwrap();
        assert_eq!(pair.value, 0.0);
        assert_eq!(pair.grads[0].max_abs(), 0.0);
    }

    #[test]
    fn mmd_hand_computed_value() {
        let s = mat(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let t = mat(&[&[0.0, 0.0]]);
        let pair = mmd_linear(&s, &t).unwrap();
        assert!((pair.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_rejects_empty_batch() {
        let s = mat(&[&[0.0, 0.0]]);
        let t = Matrix::zeros(0, 2);
        assert!(matches!(
            mmd_linear(&s, &t),
            Err(Error::DegenerateBatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_one_hot_is_almost_zero() {
        let p = mat(&[&[1.0, 0.0]]);
        let pair = cross_entropy(&p, &[0]).unwrap();
        assert!(pair.value.abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let p = mat(&[&[0.5, 0.5]]);
        let pair = cross_entropy(&p, &[1]).unwrap();
        assert!((pair.value - 2.0f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_direct_formula() {
        let p = mat(&[&[0.25, 0.75]]);
        let pair = cross_entropy(&p, &[1]).unwrap();
        assert!((pair.value + 0.75f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let p = mat(&[&[0.5, 0.5]]);
        assert!(matches!(
            cross_entropy(&p, &[2]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let p = mat(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(entropy(&p).unwrap(), vec![0.0]);
    }

    #[test]
    fn entropy_uniform_is_ln_c() {
        let c = 5;
        let p = Matrix::from_fn(1, c, |_, _| 1.0 / c as f64);
        let h = entropy(&p).unwrap();
        assert!((h[0] - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_half_half() {
        let p = mat(&[&[0.5, 0.5]]);
        let h = entropy(&p).unwrap();
        assert!((h[0] - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_rejects_unnormalized_row_naming_it() {
        let p = mat(&[&[0.5, 0.5], &[0.9, 0.3]]);
        match entropy(&p) {
            Err(Error::NotAProbabilityRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected NotAProbabilityRow, got {other:?}"),
        }
    }

    #[test]
    fn entropy_weight_known_points() {
        assert_eq!(entropy_weight(0.0), 2.0);
        assert_eq!(entropy_weight(2.0f64.ln()), 1.5);
        assert!(entropy_weight(50.0) - 1.0 < 1e-20);
    }

    #[test]
    fn multilinear_small_example() {
        let f = mat(&[&[1.0, 2.0]]);
        let g = mat(&[&[3.0, 4.0]]);
        let h = multilinear_map(&f, &g).unwrap();
        assert_eq!(h.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn multilinear_office_scale_width() {
        let f = Matrix::zeros(2, 256);
        let g = Matrix::zeros(2, 31);
        let h = multilinear_map(&f, &g).unwrap();
        assert_eq!(h.cols(), 7936);
    }

    #[test]
    fn multilinear_row_mismatch() {
        let f = Matrix::zeros(2, 3);
        let g = Matrix::zeros(3, 3);
        assert!(multilinear_map(&f, &g).is_err());
    }

    #[test]
    fn adversarial_chance_level_is_ln2() {
        let half = Matrix::from_fn(4, 1, |_, _| 0.5);
        let w = vec![1.0; 4];
        let pair = adversarial_loss(&half, &half, &w, &w).unwrap();
        assert!((pair.value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_perfect_discriminator_approaches_zero() {
        let ones = Matrix::from_fn(3, 1, |_, _| 1.0);
        let zeros = Matrix::zeros(3, 1);
        let w = vec![1.0; 3];
        let pair = adversarial_loss(&ones, &zeros, &w, &w).unwrap();
        assert!(pair.value.abs() < 1e-11);
        // clamped entries carry no gradient
        assert_eq!(pair.grads[0].max_abs(), 0.0);
        assert_eq!(pair.grads[1].max_abs(), 0.0);
    }

    #[test]
    fn adversarial_is_linear_in_weights() {
        let p_s = mat(&[&[0.6], &[0.3]]);
        let p_t = mat(&[&[0.2], &[0.8]]);
        let unit = adversarial_loss(&p_s, &p_t, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let doubled = adversarial_loss(&p_s, &p_t, &[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(doubled.value, 2.0 * unit.value);
    }

    #[test]
    fn adversarial_length_mismatch() {
        let p = Matrix::zeros(2, 1);
        assert!(adversarial_loss(&p, &p, &[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn adversarial_rejects_empty_domains() {
        let p = mat(&[&[0.5], &[0.5]]);
        let empty = Matrix::zeros(0, 1);
        assert!(matches!(
            adversarial_loss(&p, &empty, &[1.0, 1.0], &[]),
            Err(Error::DegenerateBatch { .. })
        ));
        assert!(matches!(
            adversarial_loss(&empty, &p, &[], &[1.0, 1.0]),
            Err(Error::DegenerateBatch { .. })
        ));
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(1.5, 7.0, 0.0), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn lambda_schedule_values() {
        let inv = LambdaSchedule::InverseEpoch(1.0);
        assert_eq!(lambda_value(&inv, 1).unwrap(), 1.0);
        assert_eq!(lambda_value(&inv, 10).unwrap(), 0.1);
        let c = LambdaSchedule::Constant(0.25);
        assert_eq!(lambda_value(&c, 3).unwrap(), 0.25);
        assert!(lambda_value(&c, 0).is_err());
    }

    #[test]
    fn total_loss_with_inverse_epoch_schedule() {
        let lam = lambda_value(&LambdaSchedule::InverseEpoch(1.0), 10).unwrap();
        assert_eq!(total_loss(3.0, 2.0, lam), 3.0 + 0.1 * 2.0);
    }
}
