//! Per-token target distributions and the reference loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::PAD;

const LOG_FLOOR: f64 = 1e-12;

/// `N×|V|` indicator rows for `tokens`.
pub fn onehot(tokens: &[usize], vocab_size: usize) -> Result<Tensor> {
    let mut data = vec![0.0; tokens.len() * vocab_size];
    for (r, &t) in tokens.iter().enumerate() {
        if t >= vocab_size {
            return Err(Error::invalid(format!("token {t} outside vocabulary of {vocab_size}")));
        }
        data[r * vocab_size + t] = 1.0;
    }
    Tensor::new(&[tokens.len(), vocab_size], data)
}

/// `(1−α)·onehot + α·teacher`.
pub fn smooth_targets_kd(onehot: &Tensor, teacher: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if onehot.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            op: "smooth_targets_kd",
            lhs: onehot.shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    let data = onehot
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(p, q)| (1.0 - alpha) * p + alpha * q)
        .collect();
    Tensor::new(onehot.shape(), data)
}

/// Uniform distribution over every id except PAD, one row per token.
pub fn uniform_non_pad(rows: usize, vocab_size: usize) -> Tensor {
    let p = 1.0 / (vocab_size - 1) as f64;
    let mut data = vec![p; rows * vocab_size];
    for r in 0..rows {
        data[r * vocab_size + PAD] = 0.0;
    }
    Tensor::new(&[rows, vocab_size], data).expect("sized")
}

/// `(1−ε)·onehot + ε·uniform` with the uniform part over non-PAD ids.
pub fn smooth_targets_label(onehot: &Tensor, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    smooth_targets_kd(onehot, &uniform_non_pad(onehot.rows(), onehot.cols()), eps)
}

/// `−Σ_rows Σ_v target·log max(p, 1e−12)` over probability rows; rows whose
/// `mask` entry is false (padding) are skipped.
pub fn nll_loss(probs: &Tensor, targets: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    if probs.shape() != targets.shape() || mask.is_some_and(|m| m.len() != probs.rows()) {
        return Err(Error::ShapeMismatch {
            op: "nll_loss",
            lhs: probs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let mut loss = 0.0;
    for r in 0..probs.rows() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        for (p, t) in probs.row(r).iter().zip(targets.row(r)) {
            if *t != 0.0 {
                loss -= t * p.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(loss)
}
