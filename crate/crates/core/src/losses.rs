//! Training objectives, each as a plain scalar function and as a tape
//! recording for backpropagation.
//!
//! * triplet: `Σ max(0, δ − f(q, d⁺) + f(q, d⁻))`, divided by the batch size
//! * contrastive: in-batch InfoNCE over two dropout views of the same documents
//! * total: `L_t + λ · L_cl`

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::score;
use crate::params::Matrix;

/// Mean hinge over precomputed positive and negative scores.
pub fn triplet_loss(pos: &[f64], neg: &[f64], margin: f64) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if pos.len() != neg.len() {
        return Err(Error::DimensionMismatch("triplet score counts differ".into()));
    }
    let sum: f64 = pos
        .iter()
        .zip(neg)
        .map(|(p, n)| (margin - (p - n)).max(0.0))
        .sum();
    Ok(sum / pos.len() as f64)
}

/// Row-wise cosine between two `B × d` matrices, as `B × 1`.
pub fn rowwise_cosine(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let prod = tape.mul(an, bn)?;
    let ones = tape.input(Array2::ones((tape.shape(prod).1, 1)));
    tape.matmul(prod, ones)
}

/// Triplet loss over stacked query, positive and negative embeddings (`B × d` each).
pub fn triplet_loss_on(
    tape: &mut Tape<'_>,
    queries: Var,
    positives: Var,
    negatives: Var,
    margin: f64,
) -> Result<Var> {
    let b = tape.shape(queries).0;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let fp = rowwise_cosine(tape, queries, positives)?;
    let fn_ = rowwise_cosine(tape, queries, negatives)?;
    let gap = tape.sub(fp, fn_)?;
    let neg_gap = tape.scale(gap, -1.0);
    let hinge = tape.add_scalar(neg_gap, margin);
    let hinge = tape.relu(hinge);
    let total = tape.sum(hinge);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// In-batch contrastive loss for views `h` and `h_plus` (rows pair up).
pub fn contrastive_loss(h: &Matrix, h_plus: &Matrix, tau: f64) -> Result<f64> {
    let n = h.nrows();
    if n < 2 {
        return Err(Error::ContrastiveBatchTooSmall(n));
    }
    if h.dim() != h_plus.dim() {
        return Err(Error::DimensionMismatch("contrastive views differ in shape".into()));
    }
    let rows: Vec<Vec<f64>> = h.rows().into_iter().map(|r| r.to_vec()).collect();
    let plus: Vec<Vec<f64>> = h_plus.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = plus
            .iter()
            .map(|p| score(&rows[i], p).map(|s| s / tau))
            .collect::<Result<_>>()?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / n as f64)
}

pub fn contrastive_loss_on(tape: &mut Tape<'_>, h: Var, h_plus: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(h).0;
    if n < 2 {
        return Err(Error::ContrastiveBatchTooSmall(n));
    }
    if tape.shape(h) != tape.shape(h_plus) {
        return Err(Error::DimensionMismatch("contrastive views differ in shape".into()));
    }
    let hn = tape.normalize_rows(h);
    let pn = tape.normalize_rows(h_plus);
    let sims = tape.matmul_t(hn, pn)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let logp = tape.log_softmax(logits);
    let diag = tape.diag(logp)?;
    let mean = tape.mean(diag);
    Ok(tape.scale(mean, -1.0))
}

pub fn total_loss(task_loss: f64, cl_loss: f64, lambda: f64) -> f64 {
    task_loss + lambda * cl_loss
}

pub fn total_loss_on(tape: &mut Tape<'_>, task: Var, cl: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(cl, lambda);
    tape.add(task, weighted)
}
