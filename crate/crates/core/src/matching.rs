//! Cosine affinities, log-space Sinkhorn and row-argmax decoding.

use crate::autodiff::logsumexp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_SINKHORN_ITERS: usize = 20;

/// `m × m` cosine similarities between two sets of unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Tensor,
    pub iterations_used: usize,
    /// Largest `|row or column sum − 1|`.
    pub max_marginal_error: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    /// `assignment[i]` is the column matched to row `i`.
    pub assignment: Vec<usize>,
    /// Whether two rows picked the same column.
    pub non_injective: bool,
}

pub fn affinity(f1: &Tensor, f2: &Tensor) -> Result<AffinityMatrix> {
    if f1.cols() != f2.cols() {
        return Err(Error::shape(format!(
            "feature widths differ: {} vs {}",
            f1.cols(),
            f2.cols()
        )));
    }
    Ok(AffinityMatrix {
        values: f1.matmul_bt(f2)?,
    })
}

/// Largest deviation of any row or column sum from 1.
pub fn marginal_error(plan: &Tensor) -> f64 {
    let (r, c) = (plan.rows(), plan.cols());
    let mut worst: f64 = 0.0;
    for i in 0..r {
        worst = worst.max((plan.row(i).iter().sum::<f64>() - 1.0).abs());
    }
    for j in 0..c {
        let s: f64 = (0..r).map(|i| plan.get(i, j)).sum();
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

/// Sinkhorn scaling of `exp(C / temperature)` carried out on log values.
///
/// One round subtracts the row-wise log-sum-exp, then the column-wise one.
pub fn sinkhorn_log(c: &AffinityMatrix, temperature: f64, iters: usize) -> Result<TransportPlan> {
    let cv = &c.values;
    let (r, cols) = (cv.rows(), cv.cols());
    if r != cols {
        return Err(Error::config(format!(
            "Sinkhorn needs a square affinity matrix, got {r}×{cols}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    if iters == 0 {
        return Err(Error::config("at least one Sinkhorn round required"));
    }
    if !cv.is_finite() {
        return Err(Error::NonFinite("affinity matrix".into()));
    }
    let n = r;
    let mut log_k: Vec<f64> = cv.data().iter().map(|v| v / temperature).collect();
    let mut column = vec![0.0; n];
    for _ in 0..iters {
        for i in 0..n {
            let row = &mut log_k[i * n..(i + 1) * n];
            let lse = logsumexp(row, None);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        for j in 0..n {
            for i in 0..n {
                column[i] = log_k[i * n + j];
            }
            let lse = logsumexp(&column, None);
            for i in 0..n {
                log_k[i * n + j] -= lse;
            }
        }
    }
    let values = Tensor::matrix(n, n, log_k.into_iter().map(f64::exp).collect())?;
    let max_marginal_error = marginal_error(&values);
    Ok(TransportPlan {
        values,
        iterations_used: iters,
        max_marginal_error,
    })
}

/// Row-wise argmax; ties go to the lowest column.
pub fn decode_matching(plan: &TransportPlan) -> Matching {
    let a = &plan.values;
    let assignment: Vec<usize> = (0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut seen = vec![false; a.cols()];
    let non_injective = assignment.iter().any(|&j| std::mem::replace(&mut seen[j], true));
    Matching {
        assignment,
        non_injective,
    }
}

/// Fraction of rows matched to their ground-truth column.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} entries, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("cannot score an empty matching".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}
