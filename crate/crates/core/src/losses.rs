//! Contrastive and hyperspherical training losses.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const TAU_PARAM: &str = "loss.tau_raw";
pub const DEFAULT_LAYER_P: f64 = 0.3;

/// Whether the positive pair sits in the InfoNCE denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfoNceMode {
    /// Denominator over negatives only.
    NegativesOnly,
    /// Standard softmax cross-entropy form.
    Conventional,
}

impl fmt::Display for InfoNceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfoNceMode::NegativesOnly => "negatives-only",
            InfoNceMode::Conventional => "conventional",
        })
    }
}

impl FromStr for InfoNceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negatives-only" => Ok(InfoNceMode::NegativesOnly),
            "conventional" => Ok(InfoNceMode::Conventional),
            other => Err(Error::config(format!("unknown InfoNCE mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParams {
    pub p: f64,
    pub mode: InfoNceMode,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            p: DEFAULT_LAYER_P,
            mode: InfoNceMode::Conventional,
        }
    }
}

impl LossParams {
    /// Adds the learnable temperature, `τ = exp(tau_raw)`, starting at 0.07.
    pub fn register(store: &mut ParameterStore) -> Result<()> {
        store.insert(TAU_PARAM, Tensor::scalar(0.07f64.ln()), true)?;
        Ok(())
    }

    pub fn tau(store: &ParameterStore) -> Result<f64> {
        Ok(store.value(TAU_PARAM)?.data()[0].exp())
    }
}

/// Which terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub infonce: bool,
    pub hyperspherical_final: bool,
    pub hyperspherical_layers: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            infonce: true,
            hyperspherical_final: true,
            hyperspherical_layers: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub infonce: f64,
    pub hyperspherical_final: f64,
    pub hyperspherical_layers: f64,
    pub total: f64,
}

fn inverse_permutation(truth: &[usize]) -> Result<Vec<usize>> {
    let m = truth.len();
    let mut inv = vec![usize::MAX; m];
    for (i, &j) in truth.iter().enumerate() {
        if j >= m || inv[j] != usize::MAX {
            return Err(Error::Contract(format!("truth is not a permutation of 0..{m}")));
        }
        inv[j] = i;
    }
    Ok(inv)
}

/// Sum over anchors (rows of `logits`) of `lse(row) − row[pos]`.
fn anchor_sum(tape: &mut Tape<'_>, logits: NodeId, pos: &[usize], mode: InfoNceMode) -> NodeId {
    let positive = tape.gather(logits, pos);
    let exclude = match mode {
        InfoNceMode::NegativesOnly => Some(pos),
        InfoNceMode::Conventional => None,
    };
    let lse = tape.logsumexp_rows(logits, exclude);
    let diff = tape.sub(lse, positive);
    tape.sum(diff)
}

/// Symmetric InfoNCE, mean over the `2m` anchors. `inv_tau` is a `1×1` node.
pub fn info_nce(
    tape: &mut Tape<'_>,
    f1: NodeId,
    f2: NodeId,
    truth: &[usize],
    inv_tau: NodeId,
    mode: InfoNceMode,
) -> Result<NodeId> {
    let (a, b) = (tape.value(f1), tape.value(f2));
    let m = a.rows();
    if m < 2 {
        return Err(Error::Contract("InfoNCE needs at least two keypoints".into()));
    }
    if b.rows() != m || a.cols() != b.cols() || truth.len() != m {
        return Err(Error::shape(format!(
            "InfoNCE inputs {:?}, {:?} with {} truth entries",
            a.shape(),
            b.shape(),
            truth.len()
        )));
    }
    let inv = inverse_permutation(truth)?;
    let c12 = tape.matmul_bt(f1, f2);
    let c12 = tape.scale_by(c12, inv_tau);
    let c21 = tape.matmul_bt(f2, f1);
    let c21 = tape.scale_by(c21, inv_tau);
    let s12 = anchor_sum(tape, c12, truth, mode);
    let s21 = anchor_sum(tape, c21, &inv, mode);
    let s = tape.add(s12, s21);
    Ok(tape.scale(s, 1.0 / (2 * m) as f64))
}

/// `Σ_i max_{j≠i} ⟨f_i, f_j⟩`; zero for a single row.
pub fn hyperspherical(tape: &mut Tape<'_>, f: NodeId) -> NodeId {
    if tape.value(f).rows() < 2 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let c = tape.matmul_bt(f, f);
    let best = tape.max_offdiag_rows(c);
    tape.sum(best)
}

/// Per-layer weights `k·p` for `k = 1..=layers`.
pub fn layer_weights(layers: usize, p: f64) -> Vec<f64> {
    (1..=layers).map(|k| k as f64 * p).collect()
}

/// `Σ_k k·p · ½(HS(s1_k) + HS(s2_k))`.
pub fn layer_hyperspherical(tape: &mut Tape<'_>, snapshots1: &[NodeId], snapshots2: &[NodeId], p: f64) -> Result<NodeId> {
    if snapshots1.is_empty() || snapshots1.len() != snapshots2.len() {
        return Err(Error::shape(format!(
            "layer loss needs matching non-empty snapshot lists, got {} and {}",
            snapshots1.len(),
            snapshots2.len()
        )));
    }
    let weights = layer_weights(snapshots1.len(), p);
    let mut acc: Option<NodeId> = None;
    for ((&a, &b), w) in snapshots1.iter().zip(snapshots2).zip(weights) {
        let ha = hyperspherical(tape, a);
        let hb = hyperspherical(tape, b);
        let h = tape.add(ha, hb);
        let term = tape.scale(h, 0.5 * w);
        acc = Some(match acc {
            Some(x) => tape.add(x, term),
            None => term,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Inputs to [`total_loss`]: final keypoint tokens and per-layer snapshots.
pub struct LossInputs<'a> {
    pub f1: NodeId,
    pub f2: NodeId,
    pub snapshots1: &'a [NodeId],
    pub snapshots2: &'a [NodeId],
    pub truth: &'a [usize],
}

/// Unweighted sum of the enabled terms. Disabled terms report 0.
pub fn total_loss(
    tape: &mut Tape<'_>,
    inputs: &LossInputs<'_>,
    params: &LossParams,
    terms: LossTerms,
) -> Result<(NodeId, LossReport)> {
    let mut report = LossReport::default();
    let mut parts = Vec::new();
    if terms.infonce {
        let tau_raw = tape.param(TAU_PARAM)?;
        let neg = tape.scale(tau_raw, -1.0);
        let inv_tau = tape.exp(neg);
        let l = info_nce(tape, inputs.f1, inputs.f2, inputs.truth, inv_tau, params.mode)?;
        report.infonce = tape.scalar(l);
        parts.push(l);
    }
    if terms.hyperspherical_final {
        let a = hyperspherical(tape, inputs.f1);
        let b = hyperspherical(tape, inputs.f2);
        let s = tape.add(a, b);
        let l = tape.scale(s, 0.5);
        report.hyperspherical_final = tape.scalar(l);
        parts.push(l);
    }
    if terms.hyperspherical_layers {
        let l = layer_hyperspherical(tape, inputs.snapshots1, inputs.snapshots2, params.p)?;
        report.hyperspherical_layers = tape.scalar(l);
        parts.push(l);
    }
    let total = match parts.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &x| tape.add(acc, x)),
    };
    report.total = tape.scalar(total);
    Ok((total, report))
}
