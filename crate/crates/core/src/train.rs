//! Adam training loop, evaluation tables and run persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, EpochMetrics, NamedArray};
use crate::dataset::PreparedPair;
use crate::error::{Error, Result};
use crate::matching::accuracy;
use crate::model::Model;
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros = |(_, e): (&str, &crate::params::ParamEntry)| Tensor::zeros(e.value.shape());
        Self {
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    /// Applies the gradients held in `store`; `lr_of(name)` gives each
    /// parameter's learning rate.
    pub fn update(&mut self, store: &mut ParameterStore, lr_of: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for idx in 0..store.len() {
            let lr = lr_of(store.name(idx));
            let e = store.entry_mut(idx);
            if !e.trainable {
                continue;
            }
            let (m, v) = (self.m[idx].data_mut(), self.v[idx].data_mut());
            let grad = e.grad.data();
            let value = e.value.data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                value[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mean loss and summed gradients over `batch`, computed in parallel and
/// reduced in batch order.
pub fn batch_gradients(model: &Model, store: &ParameterStore, batch: &[&PreparedPair]) -> Result<(f64, Gradients)> {
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|p| model.loss_and_grad(store, p).map(|(r, g)| (r.total, g)))
        .collect::<Result<_>>()?;
    let mut sum = Gradients::new(store.len());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        sum.merge(g);
    }
    Ok((loss / batch.len() as f64, sum))
}

/// Model parameters plus optimizer state across epochs.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub store: ParameterStore,
    pub adam: Adam,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let store = model.init_params(model.config.seed)?;
        let adam = Adam::new(&store);
        Ok(Self {
            model,
            store,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(model: &'m Model, ck: &Checkpoint) -> Result<Self> {
        let store = ck.store()?;
        let reference = model.init_params(0)?;
        for (name, e) in reference.iter() {
            let got = store.value(name)?;
            if got.shape() != e.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    got.shape(),
                    e.value.shape()
                )));
            }
        }
        let mut adam = Adam::new(&store);
        if !ck.moments.is_empty() {
            for (i, (m, v)) in ck.moments.iter().enumerate() {
                adam.m[i] = m.to_tensor()?;
                adam.v[i] = v.to_tensor()?;
            }
            adam.step = ck.adam_step;
        }
        Ok(Self {
            model,
            store,
            adam,
            epoch: ck.epoch,
            history: ck.history.clone(),
        })
    }

    fn lr_of(&self, lr: f64) -> impl Fn(&str) -> f64 {
        let f = self.model.config.backbone_lr_factor;
        move |name: &str| if Model::is_backbone_param(name) { lr * f } else { lr }
    }

    /// One optimizer step on the batch mean. A non-finite loss or gradient
    /// leaves parameters and moments untouched and returns an error.
    pub fn step(&mut self, batch: &[&PreparedPair], lr: f64) -> Result<f64> {
        let (loss, grads) = batch_gradients(self.model, &self.store, batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {}", self.adam.step + 1)));
        }
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {}", self.adam.step + 1)));
        }
        self.store.zero_grad();
        self.store.accumulate(&grads, 1.0 / batch.len() as f64);
        let lr_of = self.lr_of(lr);
        self.adam.update(&mut self.store, lr_of);
        self.store.zero_grad();
        Ok(loss)
    }

    /// Runs the next epoch over a seeded shuffle of `train`.
    pub fn run_epoch(&mut self, train: &[PreparedPair], val: &[PreparedPair]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let epoch = self.epoch + 1;
        let lr = self.model.config.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.model.config.batch_size) {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch, lr)?;
            steps += 1;
        }
        let val_accuracy = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(self.model, &self.store, val)?.mean_accuracy
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: total / steps as f64,
            steps,
            val_accuracy,
        };
        self.epoch = epoch;
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Runs the remaining configured epochs, calling `on_epoch` after each.
    /// On a non-finite loss the error is returned and nothing further is
    /// reported, so the last checkpoint written by `on_epoch` stays intact.
    pub fn train(
        &mut self,
        train: &[PreparedPair],
        val: &[PreparedPair],
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.model.config.epochs {
            let m = self.run_epoch(train, val)?;
            on_epoch(self, &m)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.store.iter().map(|(n, e)| NamedArray::from_tensor(n, &e.value)).collect();
        let moments = self
            .store
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (NamedArray::from_tensor(n, &self.adam.m[i]), NamedArray::from_tensor(n, &self.adam.v[i])))
            .collect();
        Checkpoint {
            config: self.model.config.clone(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            params,
            moments,
            history: self.history.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub pairs: usize,
    /// Mean per-pair accuracy within the class.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassRow>,
    /// Unweighted mean over classes.
    pub mean_accuracy: f64,
    pub pairs: usize,
    pub non_injective_pairs: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned plain-text table with accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8}  {:>6}  {:>8}", "class", "pairs", "acc(%)");
        for r in &self.classes {
            let _ = writeln!(s, "{:>8}  {:>6}  {:>8.1}", r.class_id, r.pairs, 100.0 * r.accuracy);
        }
        let _ = writeln!(s, "{:>8}  {:>6}  {:>8.1}", "mean", self.pairs, 100.0 * self.mean_accuracy);
        s
    }
}

/// Full inference on every pair, grouped by class.
pub fn evaluate(model: &Model, store: &ParameterStore, pairs: &[PreparedPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let per_pair: Vec<(usize, f64, bool)> = pairs
        .par_iter()
        .map(|p| {
            let inf = model.infer(store, p)?;
            Ok((p.class_id, accuracy(&inf.matching.assignment, &p.truth)?, inf.matching.non_injective))
        })
        .collect::<Result<_>>()?;
    Ok(report_from(&per_pair))
}

fn report_from(per_pair: &[(usize, f64, bool)]) -> EvalReport {
    let mut by_class: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(c, a, _) in per_pair {
        let e = by_class.entry(c).or_default();
        e.0 += 1;
        e.1 += a;
    }
    let classes: Vec<ClassRow> = by_class
        .into_iter()
        .map(|(class_id, (n, s))| ClassRow {
            class_id,
            pairs: n,
            accuracy: s / n as f64,
        })
        .collect();
    let mean_accuracy = classes.iter().map(|r| r.accuracy).sum::<f64>() / classes.len() as f64;
    EvalReport {
        classes,
        mean_accuracy,
        pairs: per_pair.len(),
        non_injective_pairs: per_pair.iter().filter(|p| p.2).count(),
    }
}

/// `epoch,lr,train_loss,val_accuracy` rows for plotting.
pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,lr,train_loss,steps,val_accuracy\n");
    for e in history {
        let _ = writeln!(s, "{},{:e},{},{},{}", e.epoch, e.lr, e.train_loss, e.steps, e.val_accuracy);
    }
    s
}
