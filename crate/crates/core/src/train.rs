//! Adam training with early stopping, and the OA / AA / kappa protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledPatchSet, Split};
use crate::error::{shape_err, Error, Result};
use crate::net::{
    backward_from_cache, forward, forward_train, softmax_cross_entropy, update_running_stats,
    NetworkConfig, NetworkParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            patience: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} must lie in (0, 1)"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return bad("lr and eps must be positive".into());
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments for every trainable entry.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, tc: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!("optimizer state does not match the parameter set"));
        }
        self.t += 1;
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads.entries()).enumerate() {
            if !e.trainable {
                continue;
            }
            if g.tensor.shape() != e.tensor.shape() {
                return Err(shape_err!("{}: gradient {:?} vs {:?}", e.name, g.tensor.shape(), e.tensor.shape()));
            }
            adam_update(e.tensor.data_mut(), g.tensor.data(), &mut self.m[i], &mut self.v[i], self.t, tc);
        }
        Ok(())
    }
}

/// One Adam step at (1-based) step count `t`.
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, tc: &TrainConfig) {
    let c1 = 1.0 - tc.beta1.powi(t);
    let c2 = 1.0 - tc.beta2.powi(t);
    for j in 0..p.len() {
        m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g[j];
        v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g[j] * g[j];
        p[j] -= tc.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + tc.eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = initial parameters).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(shape_err!("confusion matrix must be square"));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.classes).map(|k| self.get(k, k)).sum::<u64>() as f64 / t as f64
    }

    /// Recall per class; `None` for classes with no samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let n = self.row_sum(k);
                (n > 0).then(|| self.get(k, k) as f64 / n as f64)
            })
            .collect()
    }

    /// Mean recall over the classes that occur.
    pub fn average_accuracy(&self) -> f64 {
        let per = self.per_class_accuracy();
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        if present.len() < per.len() {
            let absent: Vec<usize> = (0..per.len()).filter(|&k| per[k].is_none()).map(|k| k + 1).collect();
            log::warn!("classes {absent:?} have no samples and are left out of AA");
        }
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    /// Chance agreement from the row and column marginals.
    pub fn expected_agreement(&self) -> f64 {
        let t = self.total() as f64;
        if t == 0.0 {
            return 0.0;
        }
        (0..self.classes)
            .map(|k| self.row_sum(k) as f64 * self.col_sum(k) as f64)
            .sum::<f64>()
            / (t * t)
    }

    pub fn kappa(&self) -> f64 {
        let (po, pe) = (self.overall_accuracy(), self.expected_agreement());
        if pe >= 1.0 {
            return if po >= 1.0 { 1.0 } else { 0.0 };
        }
        (po - pe) / (1.0 - pe)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for k in 0..self.classes {
            s.push_str(&format!(",{}", k + 1));
        }
        s.push('\n');
        for i in 0..self.classes {
            s.push_str(&(i + 1).to_string());
            for j in 0..self.classes {
                s.push_str(&format!(",{}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: Split,
    pub samples: usize,
    pub loss: f64,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode loss and confusion matrix over the given samples.
pub fn evaluate_indices(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    set: &LabeledPatchSet,
    idx: &[usize],
) -> Result<(f64, ConfusionMatrix)> {
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut cm = ConfusionMatrix::new(cfg.classes);
    let mut loss = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = set.batch(chunk)?;
        let logits = forward(params, cfg, &x)?;
        loss += softmax_cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
        let k = cfg.classes;
        for (b, &t) in labels.iter().enumerate() {
            cm.add(t, argmax(&logits.data()[b * k..(b + 1) * k]));
        }
    }
    Ok((loss / idx.len() as f64, cm))
}

pub fn evaluate(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    set: &LabeledPatchSet,
    split: Split,
) -> Result<Metrics> {
    let idx = set.indices(split);
    let (loss, cm) = evaluate_indices(params, cfg, set, &idx)?;
    Ok(Metrics {
        split,
        samples: idx.len(),
        loss,
        overall_accuracy: cm.overall_accuracy(),
        average_accuracy: cm.average_accuracy(),
        kappa: cm.kappa(),
        per_class_accuracy: cm.per_class_accuracy(),
        confusion: cm,
    })
}

fn check_compatible(cfg: &NetworkConfig, set: &LabeledPatchSet) -> Result<()> {
    if set.patch_extent() != cfg.input {
        return Err(shape_err!("patches {:?} but the network expects {:?}", set.patch_extent(), cfg.input));
    }
    if set.classes > cfg.classes {
        return Err(Error::LabelOutOfRange {
            label: set.classes - 1,
            classes: cfg.classes,
        });
    }
    Ok(())
}

/// One pass over the shuffled training split. Returns the mean batch loss.
pub fn train_epoch(
    params: &mut NetworkParams,
    adam: &mut Adam,
    cfg: &NetworkConfig,
    set: &LabeledPatchSet,
    order: &[usize],
    tc: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in order.chunks(tc.batch_size) {
        let (x, labels) = set.batch(chunk)?;
        let cache = forward_train(params, cfg, &x)?;
        let (loss, dlogits) = softmax_cross_entropy(cache.logits(), &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = backward_from_cache(params, cfg, &cache, &dlogits)?;
        update_running_stats(params, &cache, cfg.bn_momentum)?;
        adam.step(params, &grads, tc)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / order.len() as f64)
}

/// Trains on the training split and keeps the parameters with the lowest
/// validation loss. Logged accuracies come from [`evaluate_indices`].
pub fn train(
    cfg: &NetworkConfig,
    init: NetworkParams,
    set: &LabeledPatchSet,
    tc: &TrainConfig,
) -> Result<(NetworkParams, History)> {
    tc.validate()?;
    check_compatible(cfg, set)?;
    let train_idx = set.indices(Split::Train);
    let val_idx = set.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut history = History::default();
    let (mut best_loss, _) = evaluate_indices(&params, cfg, set, &val_idx)?;
    let mut best = params.clone();
    let mut stale = 0;
    let mut order = train_idx.clone();
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        train_epoch(&mut params, &mut adam, cfg, set, &order, tc)?;
        let (train_loss, tcm) = evaluate_indices(&params, cfg, set, &train_idx)?;
        let (val_loss, vcm) = evaluate_indices(&params, cfg, set, &val_idx)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_acc: tcm.overall_accuracy(),
            val_loss,
            val_acc: vcm.overall_accuracy(),
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {:.4}, val loss {val_loss:.4} acc {:.4}",
            rec.train_acc,
            rec.val_acc
        );
        history.epochs.push(rec);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = params.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            if stale >= tc.patience {
                history.stopped_early = epoch < tc.epochs;
                break;
            }
            stale += 1;
        }
    }
    Ok((best, history))
}

/// Batch convenience for callers holding a plain tensor.
pub fn predict(params: &NetworkParams, cfg: &NetworkConfig, x: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(params, cfg, x)?;
    Ok(logits.data().chunks(cfg.classes).map(argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let perfect = ConfusionMatrix::from_rows(&[vec![50, 0], vec![0, 50]]).unwrap();
        assert_eq!(
            (perfect.overall_accuracy(), perfect.average_accuracy(), perfect.kappa()),
            (1.0, 1.0, 1.0)
        );
        let chance = ConfusionMatrix::from_rows(&[vec![25, 25], vec![25, 25]]).unwrap();
        assert_eq!(chance.kappa(), 0.0);
        let cm = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap();
        assert_eq!(cm.overall_accuracy(), 0.7);
        assert_eq!(cm.expected_agreement(), 0.5);
        assert!((cm.kappa() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn absent_class_left_out_of_average() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(cm.per_class_accuracy()[1], None);
        assert!((cm.average_accuracy() - (0.75 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let tc = TrainConfig { lr: 0.1, ..Default::default() };
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &tc);
        assert!((p[0] + 0.1).abs() < 1e-8);
        let (mut q, mut m, mut v) = ([2.0], [0.0], [0.0]);
        for t in 1..5 {
            adam_update(&mut q, &[0.0], &mut m, &mut v, t, &tc);
        }
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(cm.to_csv(), "true\\pred,1,2\n1,1,2\n2,3,4\n");
    }
}
