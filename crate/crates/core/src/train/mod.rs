//! Dual-loss training with full-batch Adam and validation early stopping.

mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{one_hot, Alphabet, Cycle, PAD_LABEL};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricOptions, SegmentationReport};
use crate::model::{split_windows, Heads, PrecTime};
use crate::substrate::seed::{fork_indexed, Stream};
use crate::substrate::{ops, Adam, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without strict validation improvement before stopping.
    pub patience: usize,
    /// Weight of the final (refined) head's loss.
    pub w_final: f64,
    /// Weight of the intermediate (window-level) head's loss.
    pub w_intermediate: f64,
    /// Seeds the dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            max_epochs: 200,
            patience: 10,
            w_final: 2.0,
            w_intermediate: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.w_intermediate > 0.0 && self.w_final > self.w_intermediate && self.w_final.is_finite()) {
            return bad(format!(
                "loss weights need w_final > w_intermediate > 0, got {} and {}",
                self.w_final, self.w_intermediate
            ));
        }
        Ok(())
    }
}

/// A cycle prepared for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[S × T]`, `T` a multiple of the window length.
    pub input: Tensor,
    /// One-hot `[T × C]`.
    pub target: Tensor,
    /// Dense class index per timestep.
    pub classes: Vec<usize>,
    /// Timesteps that count towards loss and metrics.
    pub mask: Vec<bool>,
    /// Per-timestep loss weights summing to one.
    weights: Vec<f64>,
}

impl Sample {
    /// With `masked`, padded timesteps get zero loss weight and are skipped
    /// by metrics. Without it they are ordinary timesteps of the padding
    /// class, which must then be part of `alphabet`.
    pub fn new(cycle: &Cycle, alphabet: &Alphabet, masked: bool) -> Result<Self> {
        let padded = cycle.mask.iter().any(|&m| !m);
        if !masked && padded && !alphabet.contains(PAD_LABEL) {
            return Err(Error::Data(format!(
                "cycle {} is padded but the alphabet has no padding class",
                cycle.id
            )));
        }
        let target = one_hot(&cycle.labels, alphabet)?;
        let classes = alphabet.encode(&cycle.labels)?;
        let mask = if masked { cycle.mask.clone() } else { vec![true; cycle.len()] };
        let real = mask.iter().filter(|&&m| m).count();
        if real == 0 {
            return Err(Error::Data(format!("cycle {} has no recorded timesteps", cycle.id)));
        }
        let weights = mask.iter().map(|&m| if m { 1.0 / real as f64 } else { 0.0 }).collect();
        Ok(Self {
            id: cycle.id.clone(),
            input: cycle.sensors.clone(),
            target,
            classes,
            mask,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub fn prepare_samples(cycles: &[Cycle], alphabet: &Alphabet, masked: bool) -> Result<Vec<Sample>> {
    cycles.iter().map(|c| Sample::new(c, alphabet, masked)).collect()
}

/// `w_I·ℓ_I + w_F·ℓ_F` from finished distributions. Without a final head
/// the intermediate term alone is used with weight 1. `weights` are per-row
/// loss weights (default: mean over rows).
pub fn total_loss(
    intermediate: &Tensor,
    final_: Option<&Tensor>,
    target: &Tensor,
    weights: Option<&[f64]>,
    w_intermediate: f64,
    w_final: f64,
) -> Result<f64> {
    let li = ops::cross_entropy_weighted(intermediate, target, weights)?;
    match final_ {
        Some(f) => Ok(w_intermediate * li + w_final * ops::cross_entropy_weighted(f, target, weights)?),
        None => Ok(li),
    }
}

/// Graph version of [`total_loss`] for a recorded forward pass.
pub fn total_loss_node(g: &mut Graph<'_>, heads: &Heads, sample: &Sample, cfg: &TrainConfig) -> Result<NodeId> {
    let weights = Some(sample.weights.clone());
    let li = g.cross_entropy(heads.intermediate, sample.target.clone(), weights.clone())?;
    match heads.final_ {
        Some(f) => {
            let lf = g.cross_entropy(f, sample.target.clone(), weights)?;
            let li = g.scale(li, cfg.w_intermediate);
            let lf = g.scale(lf, cfg.w_final);
            g.add(li, lf)
        }
        None => Ok(li),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc_intermediate: f64,
    /// Absent when the model has no final head.
    pub val_acc_final: Option<f64>,
    /// Wall time; the only field that differs between identical runs.
    pub seconds: f64,
}

impl EpochRecord {
    /// Accuracy of the head that drives early stopping.
    pub fn monitored_acc(&self) -> f64 {
        self.val_acc_final.unwrap_or(self.val_acc_intermediate)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 if none.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy with wall times zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.seconds = 0.0;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc_intermediate,val_acc_final,seconds\n");
        for r in &self.records {
            let fin = r.val_acc_final.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc_intermediate, fin, r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

struct ValStats {
    loss: f64,
    acc_intermediate: f64,
    acc_final: Option<f64>,
}

fn validate_epoch(model: &PrecTime, samples: &[Sample], cfg: &TrainConfig) -> Result<ValStats> {
    let mut loss = 0.0;
    let (mut correct_i, mut correct_f, mut total) = (0usize, 0usize, 0usize);
    for s in samples {
        let pred = model.predict(&s.input)?;
        loss += total_loss(
            &pred.intermediate,
            pred.final_.as_ref(),
            &s.target,
            Some(&s.weights),
            cfg.w_intermediate,
            cfg.w_final,
        )?;
        let count = |probs: &Tensor| {
            probs
                .argmax_rows()
                .iter()
                .zip(&s.classes)
                .zip(&s.mask)
                .filter(|((p, t), &m)| m && p == t)
                .count()
        };
        correct_i += count(&pred.intermediate);
        correct_f += pred.final_.as_ref().map_or(0, count);
        total += s.mask.iter().filter(|&&m| m).count();
    }
    let total = total as f64;
    Ok(ValStats {
        loss: loss / samples.len() as f64,
        acc_intermediate: correct_i as f64 / total,
        acc_final: model.variant().has_refinement().then(|| correct_f as f64 / total),
    })
}

/// Mean per-sample loss and its parameter gradient for one full batch.
/// Gradients are reduced in sample order.
pub fn batch_gradient(model: &PrecTime, samples: &[Sample], cfg: &TrainConfig, epoch: usize) -> Result<(f64, Vec<Tensor>)> {
    let n = samples.len() as f64;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut loss = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mut rng = fork_indexed(cfg.seed, Stream::Dropout, ((epoch as u64) << 32) | i as u64);
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let w = g.input(split_windows(&s.input, model.config().window_length)?.windows);
        let heads = model.build(&mut g, &p, w, true, &mut rng)?;
        let l = total_loss_node(&mut g, &heads, s, cfg)?;
        let scaled = g.scale(l, 1.0 / n);
        loss += g.value(l).item();
        let mut back = g.backward(scaled)?;
        for (acc, node) in grads.iter_mut().zip(&p) {
            if let Some(d) = back.take(*node) {
                acc.add_assign(&d);
            }
        }
    }
    Ok((loss / n, grads))
}

fn in_epoch(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::numeric(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Trains `model` and returns the parameters of the best validation epoch
/// together with the per-epoch log.
pub fn train(mut model: PrecTime, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<(PrecTime, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::arg("validation set is empty"));
    }
    let train_ids: std::collections::HashSet<&str> = train_set.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::arg(format!("cycle {} is in both training and validation sets", s.id)));
    }

    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut best_values = model.params().values();
    let mut best_acc = f64::NEG_INFINITY;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let (train_loss, grads) = batch_gradient(&model, train_set, cfg, epoch).map_err(|e| in_epoch(epoch, e))?;
        if !train_loss.is_finite() {
            return Err(Error::numeric(format!("epoch {epoch}: training loss is {train_loss}")));
        }
        for (param, g) in model.params_mut().iter_mut().zip(grads) {
            param.grad = g;
        }
        adam.step(model.params_mut()).map_err(|e| in_epoch(epoch, e))?;

        let val = validate_epoch(&model, val_set, cfg).map_err(|e| in_epoch(epoch, e))?;
        if !val.loss.is_finite() {
            return Err(Error::numeric(format!("epoch {epoch}: validation loss is {}", val.loss)));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_acc_intermediate: val.acc_intermediate,
            val_acc_final: val.acc_final,
            seconds: started.elapsed().as_secs_f64(),
        };
        let acc = record.monitored_acc();
        log.records.push(record);
        if acc > best_acc {
            best_acc = acc;
            log.best_epoch = epoch;
            best_values = model.params().values();
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    log.best_val_acc = best_acc;
    model.params_mut().load_values(best_values)?;
    Ok((model, log))
}

/// Test-set report for the decoding head (final, or intermediate for
/// models without refinement). Padding excluded via each sample's mask.
pub fn evaluate(model: &PrecTime, samples: &[Sample], alphabet: &Alphabet, options: MetricOptions) -> Result<SegmentationReport> {
    evaluator(model, samples, alphabet, options)?.report()
}

/// Like [`evaluate`] but returns the evaluator so per-changepoint detail
/// can be exported.
pub fn evaluator(model: &PrecTime, samples: &[Sample], alphabet: &Alphabet, options: MetricOptions) -> Result<Evaluator> {
    if alphabet.len() != model.config().num_classes {
        return Err(Error::Data(format!(
            "alphabet has {} classes, model predicts {}",
            alphabet.len(),
            model.config().num_classes
        )));
    }
    let mut ev = Evaluator::with_codes(alphabet.codes().to_vec(), options)?;
    for s in samples {
        let pred = model.predict(&s.input)?.decoding().argmax_rows();
        ev.add(&s.id, &pred, &s.classes, Some(&s.mask))?;
    }
    Ok(ev)
}
