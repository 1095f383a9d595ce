//! Training and evaluation loops.
//!
//! The CSV log has the fixed header `step,phase,loss,accuracy,grad_norm`.
//! One `train` row is written per optimizer step (batch loss and accuracy in
//! train mode, gradient L2 norm before the update); a final `eval` row holds
//! the eval-mode loss and accuracy over the whole training set, with an empty
//! `grad_norm`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::dataset::{gen_toy_dataset, ToyDataset};
use super::optim::AdamW;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::params::Mode;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,phase,loss,accuracy,grad_norm";

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: Option<f64>,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phase = match self.phase {
            Phase::Train => "train",
            Phase::Eval => "eval",
        };
        write!(f, "{},{phase},{:.9},{:.9},", self.step, self.loss, self.accuracy)?;
        if let Some(g) = self.grad_norm {
            write!(f, "{g:.9}")?;
        }
        Ok(())
    }
}

impl LogRow {
    /// Parses one non-header CSV line.
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::invalid("log", format!("malformed log row `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            phase: match f[1] {
                "train" => Phase::Train,
                "eval" => Phase::Eval,
                _ => return Err(bad()),
            },
            loss: f[2].parse().map_err(|_| bad())?,
            accuracy: f[3].parse().map_err(|_| bad())?,
            grad_norm: if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse().map_err(|_| bad())?)
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub n_samples: usize,
}

pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub final_eval: EvalReport,
    pub model: Model<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
}

/// Summed per-sample cross-entropy (in `f64`) and correct count for `[B, K]`
/// logits.
fn batch_metrics(logits: &Tensor<f32>, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == y);
        let max = row[best] as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[y] as f64;
    }
    (loss, correct)
}

/// One forward/backward/update on a batch. Batch-norm running statistics
/// are updated alongside the parameters. Fails with `NonFiniteLoss` (leaving
/// the model untouched) if the loss, any gradient or any scan activation is
/// not finite.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    images: &Tensor<f32>,
    labels: &[usize],
    step: usize,
) -> Result<StepStats> {
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        e => e,
    };
    let tape = Tape::new();
    let out = model.forward(&tape, images, Mode::Train, true).map_err(diverged)?;
    let loss = out.logits.softmax_cross_entropy(labels)?;
    let loss_value = loss.value().item() as f64;
    let (_, correct) = batch_metrics(&out.logits.value(), labels);
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = tape.backward(loss).map_err(diverged)?;
    let named: Vec<(String, Tensor<f32>)> = grads
        .named()
        .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.clone())))
        .collect();
    let grad_norm = named
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    opt.step(model.store_mut(), &named)?;
    model.apply_stat_updates(out.stat_updates)?;
    Ok(StepStats {
        loss: loss_value,
        accuracy: correct as f64 / labels.len() as f64,
        grad_norm,
    })
}

/// Eval-mode accuracy and mean cross-entropy over a whole dataset.
pub fn evaluate(model: &Model<f32>, dataset: &ToyDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk)?;
        let logits = model.predict(&x)?;
        let (l, c) = batch_metrics(&logits, &y);
        loss += l;
        correct += c;
    }
    let n = dataset.len();
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        n_samples: n,
    })
}

pub fn evaluate_checkpoint(path: impl AsRef<Path>, dataset: &ToyDataset) -> Result<EvalReport> {
    evaluate(&load_checkpoint(path)?, dataset)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Trains from scratch as configured, streaming the CSV log and writing the
/// final checkpoint. On a non-finite loss the last good model is saved to the
/// checkpoint path before the error is returned.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let dataset = gen_toy_dataset(&cfg.data)?;
    let mut model = Model::<f32>::build(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.clone());
    create_parent(&cfg.log)?;
    create_parent(&cfg.checkpoint)?;
    let mut log = BufWriter::new(File::create(&cfg.log)?);
    writeln!(log, "{LOG_HEADER}")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (x, y) = dataset.batch(&order[cursor..cursor + cfg.batch_size])?;
        cursor += cfg.batch_size;
        let stats = match train_step(&mut model, &mut opt, &x, &y, step) {
            Ok(s) => s,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                log.flush()?;
                save_checkpoint(&model, &cfg.checkpoint)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let row = LogRow {
            step,
            phase: Phase::Train,
            loss: stats.loss,
            accuracy: stats.accuracy,
            grad_norm: Some(stats.grad_norm),
        };
        writeln!(log, "{row}")?;
        rows.push(row);
    }

    let final_eval = evaluate(&model, &dataset)?;
    let row = LogRow {
        step: cfg.steps,
        phase: Phase::Eval,
        loss: final_eval.loss,
        accuracy: final_eval.accuracy,
        grad_norm: None,
    };
    writeln!(log, "{row}")?;
    rows.push(row);
    log.flush()?;
    save_checkpoint(&model, &cfg.checkpoint)?;
    Ok(TrainReport {
        rows,
        final_eval,
        model,
    })
}

/// Reads a CSV log written by [`train`], checking the header.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::invalid("log", format!("missing header `{LOG_HEADER}`")));
    }
    lines.filter(|l| !l.is_empty()).map(LogRow::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_roundtrip() {
        let r = LogRow {
            step: 3,
            phase: Phase::Train,
            loss: 1.25,
            accuracy: 0.5,
            grad_norm: Some(2.0),
        };
        assert_eq!(LogRow::parse(&r.to_string()).unwrap(), r);
        let e = LogRow {
            grad_norm: None,
            phase: Phase::Eval,
            ..r
        };
        assert_eq!(LogRow::parse(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn metrics_of_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, correct) = batch_metrics(&logits, &[0, 3]);
        assert!((loss / 2.0 - 4f64.ln()).abs() < 1e-12);
        assert_eq!(correct, 1);
    }
}
