//! Cross-entropy training with AdamW, evaluation metrics.

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{pad_or_truncate, Dataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::graph::softmax_in_place;
use crate::model::{Model, ParameterStore, SampleGrad};
use crate::tensor::FrameMatrix;

/// Stream index of the epoch-shuffle generator.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        check("lr", self.lr > 0.0 && self.lr.is_finite(), "must be positive and finite")?;
        check(
            "weight_decay",
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "must be non-negative and finite",
        )?;
        check("beta1", (0.0..1.0).contains(&self.beta1), "must lie in [0, 1)")?;
        check("beta2", (0.0..1.0).contains(&self.beta2), "must lie in [0, 1)")?;
        check("adam_eps", self.eps > 0.0 && self.eps.is_finite(), "must be positive and finite")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Worker threads for per-sample gradients inside a batch. Results are
    /// reduced in sample order, so the value never changes the outcome.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 8,
            seed: 0,
            adamw: AdamWConfig::default(),
            threads: 1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        self.adamw.validate()
    }
}

/// AdamW moments for every tensor of a [`ParameterStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<FrameMatrix>,
    pub v: Vec<FrameMatrix>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, config: AdamWConfig) -> Self {
        let zeros: Vec<_> = store
            .iter()
            .map(|p| FrameMatrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update from the gradients held in `store`.
/// Tensors with `decay == false` (biases, layer-norm parameters) skip the
/// decay term. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(store: &mut ParameterStore, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Optimization(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.grad.shape() != m.shape() {
            return Err(Error::Optimization(format!("shape mismatch for `{}`", p.name)));
        }
        if !p.grad.is_finite() {
            return Err(Error::Optimization(format!("non-finite gradient in `{}`", p.name)));
        }
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let wd = if p.decay { c.weight_decay } else { 0.0 };
        let theta = p.value.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, &g) in p.grad.data().iter().enumerate() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + wd * theta[i]);
        }
    }
    Ok(())
}

/// `-log softmax(logits)[label]` for a `[1 x K]` logit row.
pub fn cross_entropy(logits: &FrameMatrix, label: usize) -> Result<f64> {
    if logits.rows() != 1 {
        return Err(Error::shape(
            "cross_entropy",
            format!("expected one logit row, got [{}x{}]", logits.rows(), logits.cols()),
        ));
    }
    if label >= logits.cols() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.cols()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Evaluation("non-finite logits".into()));
    }
    let z = logits.row(0);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - z[label])
}

/// Row-softmax of a `[1 x K]` logit row.
pub fn probabilities(logits: &FrameMatrix) -> Vec<f64> {
    let mut p = logits.row(0).to_vec();
    softmax_in_place(&mut p);
    p
}

/// Index of the largest logit; ties go to the lowest class.
pub fn predict(logits: &FrameMatrix) -> usize {
    let z = logits.row(0);
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Macro average of per-class F1; a class with no support and no
    /// predictions scores 0.
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("cannot compute metrics on an empty set".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Argument(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= num_classes || p >= num_classes {
                return Err(Error::Argument(format!(
                    "class index out of range for {num_classes} classes"
                )));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let f1 = (0..num_classes)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let support: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[k]).sum();
                let denom = (support + predicted) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .sum::<f64>()
            / num_classes as f64;
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            f1,
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line, LF terminated.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
            .collect()
    }

    /// Records without the wall-clock field.
    pub fn without_timing(&self) -> Vec<(usize, f64, f64)> {
        self.epochs
            .iter()
            .map(|r| (r.epoch, r.mean_loss, r.train_acc))
            .collect()
    }
}

fn labeled<'a>(rec: &'a EmbeddingRecord) -> Result<usize> {
    rec.label
        .ok_or_else(|| Error::Argument(format!("record `{}` has no label", rec.id)))
}

fn fitted<'a>(model: &Model, rec: &'a EmbeddingRecord) -> Result<Cow<'a, FrameMatrix>> {
    let cfg = model.config();
    if rec.features.cols() != cfg.input_dim {
        return Err(Error::shape(
            "input",
            format!(
                "record `{}` has {} channels, model expects {}",
                rec.id,
                rec.features.cols(),
                cfg.input_dim
            ),
        ));
    }
    Ok(if rec.features.rows() == cfg.seq_len {
        Cow::Borrowed(&rec.features)
    } else {
        Cow::Owned(pad_or_truncate(&rec.features, cfg.seq_len))
    })
}

fn sample_grad(model: &Model, rec: &EmbeddingRecord) -> Result<SampleGrad> {
    let label = labeled(rec)?;
    let x = fitted(model, rec)?;
    model.loss_and_grad(&x, label)
}

fn batch_grads(model: &Model, batch: &[&EmbeddingRecord], threads: usize) -> Vec<Result<SampleGrad>> {
    let threads = threads.max(1).min(batch.len());
    if threads <= 1 {
        return batch.iter().map(|r| sample_grad(model, r)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| sample_grad(model, r)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

fn at_step(err: Error, epoch: usize, step: usize) -> Error {
    let ctx = |m: String| format!("epoch {epoch}, step {step}: {m}");
    match err {
        Error::Evaluation(m) => Error::Evaluation(ctx(m)),
        Error::Optimization(m) => Error::Optimization(ctx(m)),
        other => other,
    }
}

/// Mini-batch training. The batch gradient is the mean of per-sample
/// gradients summed in sample order; training accuracy uses the logits
/// computed before each update. Epochs are numbered from 1.
pub fn train(model: &mut Model, dataset: &Dataset, opts: &TrainOptions) -> Result<TrainLog> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    for rec in &dataset.records {
        labeled(rec)?;
    }
    let mut state = OptimizerState::new(model.store(), opts.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<&EmbeddingRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
            let results = batch_grads(model, &batch, opts.threads);
            let store = model.store_mut();
            store.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            for (res, rec) in results.into_iter().zip(&batch) {
                let sg = res.map_err(|e| at_step(e, epoch, step))?;
                loss_sum += sg.loss;
                if Some(predict(&sg.logits)) == rec.label {
                    correct += 1;
                }
                for (p, g) in store.iter_mut().zip(&sg.grads) {
                    p.grad.add_scaled(g, inv);
                }
            }
            adamw_step(store, &mut state).map_err(|e| at_step(e, epoch, step))?;
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / dataset.len() as f64,
            train_acc: correct as f64 / dataset.len() as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(log)
}

/// Argmax predictions for every record, in dataset order.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    dataset
        .records
        .iter()
        .map(|rec| {
            let x = fitted(model, rec)?;
            Ok(predict(&model.forward(&x)?.logits))
        })
        .collect()
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let labels = dataset.records.iter().map(labeled).collect::<Result<Vec<_>>>()?;
    let preds = predict_dataset(model, dataset)?;
    Metrics::from_predictions(&labels, &preds, model.config().num_classes)
}
