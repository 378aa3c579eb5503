//! Optimization loop: Adam with global-norm clipping, channel and unit
//! dropout, periodic validation with early stopping, and a reload of the
//! best weights at the end.

mod adam;
mod dropout;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use adam::{adam_step, clip_gradients, global_norm, AdamState, ClipReport, BETA1, BETA2, EPSILON};
pub use dropout::{apply_dropout, dropout_mask, sample_masks, DropoutPhase};

use crate::corpus::{Example, Vocabulary, PAD_INDEX, UNKNOWN_INDEX};
use crate::eval::{Metric, PredictionSet};
use crate::model::{loss_and_gradients, BatchItem, Mode, Model, ModelError, ParamSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("no tensor is trainable")]
    NothingTrainable,
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite loss {loss} at step {step} ({detail})")]
    NonFiniteLoss { step: usize, loss: f64, detail: String },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

impl TrainError {
    /// True for failures that mean the optimization diverged.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. })
    }
}

/// Which validation quantity decides the best snapshot. The other one
/// breaks exact ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    ValLoss,
    ValMetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// For freshly initialized layers.
    pub lr_new: f64,
    /// For layers that come from a pretrained checkpoint.
    pub lr_pretrained: f64,
    pub clip_norm: f64,
    pub embed_channel_dropout: f64,
    pub penultimate_dropout: f64,
    pub l2_embed: f64,
    pub batch_size: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between validation evaluations; `None` means once per epoch.
    pub eval_interval: Option<usize>,
    pub max_epochs: usize,
    pub selection: Selection,
    pub metric: Metric,
    pub seed: u64,
    /// Worker threads for gradient and validation work. Results do not
    /// depend on it.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_new: 1e-3,
            lr_pretrained: 1e-4,
            clip_norm: 1.0,
            embed_channel_dropout: 0.10,
            penultimate_dropout: 0.50,
            l2_embed: 1e-6,
            batch_size: 32,
            patience: 3,
            eval_interval: None,
            max_epochs: 50,
            selection: Selection::ValLoss,
            metric: Metric::Accuracy,
            seed: 0,
            workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr_new > 0.0 && self.lr_pretrained > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        for (name, r) in
            [("embed_channel_dropout", self.embed_channel_dropout), ("penultimate_dropout", self.penultimate_dropout)]
        {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::InvalidConfig(format!("{name} must be in [0, 1)")));
            }
        }
        if self.l2_embed.is_nan() || self.l2_embed < 0.0 {
            return bad("l2_embed must be non-negative");
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 || self.eval_interval == Some(0) {
            return bad("batch_size, patience, eval_interval and max_epochs must be at least 1");
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1");
        }
        Ok(())
    }
}

/// Token indices ready for the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Encodes and truncates to `max_len`. A text with no tokens becomes a
/// single unknown token so that it still gets a prediction.
pub fn encode_examples(examples: &[Example], vocab: &Vocabulary, max_len: usize) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| {
            let mut tokens = vocab.encode(&e.tokens.tokens);
            tokens.truncate(max_len);
            if tokens.is_empty() {
                tokens.push(UNKNOWN_INDEX);
            }
            EncodedExample { tokens, label: e.label }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub loss: f64,
    pub metric: f64,
}

impl EvalPoint {
    fn beats(&self, other: &EvalPoint, selection: Selection) -> bool {
        match selection {
            Selection::ValLoss => self.loss < other.loss || (self.loss == other.loss && self.metric > other.metric),
            Selection::ValMetric => {
                self.metric > other.metric || (self.metric == other.metric && self.loss < other.loss)
            }
        }
    }
}

pub fn predict_all(model: &Model<f32>, data: &[EncodedExample]) -> Result<PredictionSet, TrainError> {
    let arch = model.architecture();
    let rows: Vec<Vec<f64>> = data
        .par_iter()
        .map(|ex| {
            let p = arch.forward(&model.params, &ex.tokens, &Mode::Infer)?;
            let row: Vec<f64> = p.iter().map(|&x| x as f64).collect();
            let sum: f64 = row.iter().sum();
            Ok(row.into_iter().map(|x| x / sum).collect())
        })
        .collect::<Result<_, ModelError>>()?;
    let classes = model.config.classes;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let probs = ndarray::Array2::from_shape_vec((data.len(), classes), flat).expect("one row per example");
    Ok(PredictionSet::new(probs, data.iter().map(|e| e.label).collect())?)
}

/// Mean cross-entropy (without the embedding penalty) and task metric.
pub fn evaluate(
    model: &Model<f32>,
    data: &[EncodedExample],
    metric: Metric,
) -> Result<(EvalPoint, PredictionSet), TrainError> {
    let preds = predict_all(model, data)?;
    let loss = preds
        .probs()
        .rows()
        .into_iter()
        .zip(preds.labels())
        .map(|(p, &l)| -p[l].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / data.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: 0, loss, detail: "validation".into() });
    }
    Ok((EvalPoint { loss, metric: metric.score(&preds) }, preds))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation; NaN at step 0.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveLog {
    pub points: Vec<CurvePoint>,
}

impl CurveLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\ttrain_loss\tval_loss\tval_metric\n");
        for p in &self.points {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", p.step, p.train_loss, p.val_loss, p.val_metric);
        }
        s
    }

    pub fn min_val_loss(&self) -> f64 {
        self.points.iter().map(|p| p.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best snapshot, not the final weights.
    pub model: Model<f32>,
    pub curve: CurveLog,
    pub start: EvalPoint,
    pub best: EvalPoint,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Batches of example indices for one epoch: shuffled, then sorted by
/// length inside windows of a few batches so each batch pads little.
fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    const BUCKET_BATCHES: usize = 8;
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    for window in idx.chunks_mut(batch_size * BUCKET_BATCHES) {
        window.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Trains the tensors flagged in `trainable` until validation stops
/// improving for `patience` evaluations, then returns the best snapshot.
pub fn train_until_converged(
    model: &Model<f32>,
    train: &[EncodedExample],
    validation: &[EncodedExample],
    cfg: &TrainConfig,
    trainable: &[bool],
    lr: &[f64],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if !trainable.iter().any(|&t| t) {
        return Err(TrainError::NothingTrainable);
    }
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| TrainError::Pool(e.to_string()))?
            .install(|| run(model, train, validation, cfg, trainable, lr)),
        None => run(model, train, validation, cfg, trainable, lr),
    }
}

fn run(
    model: &Model<f32>,
    train: &[EncodedExample],
    validation: &[EncodedExample],
    cfg: &TrainConfig,
    trainable: &[bool],
    lr: &[f64],
) -> Result<TrainOutcome, TrainError> {
    let arch = model.architecture();
    let frozen: Vec<bool> = trainable.iter().map(|t| !t).collect();
    let embed_dim = model.config.embed_dim;
    let width = model.penultimate_width();
    let interval = cfg.eval_interval.unwrap_or_else(|| train.len().div_ceil(cfg.batch_size));
    let lengths: Vec<usize> = train.iter().map(|e| e.tokens.len()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut adam = AdamState::new(&current.params);
    let (start, _) = evaluate(&current, validation, cfg.metric)?;
    let mut curve = CurveLog {
        points: vec![CurvePoint { step: 0, train_loss: f64::NAN, val_loss: start.loss, val_metric: start.metric }],
    };
    let mut best = start;
    let mut best_step = 0;
    let mut best_params: ParamSet<f32> = current.params.clone();
    let mut since_best = 0;
    let mut step = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut stopped_early = false;

    'epochs: for _epoch in 0..cfg.max_epochs {
        for batch_idx in epoch_batches(&lengths, cfg.batch_size, &mut rng) {
            let max_len = batch_idx.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            let padded: Vec<Vec<u32>> = batch_idx
                .iter()
                .map(|&i| {
                    let mut t = train[i].tokens.clone();
                    t.resize(max_len, PAD_INDEX);
                    t
                })
                .collect();
            let batch: Vec<BatchItem<f32>> = batch_idx
                .iter()
                .zip(&padded)
                .map(|(&i, tokens)| BatchItem {
                    tokens,
                    label: train[i].label,
                    mode: Mode::Train(sample_masks(
                        embed_dim,
                        width,
                        cfg.embed_channel_dropout,
                        cfg.penultimate_dropout,
                        &mut rng,
                    )),
                })
                .collect();
            let (loss, mut grads) =
                loss_and_gradients(arch.as_ref(), &current.params, &batch, cfg.l2_embed as f32, Some(&frozen))?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    loss,
                    detail: format!("parameters finite: {}", current.params.all_finite()),
                });
            }
            adam_step(&mut current.params, &mut grads.grads, &mut adam, trainable, lr, cfg.clip_norm)?;
            step += 1;
            loss_sum += loss;
            loss_count += 1;

            if step % interval == 0 {
                let (point, _) = evaluate(&current, validation, cfg.metric)?;
                curve.points.push(CurvePoint {
                    step,
                    train_loss: loss_sum / loss_count as f64,
                    val_loss: point.loss,
                    val_metric: point.metric,
                });
                (loss_sum, loss_count) = (0.0, 0);
                if point.beats(&best, cfg.selection) {
                    best = point;
                    best_step = step;
                    best_params = current.params.clone();
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if !stopped_early && loss_count > 0 {
        let (point, _) = evaluate(&current, validation, cfg.metric)?;
        curve.points.push(CurvePoint {
            step,
            train_loss: loss_sum / loss_count as f64,
            val_loss: point.loss,
            val_metric: point.metric,
        });
        if point.beats(&best, cfg.selection) {
            best = point;
            best_step = step;
            best_params = current.params.clone();
        }
    }
    current.params = best_params;
    Ok(TrainOutcome { model: current, curve, start, best, best_step, steps: step, stopped_early })
}
