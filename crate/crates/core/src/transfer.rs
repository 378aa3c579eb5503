//! Fine-tuning a pretrained checkpoint on a new task.
//!
//! A strategy is a schedule of stages; each stage names the layer groups
//! that train while the rest stay frozen. Strategies are registered by
//! name so the CLI can pick one with `--strategy`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{extend_vocab, Example, Vocabulary, DEFAULT_EXTENSION_LIMIT};
use crate::model::checkpoint::Checkpoint;
use crate::model::{LayerGroup, Model, ModelConfig, ModelError, ParamSet};
use crate::train::{encode_examples, train_until_converged, CurveLog, EncodedExample, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("vocabulary hash {found} does not match checkpoint vocabulary {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("layer list must be nonempty and contain exactly one softmax head")]
    BadLayers,
    #[error("target task needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One stage of a schedule: the groups that train in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThawStage {
    pub name: String,
    pub trainable: Vec<LayerGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThawSchedule {
    pub stages: Vec<ThawStage>,
}

impl ThawSchedule {
    /// Per-tensor trainability for stage `i`.
    pub fn mask<S: crate::model::Scalar>(&self, i: usize, params: &ParamSet<S>) -> Vec<bool> {
        params.iter().map(|p| self.stages[i].trainable.contains(&p.group)).collect()
    }
}

pub trait TransferStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Stages over `layers`, which are ordered input first and end with
    /// the new softmax head.
    fn stages(&self, layers: &[LayerGroup]) -> Vec<ThawStage>;

    /// Whether the vocabulary is extended from the target training set
    /// when the caller does not say.
    fn extends_vocab_by_default(&self) -> bool {
        false
    }
}

/// Only the new head trains.
pub struct Last;
/// Everything trains at once.
pub struct Full;
/// New head, then each pretrained layer alone from the input up, then
/// everything.
pub struct ChainThaw;

fn all_stage(layers: &[LayerGroup]) -> ThawStage {
    ThawStage { name: "all".into(), trainable: layers.to_vec() }
}

fn head_stage() -> ThawStage {
    ThawStage { name: "softmax-new".into(), trainable: vec![LayerGroup::Softmax] }
}

impl TransferStrategy for Last {
    fn name(&self) -> &'static str {
        "last"
    }

    fn stages(&self, _layers: &[LayerGroup]) -> Vec<ThawStage> {
        vec![head_stage()]
    }
}

impl TransferStrategy for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn stages(&self, layers: &[LayerGroup]) -> Vec<ThawStage> {
        vec![all_stage(layers)]
    }
}

impl TransferStrategy for ChainThaw {
    fn name(&self) -> &'static str {
        "chain-thaw"
    }

    fn stages(&self, layers: &[LayerGroup]) -> Vec<ThawStage> {
        let mut out = vec![head_stage()];
        for &g in layers.iter().filter(|&&g| g != LayerGroup::Softmax) {
            out.push(ThawStage { name: g.name().into(), trainable: vec![g] });
        }
        out.push(all_stage(layers));
        out
    }

    fn extends_vocab_by_default(&self) -> bool {
        true
    }
}

pub const STRATEGIES: [&str; 3] = ["last", "full", "chain-thaw"];

pub fn strategy_registry() -> Vec<Box<dyn TransferStrategy>> {
    vec![Box::new(Last), Box::new(Full), Box::new(ChainThaw)]
}

pub fn lookup_strategy(name: &str) -> Result<Box<dyn TransferStrategy>, TransferError> {
    strategy_registry()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| TransferError::UnknownStrategy(name.to_string()))
}

pub fn make_schedule(strategy: &dyn TransferStrategy, layers: &[LayerGroup]) -> Result<ThawSchedule, TransferError> {
    let heads = layers.iter().filter(|&&g| g == LayerGroup::Softmax).count();
    if heads != 1 || layers.last() != Some(&LayerGroup::Softmax) {
        return Err(TransferError::BadLayers);
    }
    Ok(ThawSchedule { stages: strategy.stages(layers) })
}

/// `lr_new` for the freshly initialized head, `lr_pretrained` for
/// everything that came from the checkpoint.
pub fn learning_rates<S: crate::model::Scalar>(params: &ParamSet<S>, cfg: &TrainConfig) -> Vec<f64> {
    params.iter().map(|p| if p.group == LayerGroup::Softmax { cfg.lr_new } else { cfg.lr_pretrained }).collect()
}

/// Labelled target data, already tokenized.
#[derive(Debug, Clone, Default)]
pub struct TargetData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub train: TrainConfig,
    /// `None` defers to the strategy's default.
    pub extend_vocab: Option<bool>,
    pub extension_limit: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self { train: TrainConfig::default(), extend_vocab: None, extension_limit: DEFAULT_EXTENSION_LIMIT }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub layers: Vec<LayerGroup>,
    pub start_val_loss: f64,
    pub end_val_loss: f64,
    pub start_val_metric: f64,
    pub end_val_metric: f64,
    /// Parameter fingerprints; each stage starts where the previous ended.
    pub start_hash: String,
    pub end_hash: String,
    pub steps: usize,
    pub curve: CurveLog,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageReport {
    pub strategy: String,
    pub stages: Vec<StageRecord>,
}

impl StageReport {
    /// Tab-separated table. Wall time is left out unless asked for, since
    /// it differs between otherwise identical runs.
    pub fn to_tsv(&self, with_wall_time: bool) -> String {
        let mut s = String::from("stage\tlayers\tstart_val_loss\tend_val_loss\tstart_val_metric\tend_val_metric\tsteps\tstart_hash\tend_hash");
        if with_wall_time {
            s.push_str("\twall_seconds");
        }
        s.push('\n');
        for r in &self.stages {
            let layers: Vec<&str> = r.layers.iter().map(|g| g.name()).collect();
            let _ = write!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
                r.name,
                layers.join(","),
                r.start_val_loss,
                r.end_val_loss,
                r.start_val_metric,
                r.end_val_metric,
                r.steps,
                &r.start_hash[..16],
                &r.end_hash[..16]
            );
            if with_wall_time {
                let _ = write!(s, "\t{:.3}", r.wall_time.as_secs_f64());
            }
            s.push('\n');
        }
        s
    }

    /// True when every stage starts from the previous stage's result.
    pub fn hash_chain_intact(&self) -> bool {
        self.stages.windows(2).all(|w| w[0].end_hash == w[1].start_hash)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub report: StageReport,
    /// Encoded with `vocab`, ready for evaluation.
    pub test: Vec<EncodedExample>,
}

/// Runs the stages of a schedule in order, each from the previous stage's
/// best weights.
pub fn run_schedule(
    mut model: Model<f32>,
    schedule: &ThawSchedule,
    train: &[EncodedExample],
    validation: &[EncodedExample],
    cfg: &TrainConfig,
    lr: &[f64],
) -> Result<(Model<f32>, Vec<StageRecord>), TransferError> {
    let mut records = Vec::with_capacity(schedule.stages.len());
    for (i, stage) in schedule.stages.iter().enumerate() {
        let started = Instant::now();
        let mask = schedule.mask(i, &model.params);
        let start_hash = model.params.fingerprint();
        let stage_cfg = TrainConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
        let out = train_until_converged(&model, train, validation, &stage_cfg, &mask, lr)?;
        model = out.model;
        records.push(StageRecord {
            name: stage.name.clone(),
            layers: stage.trainable.clone(),
            start_val_loss: out.start.loss,
            end_val_loss: out.best.loss,
            start_val_metric: out.start.metric,
            end_val_metric: out.best.metric,
            start_hash,
            end_hash: model.params.fingerprint(),
            steps: out.steps,
            curve: out.curve,
            wall_time: started.elapsed(),
        });
    }
    Ok((model, records))
}

/// Swaps in a new head for the target classes, optionally extends the
/// vocabulary, and runs the strategy's schedule.
pub fn finetune(
    pretrained: &Checkpoint,
    vocab: &Vocabulary,
    target: &TargetData,
    strategy: &dyn TransferStrategy,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome, TransferError> {
    let found = vocab.hash();
    if found != pretrained.vocab_hash || vocab.len() != pretrained.model.config.vocab_size {
        return Err(TransferError::VocabMismatch { expected: pretrained.vocab_hash.clone(), found });
    }
    if target.classes < 2 {
        return Err(TransferError::TooFewClasses(target.classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.train.seed);
    let mut model = pretrained.model.clone();

    let vocab = if opts.extend_vocab.unwrap_or(strategy.extends_vocab_by_default()) {
        let ext = extend_vocab(vocab, target.train.iter().map(|e| e.tokens.tokens.as_slice()), opts.extension_limit);
        model.extend_embedding(ext.len() - vocab.len(), &mut rng)?;
        ext
    } else {
        vocab.clone()
    };
    model.reset_head(target.classes, &mut rng)?;

    let max_len = model.config.max_len;
    let train = encode_examples(&target.train, &vocab, max_len);
    let validation = encode_examples(&target.validation, &vocab, max_len);
    let test = encode_examples(&target.test, &vocab, max_len);

    let schedule = make_schedule(strategy, model.layer_groups())?;
    let lr = learning_rates(&model.params, &opts.train);
    let (model, stages) = run_schedule(model, &schedule, &train, &validation, &opts.train, &lr)?;
    Ok(FinetuneOutcome { model, vocab, report: StageReport { strategy: strategy.name().into(), stages }, test })
}

/// Baseline without pretraining: a freshly initialized model trained on
/// the target data with every layer at `lr_new`.
pub fn train_fresh(
    config: ModelConfig,
    vocab: &Vocabulary,
    target: &TargetData,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TransferError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let config = ModelConfig { vocab_size: vocab.len(), classes: target.classes, ..config };
    let model = Model::<f32>::init(config, &mut rng)?;
    let max_len = model.config.max_len;
    let train = encode_examples(&target.train, vocab, max_len);
    let validation = encode_examples(&target.validation, vocab, max_len);
    let test = encode_examples(&target.test, vocab, max_len);
    let schedule = ThawSchedule { stages: vec![all_stage(model.layer_groups())] };
    let lr = vec![cfg.lr_new; model.params.len()];
    let (model, stages) = run_schedule(model, &schedule, &train, &validation, cfg, &lr)?;
    Ok(FinetuneOutcome { model, vocab: vocab.clone(), report: StageReport { strategy: "fresh".into(), stages }, test })
}
