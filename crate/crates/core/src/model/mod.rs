//! The recurrent classifier and its ablation baselines.
//!
//! Every architecture implements [`Architecture`] and is registered by
//! name in [`registry`]; callers pick one at runtime from the model
//! config. All of them share a tanh-bounded embedding layer and a softmax
//! head named `softmax.w` / `softmax.b`, which is what transfer learning
//! swaps out for a new task.

mod arch;
pub mod attention;
pub mod checkpoint;
pub mod lstm;
pub mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::RngCore;
use rayon::prelude::*;
use thiserror::Error;

pub use arch::{BagOfEmbeddings, DeepMoji, PlainStack};
pub use attention::{attention_backward, attention_forward, AttentionOutput};
pub use lstm::{birnn_forward, BiLayerWeights, BiTrace};
pub use params::{LayerGroup, Param, ParamSet, INIT_RECIPE};

use crate::corpus::PAD_INDEX;

/// Floating-point type the network is computed in: `f32` for training,
/// `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + LinalgScalar
        + ScalarOperand
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token index {index} out of vocabulary of size {vocab}")]
    IndexOutOfVocab { index: u32, vocab: usize },
    #[error("shape mismatch in {tensor}: {detail}")]
    ShapeMismatch { tensor: String, detail: String },
    #[error("every timestep is masked")]
    AllTimestepsMasked,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub architecture: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Units per direction; each bidirectional layer outputs twice this.
    pub units: usize,
    pub classes: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn deepmoji(vocab_size: usize, embed_dim: usize, units: usize, classes: usize) -> Self {
        Self { architecture: DeepMoji::NAME.into(), vocab_size, embed_dim, units, classes, max_len: 64 }
    }

    pub fn with_architecture(mut self, name: &str) -> Self {
        self.architecture = name.to_string();
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("units", self.units),
            ("classes", self.classes),
            ("max_len", self.max_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the skip-connected representation fed to attention.
    pub fn attention_channels(&self) -> usize {
        self.embed_dim + 4 * self.units
    }
}

/// Dropout masks for one sequence, already scaled by the inverse keep
/// probability. `embed` has one entry per embedding channel and is shared
/// by every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<S> {
    pub embed: Array1<S>,
    pub penultimate: Array1<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode<S> {
    Infer,
    Train(DropoutMasks<S>),
}

impl<S> Mode<S> {
    pub fn masks(&self) -> Option<&DropoutMasks<S>> {
        match self {
            Mode::Infer => None,
            Mode::Train(m) => Some(m),
        }
    }
}

/// A classifier variant that can be selected by name.
pub trait Architecture<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Trainable groups, input first.
    fn layer_groups(&self) -> &'static [LayerGroup];

    fn init(&self, cfg: &ModelConfig, rng: &mut dyn RngCore) -> ParamSet<S>;

    /// Width of the representation right before the softmax head.
    fn penultimate_width(&self, cfg: &ModelConfig) -> usize;

    /// Class probabilities. Trailing `PAD_INDEX` tokens are padding.
    fn forward(&self, params: &ParamSet<S>, tokens: &[u32], mode: &Mode<S>) -> Result<Array1<S>, ModelError>;

    /// Adds `scale ×` the cross-entropy gradient for one example into
    /// `grads` and returns the unscaled cross-entropy.
    fn accumulate_gradients(
        &self,
        params: &ParamSet<S>,
        tokens: &[u32],
        label: usize,
        mode: &Mode<S>,
        scale: S,
        grads: &mut ParamSet<S>,
    ) -> Result<S, ModelError>;
}

/// Names accepted by [`lookup`].
pub const ARCHITECTURES: [&str; 3] = [DeepMoji::NAME, BagOfEmbeddings::NAME, PlainStack::NAME];

pub fn registry<S: Scalar>() -> Vec<Box<dyn Architecture<S>>> {
    vec![Box::new(DeepMoji), Box::new(BagOfEmbeddings), Box::new(PlainStack)]
}

pub fn lookup<S: Scalar>(name: &str) -> Result<Box<dyn Architecture<S>>, ModelError> {
    registry().into_iter().find(|a| a.name() == name).ok_or_else(|| ModelError::UnknownArchitecture(name.to_string()))
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn softmax<S: Scalar>(logits: ArrayView1<S>) -> Array1<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut p = logits.mapv(|x| (x - max).exp());
    let total: S = p.sum();
    p.mapv_inplace(|x| x / total);
    p
}

/// Length of `tokens` without trailing padding.
pub fn effective_len(tokens: &[u32]) -> usize {
    tokens.iter().rposition(|&t| t != PAD_INDEX).map_or(0, |p| p + 1)
}

/// `tanh` of each token's embedding row, `[T × D]`.
pub fn embed_forward<S: Scalar>(tokens: &[u32], embedding: ArrayView2<S>) -> Result<Array2<S>, ModelError> {
    let mut out = Array2::<S>::zeros((tokens.len(), embedding.ncols()));
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= embedding.nrows() {
            return Err(ModelError::IndexOutOfVocab { index: tok, vocab: embedding.nrows() });
        }
        out.row_mut(t).assign(&embedding.row(tok as usize).mapv(S::tanh));
    }
    Ok(out)
}

/// Class probabilities under the architecture named in `cfg`.
pub fn model_forward<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    tokens: &[u32],
    mode: &Mode<S>,
) -> Result<Array1<S>, ModelError> {
    lookup::<S>(&cfg.architecture)?.forward(params, tokens, mode)
}

pub fn bag_of_embeddings_forward<S: Scalar>(params: &ParamSet<S>, tokens: &[u32]) -> Result<Array1<S>, ModelError> {
    BagOfEmbeddings.forward(params, tokens, &Mode::Infer)
}

pub fn plain_stack_forward<S: Scalar>(params: &ParamSet<S>, tokens: &[u32]) -> Result<Array1<S>, ModelError> {
    PlainStack.forward(params, tokens, &Mode::Infer)
}

/// One training example with its dropout decision.
#[derive(Debug, Clone)]
pub struct BatchItem<'a, S> {
    pub tokens: &'a [u32],
    pub label: usize,
    pub mode: Mode<S>,
}

#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub grads: ParamSet<S>,
    /// True for tensors the caller marked frozen; their gradients are
    /// still computed.
    pub skippable: Vec<bool>,
}

/// Examples per unit of parallel work. Fixed so that the summation order,
/// and therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Mean cross-entropy over `batch` plus `l2_embed · ‖embedding‖²`, and the
/// gradient of that loss with respect to every tensor.
pub fn loss_and_gradients<S: Scalar>(
    arch: &dyn Architecture<S>,
    params: &ParamSet<S>,
    batch: &[BatchItem<S>],
    l2_embed: S,
    frozen: Option<&[bool]>,
) -> Result<(S, Gradients<S>), ModelError> {
    let scale = S::one() / S::from(batch.len().max(1)).unwrap();
    let partials: Vec<Result<(S, ParamSet<S>), ModelError>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut loss = S::zero();
            for item in chunk {
                loss += arch.accumulate_gradients(params, item.tokens, item.label, &item.mode, scale, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut ce = S::zero();
    for p in partials {
        let (l, g) = p?;
        ce += l;
        grads.add_assign(&g);
    }
    let mut loss = ce * scale;

    if l2_embed > S::zero() {
        let emb = params.mat("embedding")?;
        loss += l2_embed * emb.iter().map(|&v| v * v).sum::<S>();
        let two_l2 = l2_embed + l2_embed;
        grads.mat_mut("embedding")?.scaled_add(two_l2, &emb);
    }
    let skippable = match frozen {
        Some(f) => f.to_vec(),
        None => vec![false; params.len()],
    };
    Ok((loss, Gradients { grads, skippable }))
}

/// Cross-entropy of `probs` against `label`.
pub fn cross_entropy<S: Scalar>(probs: ArrayView1<S>, label: usize) -> S {
    let p = probs[label].max(S::min_positive_value());
    -p.ln()
}

/// A configured network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        config.validate()?;
        let params = lookup::<S>(&config.architecture)?.init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn architecture(&self) -> Box<dyn Architecture<S>> {
        lookup(&self.config.architecture).expect("architecture validated at construction")
    }

    pub fn layer_groups(&self) -> &'static [LayerGroup] {
        self.architecture().layer_groups()
    }

    pub fn forward(&self, tokens: &[u32], mode: &Mode<S>) -> Result<Array1<S>, ModelError> {
        self.architecture().forward(&self.params, tokens, mode)
    }

    pub fn predict(&self, tokens: &[u32]) -> Result<Array1<S>, ModelError> {
        self.forward(tokens, &Mode::Infer)
    }

    pub fn penultimate_width(&self) -> usize {
        self.architecture().penultimate_width(&self.config)
    }

    /// Swaps the softmax head for a freshly initialized one with `classes`
    /// outputs.
    pub fn reset_head(&mut self, classes: usize, rng: &mut dyn RngCore) -> Result<(), ModelError> {
        let width = self.penultimate_width();
        self.params.replace("softmax.w", params::glorot(classes, width, rng))?;
        self.params.replace("softmax.b", ArrayD::zeros(ndarray::IxDyn(&[classes])))?;
        self.config.classes = classes;
        Ok(())
    }

    /// Appends `new_rows` freshly initialized embedding rows.
    pub fn extend_embedding(&mut self, new_rows: usize, rng: &mut dyn RngCore) -> Result<(), ModelError> {
        if new_rows == 0 {
            return Ok(());
        }
        let old = self.params.mat("embedding")?.to_owned();
        let fresh = params::embedding_init::<S>(new_rows, old.ncols(), rng)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matrix");
        let stacked = ndarray::concatenate(Axis(0), &[old.view(), fresh.view()]).expect("same width");
        self.params.replace("embedding", stacked.into_dyn())?;
        self.config.vocab_size += new_rows;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(arch: &str) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig::deepmoji(12, 4, 3, 4).with_architecture(arch);
        Model::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn registry_names_resolve() {
        for name in ARCHITECTURES {
            assert_eq!(lookup::<f32>(name).unwrap().name(), name);
        }
        assert!(matches!(lookup::<f32>("lstm9000"), Err(ModelError::UnknownArchitecture(_))));
    }

    #[test]
    fn embedding_bounds() {
        let e = ndarray::array![[0.0, 0.0], [100.0, -100.0], [0.3, -2.0]];
        let out = embed_forward(&[0, 1, 2], e.view()).unwrap();
        assert_eq!(out.row(0), ndarray::array![0.0, 0.0]);
        assert!((out[[1, 0]] - 1.0).abs() < 1e-12 && (out[[1, 1]] + 1.0).abs() < 1e-12);
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        let err = embed_forward(&[3], e.view()).unwrap_err();
        assert!(matches!(err, ModelError::IndexOutOfVocab { index: 3, vocab: 3 }));
    }

    #[test]
    fn attention_width_matches_channels() {
        let m = tiny(DeepMoji::NAME);
        assert_eq!(m.params.vector("attention.w").unwrap().len(), 4 + 2 * (2 * 3));
    }

    #[test]
    fn probabilities_are_normalized() {
        for name in ARCHITECTURES {
            let m = tiny(name);
            let p = m.predict(&[5, 6, 7, 2]).unwrap();
            assert_eq!(p.len(), 4);
            assert!((p.sum() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = tiny(DeepMoji::NAME);
        m.params.mat_mut("softmax.w").unwrap().fill(0.0);
        let p = m.predict(&[5, 6, 7]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn padding_does_not_change_inference() {
        for name in ARCHITECTURES {
            let m = tiny(name);
            let a = m.predict(&[5, 9, 3]).unwrap();
            let b = m.predict(&[5, 9, 3, PAD_INDEX, PAD_INDEX]).unwrap();
            assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let m = tiny(DeepMoji::NAME);
        assert!(matches!(m.predict(&[PAD_INDEX, PAD_INDEX]), Err(ModelError::AllTimestepsMasked)));
    }

    #[test]
    fn order_matters_for_recurrent_models_only() {
        let m = tiny(DeepMoji::NAME);
        let a = m.predict(&[5, 6, 7, 8]).unwrap();
        let b = m.predict(&[8, 7, 6, 5]).unwrap();
        assert!((&a - &b).iter().any(|d| d.abs() > 1e-9));

        let bag = tiny(BagOfEmbeddings::NAME);
        let a = bag.predict(&[5, 6, 7, 8]).unwrap();
        let b = bag.predict(&[8, 6, 5, 7]).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn single_token_bag_uses_its_row() {
        let bag = tiny(BagOfEmbeddings::NAME);
        let row = bag.params.mat("embedding").unwrap().row(6).mapv(f64::tanh);
        let w = bag.params.mat("softmax.w").unwrap();
        let b = bag.params.vector("softmax.b").unwrap();
        let want = softmax((w.dot(&row) + b).view());
        let got = bag.predict(&[6]).unwrap();
        assert!((&want - &got).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn plain_stack_parameter_difference() {
        let full = tiny(DeepMoji::NAME);
        let plain = tiny(PlainStack::NAME);
        let (d, h, c) = (4, 3, 4);
        let w_a = d + 4 * h;
        let head_diff = c * (w_a - 2 * h);
        assert_eq!(full.params.scalar_count() - plain.params.scalar_count(), w_a + head_diff);
    }

    #[test]
    fn loss_for_uniform_prediction() {
        let mut m = tiny(DeepMoji::NAME);
        m.params.mat_mut("softmax.w").unwrap().fill(0.0);
        let arch = m.architecture();
        let toks = [5u32, 6];
        let batch = vec![BatchItem { tokens: &toks, label: 2, mode: Mode::Infer }];
        let (loss, g) = loss_and_gradients(arch.as_ref(), &m.params, &batch, 0.0, None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g.grads.len(), m.params.len());
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        assert_eq!(cross_entropy(ndarray::array![0.0, 1.0, 0.0].view(), 1), 0.0);
    }

    #[test]
    fn head_reset_and_embedding_growth() {
        let mut m = tiny(DeepMoji::NAME);
        let before = m.params.mat("embedding").unwrap().to_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.extend_embedding(3, &mut rng).unwrap();
        m.reset_head(2, &mut rng).unwrap();
        let after = m.params.mat("embedding").unwrap();
        assert_eq!(after.nrows(), 15);
        assert_eq!(after.slice(ndarray::s![..12, ..]), before);
        assert!(after.slice(ndarray::s![12.., ..]).iter().all(|v| v.abs() <= 0.1));
        assert_eq!(m.predict(&[13, 14]).unwrap().len(), 2);
        assert_eq!(m.config.vocab_size, 15);
    }
}
