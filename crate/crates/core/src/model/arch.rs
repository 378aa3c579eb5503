use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, IxDyn};
use rand::RngCore;

use super::lstm::{birnn_backward, birnn_forward, BiLayerWeights, BiTrace};
use super::params::{embedding_init, gate_bias, glorot, param, recurrent_init, LayerGroup, Param, ParamSet};
use super::{
    attention_backward, attention_forward, cross_entropy, effective_len, embed_forward, softmax, Architecture,
    AttentionOutput, Mode, ModelConfig, ModelError, Scalar,
};

fn recurrent_layer<S: Scalar>(
    prefix: &str,
    group: LayerGroup,
    input: usize,
    units: usize,
    rng: &mut dyn RngCore,
) -> Vec<Param<S>> {
    let mut out = Vec::with_capacity(6);
    for dir in ["fwd", "bwd"] {
        out.push(param(format!("{prefix}.{dir}.w_in"), group, glorot(4 * units, input, rng)));
        out.push(param(format!("{prefix}.{dir}.w_rec"), group, recurrent_init(units, rng)));
        out.push(param(format!("{prefix}.{dir}.bias"), group, gate_bias(units)));
    }
    out
}

fn head<S: Scalar>(classes: usize, width: usize, rng: &mut dyn RngCore) -> Vec<Param<S>> {
    vec![
        param("softmax.w", LayerGroup::Softmax, glorot(classes, width, rng)),
        param("softmax.b", LayerGroup::Softmax, ndarray::ArrayD::zeros(IxDyn(&[classes]))),
    ]
}

/// Embedding lookup, tanh, then per-channel dropout shared by all steps.
struct EmbedTrace<S> {
    ids: Vec<u32>,
    bounded: Array2<S>,
    out: Array2<S>,
}

fn embed<S: Scalar>(params: &ParamSet<S>, tokens: &[u32], mode: &Mode<S>) -> Result<EmbedTrace<S>, ModelError> {
    let len = effective_len(tokens);
    if len == 0 {
        return Err(ModelError::AllTimestepsMasked);
    }
    let ids = tokens[..len].to_vec();
    let bounded = embed_forward(&ids, params.mat("embedding")?)?;
    let out = match mode.masks() {
        Some(m) => &bounded * &m.embed,
        None => bounded.clone(),
    };
    Ok(EmbedTrace { ids, bounded, out })
}

fn embed_backward<S: Scalar>(
    trace: &EmbedTrace<S>,
    d_out: ArrayView2<S>,
    mode: &Mode<S>,
    grads: &mut ParamSet<S>,
) -> Result<(), ModelError> {
    let mut g = grads.mat_mut("embedding")?;
    for (t, &id) in trace.ids.iter().enumerate() {
        let mut row = g.row_mut(id as usize);
        for k in 0..d_out.ncols() {
            let keep = mode.masks().map_or(S::one(), |m| m.embed[k]);
            let b = trace.bounded[[t, k]];
            row[k] += d_out[[t, k]] * keep * (S::one() - b * b);
        }
    }
    Ok(())
}

/// Softmax head over the (possibly dropped-out) penultimate vector.
struct HeadTrace<S> {
    input: Array1<S>,
    probs: Array1<S>,
}

fn head_forward<S: Scalar>(params: &ParamSet<S>, v: ArrayView1<S>, mode: &Mode<S>) -> Result<HeadTrace<S>, ModelError> {
    let w = params.mat("softmax.w")?;
    let b = params.vector("softmax.b")?;
    if w.ncols() != v.len() {
        return Err(ModelError::ShapeMismatch {
            tensor: "softmax.w".into(),
            detail: format!("expects width {}, got {}", w.ncols(), v.len()),
        });
    }
    let input = match mode.masks() {
        Some(m) => &v * &m.penultimate,
        None => v.to_owned(),
    };
    let probs = softmax((w.dot(&input) + b).view());
    Ok(HeadTrace { input, probs })
}

/// Returns `(cross-entropy, d_penultimate)` after adding head gradients.
fn head_backward<S: Scalar>(
    params: &ParamSet<S>,
    trace: &HeadTrace<S>,
    label: usize,
    mode: &Mode<S>,
    scale: S,
    grads: &mut ParamSet<S>,
) -> Result<(S, Array1<S>), ModelError> {
    let classes = trace.probs.len();
    if label >= classes {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    let loss = cross_entropy(trace.probs.view(), label);
    let mut d_logits = trace.probs.clone();
    d_logits[label] -= S::one();
    d_logits *= scale;
    {
        let mut gw = grads.mat_mut("softmax.w")?;
        for (c, mut row) in gw.rows_mut().into_iter().enumerate() {
            row.scaled_add(d_logits[c], &trace.input);
        }
    }
    let mut gb = grads.vector_mut("softmax.b")?;
    gb += &d_logits;
    let w = params.mat("softmax.w")?;
    let mut d_v = w.t().dot(&d_logits);
    if let Some(m) = mode.masks() {
        d_v *= &m.penultimate;
    }
    Ok((loss, d_v))
}

/// Bounded embeddings, two bidirectional recurrent layers, and attention
/// over the concatenation `[embedding, layer 1, layer 2]` of every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeepMoji;

impl DeepMoji {
    pub const NAME: &'static str = "deepmoji";
}

struct DeepMojiTrace<S> {
    embed: EmbedTrace<S>,
    rec1: BiTrace<S>,
    rec2: BiTrace<S>,
    stacked: Array2<S>,
    attention: AttentionOutput<S>,
    head: HeadTrace<S>,
}

impl DeepMoji {
    fn trace<S: Scalar>(params: &ParamSet<S>, tokens: &[u32], mode: &Mode<S>) -> Result<DeepMojiTrace<S>, ModelError> {
        let embed = embed(params, tokens, mode)?;
        let rec1 = birnn_forward(embed.out.view(), &BiLayerWeights::from_params(params, "rec1")?)?;
        let rec2 = birnn_forward(rec1.output.view(), &BiLayerWeights::from_params(params, "rec2")?)?;
        let stacked = ndarray::concatenate(Axis(1), &[embed.out.view(), rec1.output.view(), rec2.output.view()])
            .expect("equal lengths");
        // Recurrence runs over the real tokens only; padding never reaches
        // the stack, so every row here is unmasked.
        let mask = vec![true; stacked.nrows()];
        let attention = attention_forward(stacked.view(), params.vector("attention.w")?, &mask)?;
        let head = head_forward(params, attention.summary.view(), mode)?;
        Ok(DeepMojiTrace { embed, rec1, rec2, stacked, attention, head })
    }
}

impl<S: Scalar> Architecture<S> for DeepMoji {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn layer_groups(&self) -> &'static [LayerGroup] {
        &[
            LayerGroup::Embedding,
            LayerGroup::Recurrent1,
            LayerGroup::Recurrent2,
            LayerGroup::Attention,
            LayerGroup::Softmax,
        ]
    }

    fn init(&self, cfg: &ModelConfig, rng: &mut dyn RngCore) -> ParamSet<S> {
        let (d, h) = (cfg.embed_dim, cfg.units);
        let mut v = vec![param("embedding", LayerGroup::Embedding, embedding_init(cfg.vocab_size, d, rng))];
        v.extend(recurrent_layer("rec1", LayerGroup::Recurrent1, d, h, rng));
        v.extend(recurrent_layer("rec2", LayerGroup::Recurrent2, 2 * h, h, rng));
        let channels = cfg.attention_channels();
        let limit = (6.0 / (channels + 1) as f64).sqrt();
        v.push(param("attention.w", LayerGroup::Attention, super::params::uniform(&[channels], limit, rng)));
        v.extend(head(cfg.classes, channels, rng));
        ParamSet::new(v)
    }

    fn penultimate_width(&self, cfg: &ModelConfig) -> usize {
        cfg.attention_channels()
    }

    fn forward(&self, params: &ParamSet<S>, tokens: &[u32], mode: &Mode<S>) -> Result<Array1<S>, ModelError> {
        Ok(Self::trace(params, tokens, mode)?.head.probs)
    }

    fn accumulate_gradients(
        &self,
        params: &ParamSet<S>,
        tokens: &[u32],
        label: usize,
        mode: &Mode<S>,
        scale: S,
        grads: &mut ParamSet<S>,
    ) -> Result<S, ModelError> {
        let tr = Self::trace(params, tokens, mode)?;
        let (loss, d_v) = head_backward(params, &tr.head, label, mode, scale, grads)?;
        let w_a = params.vector("attention.w")?;
        let (d_stacked, d_w) = attention_backward(tr.stacked.view(), w_a, &tr.attention, d_v.view());
        {
            let mut gw = grads.vector_mut("attention.w")?;
            gw += &d_w;
        }

        let d = tr.embed.out.ncols();
        let h2 = tr.rec1.output.ncols();
        let mut d_x = d_stacked.slice(s![.., ..d]).to_owned();
        let mut d_r1 = d_stacked.slice(s![.., d..d + h2]).to_owned();
        let d_r2 = d_stacked.slice(s![.., d + h2..]);

        let w2 = BiLayerWeights::from_params(params, "rec2")?;
        d_r1 += &birnn_backward(&tr.rec2, &w2, d_r2, grads, "rec2")?;
        let w1 = BiLayerWeights::from_params(params, "rec1")?;
        d_x += &birnn_backward(&tr.rec1, &w1, d_r1.view(), grads, "rec1")?;
        embed_backward(&tr.embed, d_x.view(), mode, grads)?;
        Ok(loss)
    }
}

/// Mean of bounded embeddings straight into the softmax head. Ignores
/// word order.
#[derive(Debug, Clone, Copy, Default)]
pub struct BagOfEmbeddings;

impl BagOfEmbeddings {
    pub const NAME: &'static str = "bag-of-embeddings";
}

impl<S: Scalar> Architecture<S> for BagOfEmbeddings {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn layer_groups(&self) -> &'static [LayerGroup] {
        &[LayerGroup::Embedding, LayerGroup::Softmax]
    }

    fn init(&self, cfg: &ModelConfig, rng: &mut dyn RngCore) -> ParamSet<S> {
        let mut v = vec![param("embedding", LayerGroup::Embedding, embedding_init(cfg.vocab_size, cfg.embed_dim, rng))];
        v.extend(head(cfg.classes, cfg.embed_dim, rng));
        ParamSet::new(v)
    }

    fn penultimate_width(&self, cfg: &ModelConfig) -> usize {
        cfg.embed_dim
    }

    fn forward(&self, params: &ParamSet<S>, tokens: &[u32], mode: &Mode<S>) -> Result<Array1<S>, ModelError> {
        let e = embed(params, tokens, mode)?;
        let mean = e.out.mean_axis(Axis(0)).expect("non-empty");
        Ok(head_forward(params, mean.view(), mode)?.probs)
    }

    fn accumulate_gradients(
        &self,
        params: &ParamSet<S>,
        tokens: &[u32],
        label: usize,
        mode: &Mode<S>,
        scale: S,
        grads: &mut ParamSet<S>,
    ) -> Result<S, ModelError> {
        let e = embed(params, tokens, mode)?;
        let mean = e.out.mean_axis(Axis(0)).expect("non-empty");
        let hd = head_forward(params, mean.view(), mode)?;
        let (loss, d_mean) = head_backward(params, &hd, label, mode, scale, grads)?;
        let n = S::from(e.out.nrows()).unwrap();
        let row = d_mean.mapv(|g| g / n);
        let d_out = row.broadcast(e.out.raw_dim()).expect("row broadcast").to_owned();
        embed_backward(&e, d_out.view(), mode, grads)?;
        Ok(loss)
    }
}

/// Two bidirectional layers read out from their final states, with no
/// attention and no skip connections.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainStack;

impl PlainStack {
    pub const NAME: &'static str = "plain-stack";
}

impl<S: Scalar> Architecture<S> for PlainStack {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn layer_groups(&self) -> &'static [LayerGroup] {
        &[LayerGroup::Embedding, LayerGroup::Recurrent1, LayerGroup::Recurrent2, LayerGroup::Softmax]
    }

    fn init(&self, cfg: &ModelConfig, rng: &mut dyn RngCore) -> ParamSet<S> {
        let (d, h) = (cfg.embed_dim, cfg.units);
        let mut v = vec![param("embedding", LayerGroup::Embedding, embedding_init(cfg.vocab_size, d, rng))];
        v.extend(recurrent_layer("rec1", LayerGroup::Recurrent1, d, h, rng));
        v.extend(recurrent_layer("rec2", LayerGroup::Recurrent2, 2 * h, h, rng));
        v.extend(head(cfg.classes, 2 * h, rng));
        ParamSet::new(v)
    }

    fn penultimate_width(&self, cfg: &ModelConfig) -> usize {
        2 * cfg.units
    }

    fn forward(&self, params: &ParamSet<S>, tokens: &[u32], mode: &Mode<S>) -> Result<Array1<S>, ModelError> {
        let e = embed(params, tokens, mode)?;
        let r1 = birnn_forward(e.out.view(), &BiLayerWeights::from_params(params, "rec1")?)?;
        let r2 = birnn_forward(r1.output.view(), &BiLayerWeights::from_params(params, "rec2")?)?;
        Ok(head_forward(params, r2.final_states().view(), mode)?.probs)
    }

    fn accumulate_gradients(
        &self,
        params: &ParamSet<S>,
        tokens: &[u32],
        label: usize,
        mode: &Mode<S>,
        scale: S,
        grads: &mut ParamSet<S>,
    ) -> Result<S, ModelError> {
        let e = embed(params, tokens, mode)?;
        let w1 = BiLayerWeights::from_params(params, "rec1")?;
        let w2 = BiLayerWeights::from_params(params, "rec2")?;
        let r1 = birnn_forward(e.out.view(), &w1)?;
        let r2 = birnn_forward(r1.output.view(), &w2)?;
        let hd = head_forward(params, r2.final_states().view(), mode)?;
        let (loss, d_final) = head_backward(params, &hd, label, mode, scale, grads)?;

        let t_len = r2.output.nrows();
        let h = r2.output.ncols() / 2;
        let mut d_r2 = Array2::<S>::zeros(r2.output.raw_dim());
        d_r2.slice_mut(s![t_len - 1, ..h]).assign(&d_final.slice(s![..h]));
        d_r2.slice_mut(s![0, h..]).assign(&d_final.slice(s![h..]));
        let d_r1 = birnn_backward(&r2, &w2, d_r2.view(), grads, "rec2")?;
        let d_x = birnn_backward(&r1, &w1, d_r1.view(), grads, "rec1")?;
        embed_backward(&e, d_x.view(), mode, grads)?;
        Ok(loss)
    }
}
