use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, RngCore};

use crate::model::{DropoutMasks, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutPhase {
    /// Whole embedding channels, shared by every timestep.
    Embedding,
    /// Independent units of the penultimate representation.
    Penultimate,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 − rate)`.
pub fn dropout_mask<S: Scalar>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Array1<S> {
    if rate <= 0.0 {
        return Array1::ones(len);
    }
    let keep = S::from_f64(1.0 / (1.0 - rate)).expect("finite scale");
    Array1::from_shape_fn(len, |_| if rng.random::<f64>() < rate { S::zero() } else { keep })
}

pub fn sample_masks<S: Scalar>(
    embed_dim: usize,
    penultimate_width: usize,
    embed_rate: f64,
    penultimate_rate: f64,
    rng: &mut dyn RngCore,
) -> DropoutMasks<S> {
    DropoutMasks {
        embed: dropout_mask(embed_dim, embed_rate, rng),
        penultimate: dropout_mask(penultimate_width, penultimate_rate, rng),
    }
}

/// Applies dropout to `[T × D]` activations. The embedding phase draws one
/// mask over the `D` channels and applies it at every timestep; the
/// penultimate phase masks every entry independently.
pub fn apply_dropout<S: Scalar>(
    phase: DropoutPhase,
    activations: ArrayView2<S>,
    rate: f64,
    rng: &mut dyn RngCore,
) -> Array2<S> {
    match phase {
        DropoutPhase::Embedding => {
            let mask = dropout_mask::<S>(activations.ncols(), rate, rng);
            &activations * &mask
        }
        DropoutPhase::Penultimate => {
            let mask = dropout_mask::<S>(activations.len(), rate, rng)
                .into_shape_with_order(activations.raw_dim())
                .expect("same element count");
            &activations * &mask
        }
    }
}
