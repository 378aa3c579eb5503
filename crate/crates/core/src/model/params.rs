use std::fmt;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{ModelError, Scalar};

/// Trainable unit used by freezing schedules, ordered input to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerGroup {
    Embedding,
    Recurrent1,
    Recurrent2,
    Attention,
    Softmax,
}

impl LayerGroup {
    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Embedding => "embedding",
            LayerGroup::Recurrent1 => "recurrent-1",
            LayerGroup::Recurrent2 => "recurrent-2",
            LayerGroup::Attention => "attention",
            LayerGroup::Softmax => "softmax",
        }
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub group: LayerGroup,
    pub value: ArrayD<S>,
}

/// Ordered collection of named tensors. Gradients and optimizer moments
/// use the same layout as the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new(params: Vec<Param<S>>) -> Self {
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn groups(&self) -> Vec<LayerGroup> {
        self.params.iter().map(|p| p.group).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, ModelError> {
        self.params.iter().position(|p| p.name == name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>, ModelError> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param<S> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<S> {
        &mut self.params[i]
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, S>, ModelError> {
        let p = self.get(name)?;
        p.value.view().into_dimensionality::<Ix2>().map_err(|_| ModelError::ShapeMismatch {
            tensor: name.to_string(),
            detail: format!("expected matrix, got shape {:?}", p.value.shape()),
        })
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, S>, ModelError> {
        let p = self.get(name)?;
        p.value.view().into_dimensionality::<Ix1>().map_err(|_| ModelError::ShapeMismatch {
            tensor: name.to_string(),
            detail: format!("expected vector, got shape {:?}", p.value.shape()),
        })
    }

    pub fn mat_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, S>, ModelError> {
        let i = self.index_of(name)?;
        self.params[i]
            .value
            .view_mut()
            .into_dimensionality::<Ix2>()
            .map_err(|_| ModelError::ShapeMismatch { tensor: name.to_string(), detail: "expected matrix".into() })
    }

    pub fn vector_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, S>, ModelError> {
        let i = self.index_of(name)?;
        self.params[i]
            .value
            .view_mut()
            .into_dimensionality::<Ix1>()
            .map_err(|_| ModelError::ShapeMismatch { tensor: name.to_string(), detail: "expected vector".into() })
    }

    /// Replaces the tensor called `name`, keeping its position.
    pub fn replace(&mut self, name: &str, value: ArrayD<S>) -> Result<(), ModelError> {
        let i = self.index_of(name)?;
        self.params[i].value = value;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: ArrayD::zeros(p.value.raw_dim()) })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value += &b.value;
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.mapv(|v| T::from(v).expect("finite cast")),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Hex SHA-256 over names, shapes and values (as 32-bit floats).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn param<S: Scalar>(name: impl Into<String>, group: LayerGroup, value: ArrayD<S>) -> Param<S> {
    Param { name: name.into(), group, value }
}

/// Identifier stored in checkpoints for the initialization scheme below.
pub const INIT_RECIPE: &str = "glorot-uniform+orthogonal-recurrent+forget-bias-1+embed-uniform-0.1/v1";

pub(crate) fn uniform<S: Scalar>(shape: &[usize], limit: f64, rng: &mut dyn RngCore) -> ArrayD<S> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || S::from(rng.random_range(-limit..=limit)).unwrap())
}

pub(crate) fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut dyn RngCore) -> ArrayD<S> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(&[rows, cols], limit, rng)
}

pub(crate) fn embedding_init<S: Scalar>(rows: usize, cols: usize, rng: &mut dyn RngCore) -> ArrayD<S> {
    uniform(&[rows, cols], 0.1, rng)
}

/// Square orthogonal matrix by modified Gram-Schmidt on Gaussian samples.
fn orthogonal(n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, n));
    for v in m.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for i in 0..n {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm > 1e-12 {
            m.row_mut(i).mapv_inplace(|v| v / norm);
        } else {
            m.row_mut(i).fill(0.0);
            m[[i, i]] = 1.0;
        }
    }
    m
}

/// Recurrent weights `[4H × H]`: one orthogonal block per gate.
pub(crate) fn recurrent_init<S: Scalar>(units: usize, rng: &mut dyn RngCore) -> ArrayD<S> {
    let mut out = Array2::<S>::zeros((4 * units, units));
    for gate in 0..4 {
        let block = orthogonal(units, rng);
        for r in 0..units {
            for c in 0..units {
                out[[gate * units + r, c]] = S::from(block[[r, c]]).unwrap();
            }
        }
    }
    out.into_dyn()
}

/// Gate biases `[i, f, g, o]`, forget gate at 1.
pub(crate) fn gate_bias<S: Scalar>(units: usize) -> ArrayD<S> {
    let mut b = Array1::<S>::zeros(4 * units);
    b.slice_mut(ndarray::s![units..2 * units]).fill(S::one());
    b.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(6, &mut rng);
        let prod = q.dot(&q.t());
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forget_bias_is_one() {
        let b: ArrayD<f64> = gate_bias(3);
        assert_eq!(b.as_slice().unwrap(), &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }
}
