//! Gated recurrent cell (input/forget/output gates, tanh candidate, no
//! peepholes) and its bidirectional wrapper, with hand-written BPTT.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use super::{sigmoid, ModelError, ParamSet, Scalar};

/// Weights of one direction. Gate blocks are ordered `[i, f, g, o]`.
#[derive(Debug, Clone, Copy)]
pub struct CellWeights<'a, S> {
    pub w_in: ArrayView2<'a, S>,
    pub w_rec: ArrayView2<'a, S>,
    pub bias: ArrayView1<'a, S>,
}

impl<'a, S: Scalar> CellWeights<'a, S> {
    pub fn from_params(params: &'a ParamSet<S>, prefix: &str) -> Result<Self, ModelError> {
        let w = Self {
            w_in: params.mat(&format!("{prefix}.w_in"))?,
            w_rec: params.mat(&format!("{prefix}.w_rec"))?,
            bias: params.vector(&format!("{prefix}.bias"))?,
        };
        let units = w.units();
        if w.w_in.nrows() != 4 * units || w.w_rec.ncols() != units || w.bias.len() != 4 * units {
            return Err(ModelError::ShapeMismatch {
                tensor: prefix.to_string(),
                detail: "inconsistent gate shapes".into(),
            });
        }
        Ok(w)
    }

    pub fn units(&self) -> usize {
        self.w_rec.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.ncols()
    }
}

/// Activations kept for the backward pass of one direction.
#[derive(Debug, Clone)]
pub struct CellTrace<S> {
    /// Input rows in processing order `[T × in]`.
    input: Array2<S>,
    /// Gate activations `[T × 4H]` (after nonlinearity).
    gates: Array2<S>,
    /// Cell states `[T × H]`.
    cells: Array2<S>,
    /// Hidden states `[T × H]`, in processing order.
    pub hidden: Array2<S>,
}

/// Runs one direction over `input` rows in order.
pub fn cell_forward<S: Scalar>(input: ArrayView2<S>, w: &CellWeights<S>) -> CellTrace<S> {
    let t_len = input.nrows();
    let h = w.units();
    let mut pre = Array2::<S>::zeros((t_len, 4 * h));
    general_mat_mul(S::one(), &input, &w.w_in.t(), S::zero(), &mut pre);
    pre += &w.bias;

    let mut gates = Array2::<S>::zeros((t_len, 4 * h));
    let mut cells = Array2::<S>::zeros((t_len, h));
    let mut hidden = Array2::<S>::zeros((t_len, h));
    let mut h_prev = Array1::<S>::zeros(h);
    let mut c_prev = Array1::<S>::zeros(h);
    for t in 0..t_len {
        let z = &pre.row(t) + &w.w_rec.dot(&h_prev);
        let mut g = gates.row_mut(t);
        for k in 0..h {
            let i_g = sigmoid(z[k]);
            let f_g = sigmoid(z[h + k]);
            let c_g = z[2 * h + k].tanh();
            let o_g = sigmoid(z[3 * h + k]);
            g[k] = i_g;
            g[h + k] = f_g;
            g[2 * h + k] = c_g;
            g[3 * h + k] = o_g;
            let c = f_g * c_prev[k] + i_g * c_g;
            cells[[t, k]] = c;
            hidden[[t, k]] = o_g * c.tanh();
        }
        h_prev.assign(&hidden.row(t));
        c_prev.assign(&cells.row(t));
    }
    CellTrace { input: input.to_owned(), gates, cells, hidden }
}

/// Gradient accumulators of one direction.
pub struct CellGrads<'a, S> {
    pub w_in: ArrayViewMut2<'a, S>,
    pub w_rec: ArrayViewMut2<'a, S>,
    pub bias: ArrayViewMut1<'a, S>,
}

/// Backpropagates `d_hidden` (`[T × H]`, processing order) through one
/// direction. Accumulates weight gradients and returns `d_input`.
pub fn cell_backward<S: Scalar>(
    trace: &CellTrace<S>,
    w: &CellWeights<S>,
    d_hidden: ArrayView2<S>,
    grads: &mut CellGrads<S>,
) -> Array2<S> {
    let t_len = trace.hidden.nrows();
    let h = w.units();
    let one = S::one();
    let mut dz = Array2::<S>::zeros((t_len, 4 * h));
    let mut dh_next = Array1::<S>::zeros(h);
    let mut dc_next = Array1::<S>::zeros(h);
    for t in (0..t_len).rev() {
        let g = trace.gates.row(t);
        let mut dz_t = dz.row_mut(t);
        for k in 0..h {
            let (i_g, f_g, c_g, o_g) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let c = trace.cells[[t, k]];
            let c_prev = if t > 0 { trace.cells[[t - 1, k]] } else { S::zero() };
            let tc = c.tanh();
            let dh = d_hidden[[t, k]] + dh_next[k];
            let d_o = dh * tc;
            let dc = dc_next[k] + dh * o_g * (one - tc * tc);
            let d_i = dc * c_g;
            let d_g = dc * i_g;
            let d_f = dc * c_prev;
            dc_next[k] = dc * f_g;
            dz_t[k] = d_i * i_g * (one - i_g);
            dz_t[h + k] = d_f * f_g * (one - f_g);
            dz_t[2 * h + k] = d_g * (one - c_g * c_g);
            dz_t[3 * h + k] = d_o * o_g * (one - o_g);
        }
        dh_next = w.w_rec.t().dot(&dz.row(t));
    }

    general_mat_mul(one, &dz.t(), &trace.input, one, &mut grads.w_in);
    if t_len > 1 {
        let prev_hidden = trace.hidden.slice(s![..t_len - 1, ..]);
        general_mat_mul(one, &dz.slice(s![1.., ..]).t(), &prev_hidden, one, &mut grads.w_rec);
    }
    grads.bias += &dz.sum_axis(Axis(0));

    let mut d_input = Array2::<S>::zeros((t_len, w.input_dim()));
    general_mat_mul(one, &dz, &w.w_in, S::zero(), &mut d_input);
    d_input
}

/// Weights of a bidirectional layer.
#[derive(Debug, Clone, Copy)]
pub struct BiLayerWeights<'a, S> {
    pub forward: CellWeights<'a, S>,
    pub backward: CellWeights<'a, S>,
}

impl<'a, S: Scalar> BiLayerWeights<'a, S> {
    pub fn from_params(params: &'a ParamSet<S>, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            forward: CellWeights::from_params(params, &format!("{prefix}.fwd"))?,
            backward: CellWeights::from_params(params, &format!("{prefix}.bwd"))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BiTrace<S> {
    fwd: CellTrace<S>,
    bwd: CellTrace<S>,
    /// `[T × 2H]`: forward state then backward state for each timestep.
    pub output: Array2<S>,
}

fn reversed<S: Scalar>(a: ArrayView2<S>) -> Array2<S> {
    a.slice(s![..;-1, ..]).to_owned()
}

/// Bidirectional layer: `output_t = [forward_t ; backward_t]`, with the
/// backward direction consuming the sequence from the end.
pub fn birnn_forward<S: Scalar>(input: ArrayView2<S>, w: &BiLayerWeights<S>) -> Result<BiTrace<S>, ModelError> {
    if input.ncols() != w.forward.input_dim() || input.ncols() != w.backward.input_dim() {
        return Err(ModelError::ShapeMismatch {
            tensor: "recurrent input".into(),
            detail: format!("width {} vs weights {}", input.ncols(), w.forward.input_dim()),
        });
    }
    let fwd = cell_forward(input, &w.forward);
    let bwd = cell_forward(reversed(input).view(), &w.backward);
    let h = w.forward.units();
    let t_len = input.nrows();
    let mut output = Array2::<S>::zeros((t_len, 2 * h));
    output.slice_mut(s![.., ..h]).assign(&fwd.hidden);
    output.slice_mut(s![.., h..]).assign(&bwd.hidden.slice(s![..;-1, ..]));
    Ok(BiTrace { fwd, bwd, output })
}

/// Backward pass of [`birnn_forward`]; `d_output` is `[T × 2H]`.
pub fn birnn_backward<S: Scalar>(
    trace: &BiTrace<S>,
    w: &BiLayerWeights<S>,
    d_output: ArrayView2<S>,
    params_grads: &mut ParamSet<S>,
    prefix: &str,
) -> Result<Array2<S>, ModelError> {
    let h = w.forward.units();
    let d_fwd = d_output.slice(s![.., ..h]);
    let d_bwd = reversed(d_output.slice(s![.., h..]));
    let mut d_in = direction_backward(&trace.fwd, &w.forward, d_fwd, params_grads, &format!("{prefix}.fwd"))?;
    let d_in_bwd = direction_backward(&trace.bwd, &w.backward, d_bwd.view(), params_grads, &format!("{prefix}.bwd"))?;
    d_in += &d_in_bwd.slice(s![..;-1, ..]);
    Ok(d_in)
}

fn direction_backward<S: Scalar>(
    trace: &CellTrace<S>,
    w: &CellWeights<S>,
    d_hidden: ArrayView2<S>,
    grads: &mut ParamSet<S>,
    prefix: &str,
) -> Result<Array2<S>, ModelError> {
    // Borrow the three gradient tensors disjointly.
    let i_in = grads.index_of(&format!("{prefix}.w_in"))?;
    let i_rec = grads.index_of(&format!("{prefix}.w_rec"))?;
    let i_b = grads.index_of(&format!("{prefix}.bias"))?;
    let mut g_in = std::mem::take(&mut grads.at_mut(i_in).value);
    let mut g_rec = std::mem::take(&mut grads.at_mut(i_rec).value);
    let mut g_b = std::mem::take(&mut grads.at_mut(i_b).value);
    let d_in = {
        let mut cg = CellGrads {
            w_in: g_in.view_mut().into_dimensionality().expect("matrix"),
            w_rec: g_rec.view_mut().into_dimensionality().expect("matrix"),
            bias: g_b.view_mut().into_dimensionality().expect("vector"),
        };
        cell_backward(trace, w, d_hidden, &mut cg)
    };
    grads.at_mut(i_in).value = g_in;
    grads.at_mut(i_rec).value = g_rec;
    grads.at_mut(i_b).value = g_b;
    Ok(d_in)
}

impl<S: Scalar> BiTrace<S> {
    /// Final state of each direction: forward after the last step,
    /// backward after the first.
    pub fn final_states(&self) -> Array1<S> {
        let t_len = self.output.nrows();
        let h = self.output.ncols() / 2;
        let mut out = Array1::zeros(2 * h);
        out.slice_mut(s![..h]).assign(&self.output.slice(s![t_len - 1, ..h]));
        out.slice_mut(s![h..]).assign(&self.output.slice(s![0, h..]));
        out
    }
}
