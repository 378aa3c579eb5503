//! Attention pooling with one weight per input channel:
//! `e_t = h_t · w`, `a = softmax(e)` over unmasked steps, `v = Σ a_t h_t`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::{ModelError, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<S> {
    pub scores: Array1<S>,
    pub weights: Array1<S>,
    pub summary: Array1<S>,
}

/// `mask[t] == true` marks a real (unmasked) timestep. Masked steps get
/// weight exactly zero.
pub fn attention_forward<S: Scalar>(
    stacked: ArrayView2<S>,
    w_a: ArrayView1<S>,
    mask: &[bool],
) -> Result<AttentionOutput<S>, ModelError> {
    if stacked.ncols() != w_a.len() {
        return Err(ModelError::ShapeMismatch {
            tensor: "attention.w".into(),
            detail: format!("{} channels vs {} weights", stacked.ncols(), w_a.len()),
        });
    }
    if mask.len() != stacked.nrows() {
        return Err(ModelError::ShapeMismatch {
            tensor: "attention mask".into(),
            detail: format!("{} mask entries for {} timesteps", mask.len(), stacked.nrows()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::AllTimestepsMasked);
    }
    let scores = stacked.dot(&w_a);
    let max = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).fold(S::neg_infinity(), S::max);
    let mut weights = Array1::<S>::zeros(scores.len());
    let mut total = S::zero();
    for (t, (&e, &m)) in scores.iter().zip(mask).enumerate() {
        if m {
            let x = (e - max).exp();
            weights[t] = x;
            total += x;
        }
    }
    weights.mapv_inplace(|x| x / total);
    let summary = stacked.t().dot(&weights);
    Ok(AttentionOutput { scores, weights, summary })
}

/// Returns `(d_stacked, d_w)` given `d_summary`.
pub fn attention_backward<S: Scalar>(
    stacked: ArrayView2<S>,
    w_a: ArrayView1<S>,
    out: &AttentionOutput<S>,
    d_summary: ArrayView1<S>,
) -> (Array2<S>, Array1<S>) {
    let a = &out.weights;
    let da = stacked.dot(&d_summary);
    let mean = a.dot(&da);
    let de = a * &(&da - mean);
    let mut d_stacked = Array2::<S>::zeros(stacked.raw_dim());
    for (t, mut row) in d_stacked.rows_mut().into_iter().enumerate() {
        row.scaled_add(a[t], &d_summary);
        row.scaled_add(de[t], &w_a);
    }
    let d_w = stacked.t().dot(&de);
    (d_stacked, d_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_computed_two_steps() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let w = array![1.0, 1.0];
        let out = attention_forward(h.view(), w.view(), &[true, true]).unwrap();
        assert_eq!(out.scores, array![1.0, 1.0]);
        assert_eq!(out.weights, array![0.5, 0.5]);
        assert_eq!(out.summary, array![0.5, 0.5]);
    }

    #[test]
    fn single_step_returns_its_state() {
        let h = array![[0.3, -0.7, 2.0]];
        let out = attention_forward(h.view(), array![5.0, 1.0, -2.0].view(), &[true]).unwrap();
        assert_eq!(out.summary, h.row(0));
    }

    #[test]
    fn equal_scores_are_uniform_over_unmasked() {
        let h: Array2<f64> = array![[1.0, 1.0], [2.0, 0.0], [0.0, 2.0], [9.0, 9.0]];
        let out = attention_forward(h.view(), array![1.0, 1.0].view(), &[true, true, true, false]).unwrap();
        for t in 0..3 {
            assert!((out.weights[t] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(out.weights[3], 0.0);
    }

    #[test]
    fn fully_masked_is_an_error() {
        let h = array![[1.0]];
        let err = attention_forward(h.view(), array![1.0].view(), &[false]).unwrap_err();
        assert!(matches!(err, ModelError::AllTimestepsMasked));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = array![[0.2, -0.4, 0.9], [0.5, 0.1, -0.3], [-0.8, 0.6, 0.05]];
        let w = array![0.7, -1.1, 0.4];
        let g = array![0.3, -0.2, 0.5];
        let mask = [true, true, false];
        let f =
            |h: &Array2<f64>, w: &Array1<f64>| attention_forward(h.view(), w.view(), &mask).unwrap().summary.dot(&g);
        let out = attention_forward(h.view(), w.view(), &mask).unwrap();
        let (dh, dw) = attention_backward(h.view(), w.view(), &out, g.view());
        let eps = 1e-6;
        for i in 0..3 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += eps;
            wm[i] -= eps;
            let num = (f(&h, &wp) - f(&h, &wm)) / (2.0 * eps);
            assert!((num - dw[i]).abs() < 1e-8);
            for t in 0..3 {
                let (mut hp, mut hm) = (h.clone(), h.clone());
                hp[[t, i]] += eps;
                hm[[t, i]] -= eps;
                let num = (f(&hp, &w) - f(&hm, &w)) / (2.0 * eps);
                assert!((num - dh[[t, i]]).abs() < 1e-8);
            }
        }
    }
}
