use crate::model::{ParamSet, Scalar};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub m: ParamSet<S>,
    pub v: ParamSet<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// What clipping did on one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub norm: f64,
    pub scale: f64,
}

/// Global L2 norm over the tensors marked trainable.
pub fn global_norm<S: Scalar>(grads: &ParamSet<S>, trainable: &[bool]) -> f64 {
    grads
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .flat_map(|(g, _)| g.value.iter())
        .map(|&x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales trainable gradients in place so their global norm is at most
/// `clip_norm`.
pub fn clip_gradients<S: Scalar>(
    grads: &mut ParamSet<S>,
    trainable: &[bool],
    clip_norm: f64,
) -> Result<ClipReport, TrainError> {
    let norm = global_norm(grads, trainable);
    if !norm.is_finite() {
        let tensor = grads
            .iter()
            .zip(trainable)
            .find(|(g, &t)| t && g.value.iter().any(|x| !x.is_finite()))
            .map_or_else(|| "(overflow)".to_string(), |(g, _)| g.name.clone());
        return Err(TrainError::NonFiniteGradient { tensor });
    }
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    if scale < 1.0 {
        let s = S::from_f64(scale).expect("finite scale");
        for (g, _) in grads.iter_mut().zip(trainable).filter(|(_, &t)| t) {
            g.value.mapv_inplace(|x| x * s);
        }
    }
    Ok(ClipReport { norm, scale })
}

/// Clips, then applies one Adam update to the trainable tensors. Frozen
/// tensors and their moments are left untouched.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &mut ParamSet<S>,
    state: &mut AdamState<S>,
    trainable: &[bool],
    lr: &[f64],
    clip_norm: f64,
) -> Result<ClipReport, TrainError> {
    assert_eq!(trainable.len(), params.len(), "one trainability flag per tensor");
    assert_eq!(lr.len(), params.len(), "one learning rate per tensor");
    let report = clip_gradients(grads, trainable, clip_norm)?;
    if !trainable.iter().any(|&t| t) {
        return Ok(report);
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |x: f64| S::from_f64(x).expect("finite constant");
    let (b1, b2, eps) = (c(BETA1), c(BETA2), c(EPSILON));
    let bias1 = c(1.0 - BETA1.powi(t));
    let bias2 = c(1.0 - BETA2.powi(t));
    for i in 0..params.len() {
        if !trainable[i] {
            continue;
        }
        let rate = c(lr[i]);
        let g = &grads.at(i).value;
        let m = &mut state.m.at_mut(i).value;
        m.zip_mut_with(g, |m, &g| *m = b1 * *m + (S::one() - b1) * g);
        let v = &mut state.v.at_mut(i).value;
        v.zip_mut_with(g, |v, &g| *v = b2 * *v + (S::one() - b2) * g * g);
        let (m, v) = (&state.m.at(i).value, &state.v.at(i).value);
        let p = &mut params.at_mut(i).value;
        ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *p -= rate * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerGroup, Param};
    use ndarray::{arr1, ArrayD, IxDyn};
    use proptest::prelude::*;

    fn set(values: Vec<Vec<f64>>) -> ParamSet<f64> {
        ParamSet::new(
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| Param { name: format!("t{i}"), group: LayerGroup::Softmax, value: arr1(&v).into_dyn() })
                .collect(),
        )
    }

    #[test]
    fn norm_five_is_scaled_by_a_fifth() {
        let mut g = set(vec![vec![3.0], vec![4.0]]);
        let r = clip_gradients(&mut g, &[true, true], 1.0).unwrap();
        assert_eq!(r.norm, 5.0);
        assert_eq!(r.scale, 0.2);
        assert!((g.at(0).value[[0]] - 0.6).abs() < 1e-15);
        assert!((g.at(1).value[[0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensors_do_not_count_toward_norm() {
        let mut g = set(vec![vec![0.5], vec![100.0]]);
        let r = clip_gradients(&mut g, &[true, false], 1.0).unwrap();
        assert_eq!(r.scale, 1.0);
        assert_eq!(g.at(1).value[[0]], 100.0);
    }

    #[test]
    fn all_frozen_leaves_params_unchanged() {
        let mut p = set(vec![vec![1.0, 2.0]]);
        let before = p.clone();
        let mut g = set(vec![vec![0.3, -0.3]]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut g, &mut st, &[false], &[0.1], 1.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn zero_gradients_do_not_move_params() {
        let mut p = set(vec![vec![1.0, -2.0]]);
        let before = p.clone();
        let mut g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut g, &mut st, &[true], &[0.1], 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With zero moments, the bias-corrected first step is lr · sign(g),
        // up to the epsilon in the denominator.
        let mut p = set(vec![vec![0.0, 0.0]]);
        let mut g = set(vec![vec![0.3, -0.02]]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut g, &mut st, &[true], &[0.01], 10.0).unwrap();
        assert!((p.at(0).value[[0]] + 0.01).abs() < 1e-8);
        assert!((p.at(0).value[[1]] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut g = set(vec![vec![f64::NAN]]);
        let err = clip_gradients(&mut g, &[true], 1.0).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { .. }));
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(v in proptest::collection::vec(-50.0f64..50.0, 1..20), clip in 0.1f64..5.0) {
            let mut g = ParamSet::new(vec![Param {
                name: "x".into(),
                group: LayerGroup::Embedding,
                value: ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap(),
            }]);
            clip_gradients(&mut g, &[true], clip).unwrap();
            prop_assert!(global_norm(&g, &[true]) <= clip + 1e-6);
        }
    }
}
