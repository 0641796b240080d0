use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Learning rate used for fine-tuning the segmentation network.
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Self {
            first_moment: params.iter().map(Tensor::zeros_like).collect(),
            second_moment: params.iter().map(Tensor::zeros_like).collect(),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::dim(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.ensure_same_shape(g, &format!("adam gradient {i}"))?;
        p.ensure_same_shape(&state.first_moment[i], &format!("adam moment {i}"))?;
    }

    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let m_hat = mv.to_f64_lossy() / bc1;
            let v_hat = vv.to_f64_lossy() / bc2;
            let update = lr * m_hat / (v_hat.sqrt() + epsilon);
            *pv -= T::from_f64_lossy(update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = vec![Tensor::<f32>::full(vec![3], 0.7)];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut st = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grads, &mut st, DEFAULT_LR).unwrap();
        assert_eq!(params[0].data(), &[0.7; 3]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::<f64>::new(vec![4], vec![1.0, 1.0, -2.0, 0.0]).unwrap()];
        let grads = vec![Tensor::new(vec![4], vec![3.0, -0.02, 50.0, -1e-3]).unwrap()];
        let mut st = AdamState::new(&params, AdamConfig::default());
        let lr = 0.01;
        adam_step(&mut params, &grads, &mut st, lr).unwrap();
        let expected = [1.0 - lr, 1.0 + lr, -2.0 - lr, lr];
        for (p, e) in params[0].data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-6, "{p} vs {e}");
        }
    }

    #[test]
    fn rejects_mismatched_shapes_and_bad_lr() {
        let mut params = vec![Tensor::<f32>::zeros(vec![2])];
        let mut st = AdamState::new(&params, AdamConfig::default());
        let bad = vec![Tensor::zeros(vec![3])];
        assert!(matches!(
            adam_step(&mut params, &bad, &mut st, 1e-3),
            Err(Error::Dimension(_))
        ));
        let ok = vec![Tensor::zeros(vec![2])];
        assert!(adam_step(&mut params, &ok, &mut st, 0.0).is_err());
        assert_eq!(st.step_count, 0);
    }
}
