//! Adam optimizer over flat parameter lists.

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn for_params(params: &[Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }
}

/// One Adam update. `grads[i]` may be `None` when no gradient flowed to
/// parameter `i` this step; its moments still decay.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Option<Tensor<S>>],
    state: &mut AdamState<S>,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(hp.beta1);
    let b2 = S::from_f64(hp.beta2);
    let one = S::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr = S::from_f64(hp.lr);
    let eps = S::from_f64(hp.eps);

    for i in 0..params.len() {
        let zero_grad;
        let g: &Tensor<S> = match &grads[i] {
            Some(g) => {
                if g.shape() != params[i].shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        detail: format!("param {:?} vs grad {:?}", params[i].shape(), g.shape()),
                    });
                }
                g
            }
            None => {
                zero_grad = Tensor::zeros(params[i].shape().to_vec());
                &zero_grad
            }
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_and_decays_moments() {
        // From fresh state a zero gradient moves nothing.
        let mut params = vec![Tensor::<f64>::filled(vec![3], 1.5)];
        let mut state = AdamState::for_params(&params);
        let before = params[0].clone();
        adam_step(&mut params, &[None], &mut state, &AdamParams::default()).unwrap();
        assert_eq!(params[0].data(), before.data());
        // With history, a zero-gradient step decays both moments.
        state.m[0].data_mut()[0] = 0.8;
        state.v[0].data_mut()[0] = 0.4;
        adam_step(&mut params, &[None], &mut state, &AdamParams::default()).unwrap();
        assert!((state.m[0].data()[0] - 0.8 * 0.9).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.4 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn single_step_on_quadratic_descends() {
        // f(w) = w^2 from w = 1 with lr 0.1: the update must decrease w.
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut state = AdamState::for_params(&params);
        let grad = Tensor::scalar(2.0);
        let hp = AdamParams { lr: 0.1, ..AdamParams::default() };
        adam_step(&mut params, &[Some(grad)], &mut state, &hp).unwrap();
        assert!(params[0].data()[0] < 1.0);
    }

    #[test]
    fn two_hundred_steps_minimize_a_five_dim_quadratic() {
        // f(w) = sum_i a_i (w_i - b_i)^2, gradient 2 a (w - b); the minimum is
        // at b, so the gradient norm must fall below 1e-3.
        let a = [1.0, 0.5, 2.0, 0.25, 1.5];
        let b = [0.3, -0.7, 0.1, 0.9, -0.2];
        let mut params = vec![Tensor::<f64>::new(vec![5], vec![1.0, 1.0, -1.0, 0.0, 0.5]).unwrap()];
        let mut state = AdamState::for_params(&params);
        let hp = AdamParams { lr: 0.05, ..AdamParams::default() };
        let mut norm = f64::INFINITY;
        for _ in 0..200 {
            let grad: Vec<f64> = params[0]
                .data()
                .iter()
                .zip(a.iter().zip(b.iter()))
                .map(|(w, (ai, bi))| 2.0 * ai * (w - bi))
                .collect();
            norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let g = Tensor::new(vec![5], grad).unwrap();
            adam_step(&mut params, &[Some(g)], &mut state, &hp).unwrap();
        }
        assert!(norm < 1e-3, "final gradient norm {}", norm);
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut params = vec![Tensor::<f32>::new(vec![2], vec![0.5, -0.25]).unwrap()];
            let mut state = AdamState::for_params(&params);
            for s in 0..10 {
                let g = Tensor::new(vec![2], vec![0.1 * s as f32, -0.2]).unwrap();
                adam_step(&mut params, &[Some(g)], &mut state, &AdamParams::default()).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
