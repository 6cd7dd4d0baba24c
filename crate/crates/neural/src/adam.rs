use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64, params: &[Tensor<T>]) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        })
    }
}

/// One Adam update of `params` from `grads` (same order and lengths).
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "adam got {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(NnError::Shape(format!(
                "parameter of {} values got gradient of {} and moments of {}",
                p.len(),
                g.len(),
                m.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (one_b1, one_b2) = (
        T::from_f64(1.0 - state.beta1),
        T::from_f64(1.0 - state.beta2),
    );
    let step_size = T::from_f64(state.lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((w, &g), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(&grads[i])
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor<f64>> {
        vec![
            Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(),
            Tensor::new(&[1], vec![0.25]).unwrap(),
        ]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(1e-3, &p).unwrap();
        for _ in 0..10 {
            adam_step(&mut p, &[vec![0.0; 3], vec![0.0]], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(0.0, &p).unwrap();
        adam_step(&mut p, &[vec![1.0, -2.0, 3.0], vec![4.0]], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        // With a constant gradient the bias-corrected moments are exact
        // (m_hat = g, v_hat = g^2), so every step is lr * g / (|g| + eps).
        let lr = 1e-2;
        let mut p = vec![Tensor::new(&[2], vec![0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(lr, &p).unwrap();
        let g = vec![vec![0.3, -7.0]];
        let mut last = p[0].data().to_vec();
        for step in 0..200 {
            adam_step(&mut p, &g, &mut st).unwrap();
            let now = p[0].data().to_vec();
            if step >= 100 {
                assert!(((last[0] - now[0]) - lr).abs() < 1e-6 * lr + 1e-9);
                assert!(((now[1] - last[1]) - lr).abs() < 1e-6 * lr + 1e-9);
            }
            last = now;
        }
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = params();
        let mut st = AdamState::new(1e-3, &p).unwrap();
        assert!(adam_step(&mut p, &[vec![0.0; 2], vec![0.0]], &mut st).is_err());
        assert!(AdamState::<f64>::new(-1.0, &p).is_err());
    }
}
