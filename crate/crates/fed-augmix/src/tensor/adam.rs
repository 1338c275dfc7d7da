//! Adam optimizer over detached tensors.

use super::Tensor;
use crate::error::{Error, Result};

/// First/second moment buffers plus the shared timestep.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DomainError {
            op: "adam_step",
            msg: format!(
                "params/grads/state length mismatch: {}/{}/{}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let g = g.data().to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let buf = p.data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            buf[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar_value(v)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![scalar(1.0)];
        let grads = vec![scalar(1.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, (0.9, 0.999), 1e-8).unwrap();
        // bias-corrected m_hat / sqrt(v_hat) = 1 on the first step
        assert!((params[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![scalar(3.5)];
        let grads = vec![scalar(0.0)];
        let mut state = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, 0.1, (0.9, 0.999), 1e-8).unwrap();
        }
        assert_eq!(params[0].data()[0], 3.5);
    }

    #[test]
    fn opposing_gradients_shrink_second_update() {
        // hand-evaluated Adam recurrences: g=1 then g=-1
        let mut params = vec![scalar(0.0)];
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &[scalar(1.0)],
            &mut state,
            0.1,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        let after_first = params[0].data()[0];
        adam_step(
            &mut params,
            &[scalar(-1.0)],
            &mut state,
            0.1,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        let second_update = (params[0].data()[0] - after_first).abs();
        assert!((after_first + 0.1).abs() < 1e-6);
        assert!(second_update < 0.1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, 0.1, (0.9, 0.999), 1e-8).is_err());
    }
}
