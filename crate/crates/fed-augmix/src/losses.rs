//! Classification loss, three-way Jensen-Shannon consistency divergence,
//! the combined objective, and the loss-scaling schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_base: f64,
    pub scale: f64,
    pub large_val: f64,
    pub scaling_enabled: bool,
    /// When true, a triggered lambda never returns to `lambda_base`.
    pub sticky: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_base: 50.0,
            scale: 5e4,
            large_val: 5e3,
            scaling_enabled: true,
            sticky: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_base <= 0.0 || self.scale <= 0.0 || self.large_val <= 0.0 {
            return Err(Error::config(
                "lambda_base, scale and large_val must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LambdaState {
    pub current_lambda: f64,
    pub triggered: bool,
}

impl LambdaState {
    pub fn new(cfg: &LossConfig) -> Self {
        LambdaState {
            current_lambda: cfg.lambda_base,
            triggered: false,
        }
    }
}

/// Mean over the batch of -log p[y], with probabilities floored at
/// [`PROB_FLOOR`] before the log.
pub fn cross_entropy(p: &Tensor, y: &[usize]) -> Result<Tensor> {
    if p.shape().len() != 2 || p.shape()[0] != y.len() {
        return Err(Error::RankError {
            op: "cross_entropy",
            expected: "probability rows [B, C] aligned with labels",
            actual: p.shape().to_vec(),
        });
    }
    let (b, c) = (p.shape()[0], p.shape()[1]);
    if let Some(&bad) = y.iter().find(|&&label| label >= c) {
        return Err(Error::DomainError {
            op: "cross_entropy",
            msg: format!("label {bad} out of range for {c} classes"),
        });
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &label) in y.iter().enumerate() {
        onehot[i * c + label] = 1.0;
    }
    let onehot = Tensor::new(vec![b, c], onehot);
    let logp = p.clamp(PROB_FLOOR, 1.0).log()?;
    Ok(onehot.mul(&logp)?.sum().scalar_mul(-1.0 / b as f64))
}

/// KL divergence between two plain distributions, with the 0 log 0 = 0
/// convention and a floored denominator.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(PROB_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// Three-way generalized JS divergence of probability rows; shape [B, C]
/// (or a single rank-1 distribution), returning the batch mean as a
/// graph-attached scalar when the inputs are attached.
pub fn js_div3(p1: &Tensor, p2: &Tensor, p3: &Tensor) -> Result<Tensor> {
    if p1.shape() != p2.shape() || p1.shape() != p3.shape() {
        return Err(Error::ShapeMismatch {
            op: "js_div3",
            lhs: p1.shape().to_vec(),
            rhs: if p1.shape() != p2.shape() {
                p2.shape().to_vec()
            } else {
                p3.shape().to_vec()
            },
        });
    }
    let q = p1.add(p2)?.add(p3)?.scalar_mul(1.0 / 3.0);
    let log_q = q.clamp(PROB_FLOOR, 1.0).log()?;
    let mut kl_sum: Option<Tensor> = None;
    for p in [p1, p2, p3] {
        // p * (log p - log q); entries with p = 0 contribute exactly 0
        // because log is taken on the floored value and then masked by p.
        let log_p = p.clamp(PROB_FLOOR, 1.0).log()?;
        let term = p.mul(&log_p.sub(&log_q)?)?.sum_last_keep();
        kl_sum = Some(match kl_sum {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    // mean over rows of the averaged KL terms
    Ok(kl_sum.unwrap().scalar_mul(1.0 / 3.0).mean())
}

/// Combined objective: cross-entropy plus lambda times the batch-mean
/// three-way JS divergence.
pub fn combined_loss(
    p_orig: &Tensor,
    p_aug1: &Tensor,
    p_aug2: &Tensor,
    y: &[usize],
    lambda: f64,
) -> Result<Tensor> {
    let ce = cross_entropy(p_orig, y)?;
    let js = js_div3(p_orig, p_aug1, p_aug2)?;
    ce.add(&js.scalar_mul(lambda))
}

/// Loss-scaling schedule: raise lambda to `large_val` whenever the
/// classification loss exceeds `scale` times the JS divergence.
pub fn update_lambda(state: LambdaState, cfg: &LossConfig, l_c: f64, d_js: f64) -> LambdaState {
    if !cfg.scaling_enabled {
        return LambdaState {
            current_lambda: cfg.lambda_base,
            triggered: false,
        };
    }
    if l_c > cfg.scale * d_js {
        LambdaState {
            current_lambda: cfg.large_val,
            triggered: true,
        }
    } else if cfg.sticky {
        state
    } else {
        LambdaState {
            current_lambda: cfg.lambda_base,
            triggered: state.triggered,
        }
    }
}
