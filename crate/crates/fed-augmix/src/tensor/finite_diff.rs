//! Central finite differences, the independent oracle used against the
//! backward pass throughout the test suites.

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued `f` at `x`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(step > 0.0, "step must be positive");
    let base = x.detach();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        let fp = eval_scalar(&f, &plus)?;
        let fm = eval_scalar(&f, &minus)?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(Tensor::new(x.shape().to_vec(), grad))
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let out = f(x)?;
    if out.len() != 1 {
        return Err(Error::RankError {
            op: "finite_difference_grad",
            expected: "scalar function output",
            actual: out.shape().to_vec(),
        });
    }
    out.item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_square() {
        let x = Tensor::scalar_value(3.0);
        let g = finite_difference_grad(
            |t| {
                let graph = crate::tensor::Graph::new();
                let v = graph.attach(t);
                v.mul(&v)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_of_relu_sum_away_from_kink() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]);
        let g = finite_difference_grad(
            |t| {
                let graph = crate::tensor::Graph::new();
                Ok(graph.attach(t).relu().sum())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 0.0).abs() < 1e-8);
        assert!((g.data()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_scalar_output_is_rank_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let r = finite_difference_grad(|t| Ok(t.clone()), &x, 1e-4);
        assert!(r.is_err());
    }
}
