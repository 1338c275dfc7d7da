//! Shared helpers for integration tests.

use fed_augmix::error::Result;
use fed_augmix::rng;
use fed_augmix::tensor::{backward, finite_difference_grad, Graph, Tensor};
use rand::Rng as _;

/// Largest relative disagreement between reverse-mode and
/// central-difference gradients of a seeded random composite function
/// over a [2, n] input.
pub fn graph_gradient_gap(seed: u64, smooth_only: bool) -> f64 {
    let mut r = rng::substream(seed, "graph-check", 0, 0);
    let rows = 2usize;
    let n = r.gen_range(3..7usize);
    let m = r.gen_range(2..5usize);
    let x0 = Tensor::new(
        vec![rows, n],
        (0..rows * n).map(|_| r.gen_range(-1.5..1.5)).collect(),
    );
    let w = Tensor::new(
        vec![n, m],
        (0..n * m).map(|_| r.gen_range(-1.0..1.0)).collect(),
    );
    let c = Tensor::new(
        vec![rows, m],
        (0..rows * m).map(|_| r.gen_range(-1.0..1.0)).collect(),
    );
    let op_count = r.gen_range(2..6usize);
    let op_pool = if smooth_only { 7 } else { 8 };
    let codes: Vec<u32> = (0..op_count).map(|_| r.gen_range(0..op_pool)).collect();
    let scale = r.gen_range(0.3..1.2);

    let f = |x: &Tensor| -> Result<Tensor> {
        let mut t = x.matmul(&w)?;
        for &code in &codes {
            t = match code {
                0 => t.sigmoid(),
                // sigmoid first keeps exp inputs bounded
                1 => t.sigmoid().exp(),
                2 => t.softmax(),
                3 => t.log_softmax(),
                4 => t.add(&c)?,
                5 => t.mul(&c)?,
                6 => t.scalar_mul(scale),
                _ => t.relu(),
            };
        }
        Ok(t.mean())
    };

    let graph = Graph::new();
    let xv = graph.attach(&x0);
    let y = f(&xv).expect("forward pass");
    let grad = backward(&y, &[&xv], false)
        .expect("backward pass")
        .remove(0);
    let fd = finite_difference_grad(&f, &x0, 1e-5).expect("finite differences");
    grad.data()
        .iter()
        .zip(fd.data().iter())
        .map(|(&a, &b)| (a - b).abs() / (1e-6 + a.abs().max(b.abs())))
        .fold(0.0, f64::max)
}
