//! Gradient-leakage reconstruction: optimize dummy inputs so their
//! cross-entropy gradient matches a shared update, under a total
//! variation prior. The attacker models only the classification loss
//! and never simulates the AugMix defense.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::metrics;
use crate::models::{forward_on, ModelState};
use crate::rng::Rng;
use crate::tensor::{adam_step, backward, AdamState, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Cosine,
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub lr: f64,
    pub tv_coeff: f64,
    pub batch_size: usize,
    pub objective: Objective,
    pub labels_known: bool,
    /// Local epochs the victim ran before sharing the update.
    pub local_epochs_observed: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 2500,
            lr: 0.1,
            tv_coeff: 1e-6,
            batch_size: 4,
            objective: Objective::Cosine,
            labels_known: true,
            local_epochs_observed: 5,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("attack iterations must be at least 1"));
        }
        if self.lr < 0.0 || self.tv_coeff < 0.0 {
            return Err(Error::config("lr and tv_coeff must be non-negative"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("attack batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub reconstructed: Vec<Image>,
    pub final_objective: f64,
    pub trajectory: Vec<f64>,
    /// permutation[i] = index of the true image matched to
    /// reconstruction i (identity when no truth was supplied).
    pub permutation: Vec<usize>,
}

/// Attacker's gradient estimate from an observed weight update:
/// (w_before - w_after) / eta per parameter.
pub fn surrogate_gradient(
    w_before: &ModelState,
    w_after: &ModelState,
    eta: f64,
) -> Result<Vec<Tensor>> {
    if eta <= 0.0 {
        return Err(Error::config("eta must be positive"));
    }
    let before = w_before.params();
    let after = w_after.params();
    let mut out = Vec::with_capacity(before.len());
    for (b, a) in before.iter().zip(&after) {
        if b.shape() != a.shape() {
            return Err(Error::ShapeMismatch {
                op: "surrogate_gradient",
                lhs: b.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        let data: Vec<f64> = b
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| (x - y) / eta)
            .collect();
        out.push(Tensor::new(b.shape().to_vec(), data));
    }
    Ok(out)
}

/// |d| built from relu(d) + relu(-d), so the result stays differentiable.
fn abs_t(d: &Tensor) -> Tensor {
    d.relu().add(&d.scalar_mul(-1.0).relu()).expect("same shape")
}

/// Anisotropic total variation of a batch of flattened images
/// [B, H*W*C]: sum of absolute horizontal and vertical neighbor
/// differences per channel, over the whole batch.
pub fn total_variation_batch(batch: &Tensor, shape: ImageShape) -> Result<Tensor> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    if batch.shape().len() != 2 || batch.shape()[1] != shape.dim() {
        return Err(Error::RankError {
            op: "total_variation",
            expected: "batch [B, H*W*C]",
            actual: batch.shape().to_vec(),
        });
    }
    let b = batch.shape()[0];
    let mut total: Option<Tensor> = None;
    for ch in 0..c {
        // channel extraction: [B*H*W, C] @ e_ch -> [B*H, W]
        let x = if c == 1 {
            batch.reshape(vec![b * h, w])?
        } else {
            let mut e = vec![0.0; c];
            e[ch] = 1.0;
            batch
                .reshape(vec![b * h * w, c])?
                .matmul(&Tensor::new(vec![c, 1], e))?
                .reshape(vec![b * h, w])?
        };
        // horizontal diffs: X @ Dh, Dh[j,j] = -1, Dh[j+1,j] = 1
        if w > 1 {
            let mut dh = vec![0.0; w * (w - 1)];
            for j in 0..w - 1 {
                dh[j * (w - 1) + j] = -1.0;
                dh[(j + 1) * (w - 1) + j] = 1.0;
            }
            let hdiff = x.matmul(&Tensor::new(vec![w, w - 1], dh))?;
            let s = abs_t(&hdiff).sum();
            total = Some(match total {
                Some(acc) => acc.add(&s)?,
                None => s,
            });
        }
        // vertical diffs: block-diagonal difference operator per image
        if h > 1 {
            let rows = b * (h - 1);
            let cols = b * h;
            let mut dv = vec![0.0; rows * cols];
            for img in 0..b {
                for r in 0..h - 1 {
                    let row = img * (h - 1) + r;
                    dv[row * cols + img * h + r] = -1.0;
                    dv[row * cols + img * h + r + 1] = 1.0;
                }
            }
            let vdiff = Tensor::new(vec![rows, cols], dv).matmul(&x)?;
            let s = abs_t(&vdiff).sum();
            total = Some(match total {
                Some(acc) => acc.add(&s)?,
                None => s,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::scalar_value(0.0)),
    }
}

/// Total variation of a single image.
pub fn total_variation(img: &Image) -> Result<Tensor> {
    let shape = ImageShape {
        height: img.height,
        width: img.width,
        channels: img.channels,
    };
    let flat = Tensor::new(vec![1, shape.dim()], img.pixels.clone());
    total_variation_batch(&flat, shape)
}

/// Gradient-matching objective, differentiable with respect to the
/// dummy pixels via double backprop.
pub fn attack_objective(
    dummy: &Tensor,
    labels: &[usize],
    target_grad: &[Tensor],
    model: &ModelState,
    cfg: &AttackConfig,
    shape: ImageShape,
) -> Result<Tensor> {
    let graph = match &dummy.node {
        Some((g, _)) => g.clone(),
        None => return Err(Error::DetachedTensor),
    };
    let (p, params) = forward_on(model, &graph, dummy)?;
    let ce = cross_entropy(&p, labels)?;
    let param_refs: Vec<&Tensor> = params.iter().collect();
    let dummy_grad = backward(&ce, &param_refs, true)?;

    let mut dot: Option<Tensor> = None;
    let mut norm_sq: Option<Tensor> = None;
    let mut target_norm_sq = 0.0;
    for (g, t) in dummy_grad.iter().zip(target_grad) {
        if g.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "attack_objective",
                lhs: g.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let t_const = t.detach();
        let d = g.mul(&t_const)?.sum();
        let n = g.mul(g)?.sum();
        dot = Some(match dot {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
        norm_sq = Some(match norm_sq {
            Some(acc) => acc.add(&n)?,
            None => n,
        });
        target_norm_sq += t.data().iter().map(|v| v * v).sum::<f64>();
    }
    let dot = dot.expect("nonempty parameter list");
    let norm_sq = norm_sq.expect("nonempty parameter list");

    let use_l2 = cfg.objective == Objective::L2
        || target_norm_sq == 0.0
        || norm_sq.item()? == 0.0;
    if cfg.objective == Objective::Cosine && use_l2 {
        eprintln!("warning: zero-norm gradient, cosine undefined; falling back to l2");
    }

    let mut obj = if use_l2 {
        // ||g' - g||^2 = ||g'||^2 - 2<g',g> + ||g||^2
        norm_sq
            .add(&dot.scalar_mul(-2.0))?
            .add(&Tensor::scalar_value(target_norm_sq))?
    } else {
        let cos = dot
            .mul(&norm_sq.sqrt()?.recip()?)?
            .scalar_mul(1.0 / target_norm_sq.sqrt());
        Tensor::scalar_value(1.0).sub(&cos)?
    };

    if cfg.tv_coeff > 0.0 {
        let tv = total_variation_batch(dummy, shape)?;
        obj = obj.add(&tv.scalar_mul(cfg.tv_coeff))?;
    }
    Ok(obj)
}

/// Minimal-MSE bijective assignment of reconstructions to true images
/// (brute force over batch permutations; batches are small).
pub fn match_images(reconstructed: &[Image], truth: &[Image]) -> Result<Vec<usize>> {
    assert_eq!(reconstructed.len(), truth.len());
    let n = reconstructed.len();
    let mut cost = vec![vec![0.0; n]; n];
    for (i, r) in reconstructed.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            cost[i][j] = metrics::mse(r, t)?;
        }
    }
    let mut best: Vec<usize> = (0..n).collect();
    let mut best_cost = f64::INFINITY;
    let mut perm: Vec<usize> = (0..n).collect();
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if c < best_cost {
            best_cost = c;
            best = p.to_vec();
        }
    });
    Ok(best)
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Run the inversion: Adam on uniformly initialized dummy pixels,
/// clamped to [0,1] after every step.
pub fn run_inversion(
    target_grad: &[Tensor],
    labels: &[usize],
    model: &ModelState,
    cfg: &AttackConfig,
    shape: ImageShape,
    truth: Option<&[Image]>,
    rng: &mut Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let dim = shape.dim();
    if labels.len() != b {
        return Err(Error::config(format!(
            "label count {} does not match batch size {b}",
            labels.len()
        )));
    }
    let init: Vec<f64> = (0..b * dim).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut dummy = Tensor::new(vec![b, dim], init);
    let mut adam = AdamState::new(std::slice::from_ref(&dummy));
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let graph = Graph::new();
        let var = graph.attach(&dummy);
        let obj = attack_objective(&var, labels, target_grad, model, cfg, shape)?;
        let value = obj.item()?;
        if !value.is_finite() {
            return Err(Error::DomainError {
                op: "run_inversion",
                msg: format!("objective diverged to {value}"),
            });
        }
        trajectory.push(value);
        let grads = backward(&obj, &[&var], false)?;
        let mut slot = [dummy];
        adam_step(&mut slot, &grads, &mut adam, cfg.lr, (0.9, 0.999), 1e-8)?;
        [dummy] = slot;
        for p in dummy.data_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }
    let reconstructed: Vec<Image> = (0..b)
        .map(|i| {
            Image::from_flat(
                shape.height,
                shape.width,
                shape.channels,
                &dummy.data()[i * dim..(i + 1) * dim],
            )
        })
        .collect();
    let permutation = match truth {
        Some(t) => match_images(&reconstructed, t)?,
        None => (0..b).collect(),
    };
    Ok(AttackResult {
        final_objective: *trajectory.last().unwrap(),
        reconstructed,
        trajectory,
        permutation,
    })
}
