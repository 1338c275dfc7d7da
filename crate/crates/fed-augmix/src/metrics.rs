//! Reconstruction-quality metrics and classification accuracy.

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::data_io::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{forward, ModelState};
use crate::tensor::Tensor;

/// SSIM constants for dynamic range 1.
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImagePairScore {
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

pub fn score_pair(a: &Image, b: &Image) -> Result<ImagePairScore> {
    Ok(ImagePairScore {
        mse: mse(a, b)?,
        ssim: ssim(a, b)?,
        psnr: psnr(a, b, 1.0)?,
    })
}

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.height, a.width, a.channels],
            rhs: vec![b.height, b.width, b.channels],
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("mse", a, b)?;
    let n = a.pixels.len() as f64;
    Ok(a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// 10*log10(max_val^2 / mse); +infinity for identical images.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / err).log10())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over window positions and channels. Images smaller than the window
/// fall back to one global unweighted window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Ok(global_ssim(a, b));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for wy in 0..=(a.height - SSIM_WINDOW) {
            for wx in 0..=(a.width - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let w = k[dy] * k[dx];
                        let x = a.get(wy + dy, wx + dx, c);
                        let y = b.get(wy + dy, wx + dx, c);
                        mx += w * x;
                        my += w * y;
                        sxx += w * x * x;
                        syy += w * y * y;
                        sxy += w * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ssim_value(mx, my, vx, vy, cov);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn global_ssim(a: &Image, b: &Image) -> f64 {
    let mut total = 0.0;
    for c in 0..a.channels {
        let n = (a.height * a.width) as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for y in 0..a.height {
            for x in 0..a.width {
                let p = a.get(y, x, c);
                let q = b.get(y, x, c);
                mx += p;
                my += q;
                sxx += p * p;
                syy += q * q;
                sxy += p * q;
            }
        }
        mx /= n;
        my /= n;
        let vx = sxx / n - mx * mx;
        let vy = syy / n - my * my;
        let cov = sxy / n - mx * my;
        total += ssim_value(mx, my, vx, vy, cov);
    }
    total / a.channels as f64
}

fn ssim_value(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// Fraction of argmax-correct predictions; ties break to the lowest
/// class index.
pub fn accuracy(model: &ModelState, images: &[Image], labels: &[usize]) -> Result<f64> {
    assert!(!images.is_empty(), "accuracy over an empty test set");
    let dim = model.spec.input_dim();
    let classes = model.spec.class_count();
    let mut correct = 0usize;
    let chunk = 256;
    for (imgs, lbls) in images.chunks(chunk).zip(labels.chunks(chunk)) {
        let mut data = Vec::with_capacity(imgs.len() * dim);
        for img in imgs {
            data.extend_from_slice(&img.pixels);
        }
        let batch = Tensor::new(vec![imgs.len(), dim], data);
        let p = forward(model, &batch)?;
        for (i, &label) in lbls.iter().enumerate() {
            let row = &p.data()[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

pub fn accuracy_on(model: &ModelState, test: &LabeledDataset) -> Result<f64> {
    accuracy(model, &test.images, &test.labels)
}

/// One row of attack scoring, keyed by training stage and protection
/// level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub stage: String,
    pub protection: String,
    pub score: ImagePairScore,
}

/// Per-cell means over stage x protection, as CSV with columns
/// stage,protection,mse,ssim,psnr,n.
pub fn defense_report(scores: &[ScoreRecord]) -> String {
    let mut cells: Vec<(String, String, Vec<&ImagePairScore>)> = Vec::new();
    for rec in scores {
        match cells
            .iter_mut()
            .find(|(s, p, _)| *s == rec.stage && *p == rec.protection)
        {
            Some((_, _, v)) => v.push(&rec.score),
            None => cells.push((rec.stage.clone(), rec.protection.clone(), vec![&rec.score])),
        }
    }
    let mut out = String::from("stage,protection,mse,ssim,psnr,n\n");
    for (stage, protection, v) in cells {
        let n = v.len() as f64;
        let mse = v.iter().map(|s| s.mse).sum::<f64>() / n;
        let ssim = v.iter().map(|s| s.ssim).sum::<f64>() / n;
        let psnr = v.iter().map(|s| s.psnr).sum::<f64>() / n;
        out.push_str(&format!(
            "{stage},{protection},{mse:.6},{ssim:.6},{},{}\n",
            format_psnr(psnr),
            v.len()
        ));
    }
    out
}

pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, Activation, ModelSpec};
    use rand::Rng as _;

    fn constant(side: usize, v: f64) -> Image {
        Image::new(side, side, 1, vec![v; side * side])
    }

    #[test]
    fn mse_basics() {
        let a = constant(4, 0.0);
        let b = constant(4, 1.0);
        let h = constant(4, 0.5);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mse(&a, &h).unwrap(), 0.25);
    }

    #[test]
    fn psnr_basics() {
        let a = constant(4, 0.0);
        let b = constant(4, 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        // mse 0.01 -> 20 dB
        let mut c = constant(4, 0.0);
        c.pixels.iter_mut().for_each(|p| *p = 0.1);
        assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constant_case() {
        let a = constant(16, 0.3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // constant 0 vs constant 1 -> C1/(1+C1)
        let zero = constant(16, 0.0);
        let one = constant(16, 1.0);
        let expected = C1 / (1.0 + C1);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn ssim_symmetry_and_bounds_over_random_pairs() {
        let mut rng = crate::rng::seeded(21);
        for _ in 0..50 {
            let a = Image::new(12, 12, 1, (0..144).map(|_| rng.gen_range(0.0..1.0)).collect());
            let b = Image::new(12, 12, 1, (0..144).map(|_| rng.gen_range(0.0..1.0)).collect());
            let s1 = ssim(&a, &b).unwrap();
            let s2 = ssim(&b, &a).unwrap();
            assert!((s1 - s2).abs() < 1e-12);
            assert!(s1.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn small_image_falls_back_to_global_window() {
        let a = constant(4, 0.2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_zero_model_predicts_class_zero() {
        let spec = ModelSpec {
            layer_sizes: vec![4, 3],
            activation: Activation::Relu,
            init_seed: 0,
        };
        let mut model = init_model(&spec).unwrap();
        model.weights[0] = Tensor::zeros(vec![4, 3]);
        let images: Vec<Image> = (0..6).map(|i| constant(2, i as f64 / 6.0)).collect();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let acc = accuracy(&model, &images, &labels).unwrap();
        assert!((acc - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn defense_report_groups_cells() {
        let score = ImagePairScore {
            mse: 0.5,
            ssim: 0.25,
            psnr: 3.0,
        };
        let recs = vec![
            ScoreRecord {
                stage: "untrained".into(),
                protection: "none".into(),
                score,
            },
            ScoreRecord {
                stage: "untrained".into(),
                protection: "s=10".into(),
                score,
            },
        ];
        let csv = defense_report(&recs);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("untrained,none,0.5"));
    }
}
