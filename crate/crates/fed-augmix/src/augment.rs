//! AugMix: stochastic operation chains with severity-controlled levels,
//! Dirichlet chain mixing, and a Beta-weighted skip connection back to
//! the original image.

use rand::Rng as _;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// H x W x C image with float64 pixels in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp_in_place(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Flatten into a rank-1 tensor (row-major pixel order).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.pixels.len()], self.pixels.clone())
    }

    pub fn from_flat(height: usize, width: usize, channels: usize, data: &[f64]) -> Self {
        Image::new(height, width, channels, data.to_vec())
    }

    /// Bilinear sample at fractional coordinates with zero padding.
    fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let sy = y0 + dy;
                let sx = x0 + dx;
                if sy >= 0.0 && sx >= 0.0 && (sy as usize) < self.height && (sx as usize) < self.width
                {
                    acc += wy * wx * self.get(sy as usize, sx as usize, c);
                }
            }
        }
        acc
    }

    /// Inverse-map an affine transform on centered coordinates:
    /// output(y, x) = input(inv(y, x)), zero padded.
    fn affine(&self, inv: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = inv(y as f64 - cy, x as f64 - cx);
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear(sy + cy, sx + cx, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Posterize,
    Solarize,
    Autocontrast,
    Equalize,
}

impl OpClass {
    /// Ops whose magnitude carries a random sign.
    pub fn signed(&self) -> bool {
        matches!(
            self,
            OpClass::Rotate
                | OpClass::ShearX
                | OpClass::ShearY
                | OpClass::TranslateX
                | OpClass::TranslateY
        )
    }

    pub fn takes_level(&self) -> bool {
        !matches!(self, OpClass::Autocontrast | OpClass::Equalize)
    }
}

/// One augmentation operation and its maximum magnitude.
/// Translate levels are fractions of the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub kind: OpClass,
    pub max_val: f64,
}

/// The fixed operation set: geometry and quantization only, so severity
/// stays meaningful on grayscale inputs.
pub fn default_ops() -> Vec<AugmentOp> {
    vec![
        AugmentOp { kind: OpClass::Rotate, max_val: 30.0 },
        AugmentOp { kind: OpClass::ShearX, max_val: 0.3 },
        AugmentOp { kind: OpClass::ShearY, max_val: 0.3 },
        AugmentOp { kind: OpClass::TranslateX, max_val: 1.0 / 3.0 },
        AugmentOp { kind: OpClass::TranslateY, max_val: 1.0 / 3.0 },
        AugmentOp { kind: OpClass::Posterize, max_val: 4.0 },
        AugmentOp { kind: OpClass::Solarize, max_val: 1.0 },
        AugmentOp { kind: OpClass::Autocontrast, max_val: 1.0 },
        AugmentOp { kind: OpClass::Equalize, max_val: 1.0 },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugMixConfig {
    pub n_chains: usize,
    pub severity: f64,
    pub mix_concentration: f64,
    pub max_chain_len: usize,
    pub rng_seed: u64,
    #[serde(default = "default_ops")]
    pub ops: Vec<AugmentOp>,
}

impl Default for AugMixConfig {
    fn default() -> Self {
        AugMixConfig {
            n_chains: 3,
            severity: 3.0,
            mix_concentration: 1.0,
            max_chain_len: 3,
            rng_seed: 0,
            ops: default_ops(),
        }
    }
}

impl AugMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 {
            return Err(Error::config("n_chains must be at least 1"));
        }
        if !(self.severity > 0.1 && self.severity <= 10.0) {
            return Err(Error::config("severity must lie in (0.1, 10]"));
        }
        if !(1..=3).contains(&self.max_chain_len) {
            return Err(Error::config("max_chain_len must be in 1..=3"));
        }
        if self.mix_concentration <= 0.0 {
            return Err(Error::config("mix_concentration must be positive"));
        }
        if self.ops.is_empty() {
            return Err(Error::config("operation set must be nonempty"));
        }
        Ok(())
    }
}

/// AugLevel = SampLevel/10 * MaxVal with SampLevel ~ U(0.1, s); signed
/// ops flip the sign with probability 1/2.
pub fn sample_aug_level(op: &AugmentOp, s: f64, rng: &mut Rng) -> Result<f64> {
    if s <= 0.1 {
        return Err(Error::config(format!("severity must exceed 0.1, got {s}")));
    }
    let samp_level = rng.gen_range(0.1..s);
    let mut level = samp_level / 10.0 * op.max_val;
    if op.kind.signed() && rng.gen_bool(0.5) {
        level = -level;
    }
    Ok(level)
}

/// Apply one operation at a given level. Geometric ops use bilinear
/// sampling with zero padding; the output is clamped to [0,1].
pub fn apply_op(img: &Image, op: &AugmentOp, level: f64) -> Image {
    let mut out = match op.kind {
        OpClass::Rotate => {
            let theta = level.to_radians();
            let (sin, cos) = theta.sin_cos();
            // inverse rotation of the destination coordinate
            img.affine(|y, x| (x * sin + y * cos, x * cos - y * sin))
        }
        OpClass::ShearX => img.affine(|y, x| (y, x - level * y)),
        OpClass::ShearY => img.affine(|y, x| (y - level * x, x)),
        OpClass::TranslateX => {
            let shift = level * img.width as f64;
            img.affine(move |y, x| (y, x - shift))
        }
        OpClass::TranslateY => {
            let shift = level * img.height as f64;
            img.affine(move |y, x| (y - shift, x))
        }
        OpClass::Posterize => {
            let bits = ((8.0 - level).ceil() as i32).clamp(1, 8) as u32;
            let mask = (0xffu32 >> (8 - bits)) << (8 - bits);
            let mut out = img.clone();
            for p in &mut out.pixels {
                let v = (*p * 255.0).round().clamp(0.0, 255.0) as u32;
                *p = (v & mask) as f64 / 255.0;
            }
            out
        }
        OpClass::Solarize => {
            let threshold = (1.0 - level / op.max_val).clamp(0.0, 1.0);
            let mut out = img.clone();
            for p in &mut out.pixels {
                if *p > threshold {
                    *p = 1.0 - *p;
                }
            }
            out
        }
        OpClass::Autocontrast => {
            let mut out = img.clone();
            for c in 0..img.channels {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in (c..img.pixels.len()).step_by(img.channels) {
                    lo = lo.min(img.pixels[i]);
                    hi = hi.max(img.pixels[i]);
                }
                if hi > lo {
                    let scale = 1.0 / (hi - lo);
                    for i in (c..out.pixels.len()).step_by(img.channels) {
                        out.pixels[i] = (out.pixels[i] - lo) * scale;
                    }
                }
            }
            out
        }
        OpClass::Equalize => {
            let mut out = img.clone();
            let bins = 256usize;
            let n = img.height * img.width;
            for c in 0..img.channels {
                let mut hist = vec![0usize; bins];
                for i in (c..img.pixels.len()).step_by(img.channels) {
                    let b = ((img.pixels[i] * 255.0).round() as usize).min(255);
                    hist[b] += 1;
                }
                let mut cdf = vec![0usize; bins];
                let mut acc = 0;
                for (b, &h) in hist.iter().enumerate() {
                    acc += h;
                    cdf[b] = acc;
                }
                let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
                if n > cdf_min {
                    for i in (c..out.pixels.len()).step_by(img.channels) {
                        let b = ((img.pixels[i] * 255.0).round() as usize).min(255);
                        out.pixels[i] = (cdf[b] - cdf_min) as f64 / (n - cdf_min) as f64;
                    }
                }
            }
            out
        }
    };
    out.clamp_in_place();
    out
}

/// One AugMix draw: Dirichlet-weighted mix of stochastic operation
/// chains, blended with the original via a Beta skip connection.
pub fn augmix(img: &Image, cfg: &AugMixConfig, rng: &mut Rng) -> Result<Image> {
    cfg.validate()?;
    let weights = dirichlet_weights(cfg.n_chains, cfg.mix_concentration, rng);
    let mut aug = Image::zeros(img.height, img.width, img.channels);
    for &b in &weights {
        let chain_len = rng.gen_range(1..=cfg.max_chain_len);
        let mut chained = img.clone();
        for _ in 0..chain_len {
            let op = cfg.ops[rng.gen_range(0..cfg.ops.len())];
            let level = if op.kind.takes_level() {
                sample_aug_level(&op, cfg.severity, rng)?
            } else {
                0.0
            };
            chained = apply_op(&chained, &op, level);
        }
        for (a, &p) in aug.pixels.iter_mut().zip(&chained.pixels) {
            *a += b * p;
        }
    }
    let beta = Beta::new(cfg.mix_concentration, cfg.mix_concentration)
        .map_err(|e| Error::config(format!("beta({0},{0}): {e}", cfg.mix_concentration)))?;
    let m = beta.sample(rng);
    let mut out = img.clone();
    for (o, (&orig, &a)) in out
        .pixels
        .iter_mut()
        .zip(img.pixels.iter().zip(&aug.pixels))
    {
        *o = m * orig + (1.0 - m) * a;
    }
    out.clamp_in_place();
    Ok(out)
}

/// Dirichlet(alpha, ..., alpha) draw; falls back to a degenerate weight
/// for a single chain.
pub fn dirichlet_weights(n: usize, alpha: f64, rng: &mut Rng) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let d = Dirichlet::new_with_size(alpha, n).expect("valid dirichlet");
    d.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ramp(side: usize) -> Image {
        let n = side * side;
        let pixels = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Image::new(side, side, 1, pixels)
    }

    #[test]
    fn aug_level_bounds() {
        let op = AugmentOp { kind: OpClass::Rotate, max_val: 30.0 };
        let mut rng = seeded(1);
        for _ in 0..1000 {
            let l = sample_aug_level(&op, 10.0, &mut rng).unwrap();
            assert!(l.abs() <= 30.0);
        }
        // s = 0.2 -> |level| within [0.3, 0.6] for max_val 30
        for _ in 0..1000 {
            let l = sample_aug_level(&op, 0.2, &mut rng).unwrap();
            assert!(l.abs() >= 0.3 - 1e-12 && l.abs() <= 0.6 + 1e-12);
        }
    }

    #[test]
    fn aug_level_direct_substitution() {
        // SampLevel 5, max_val 30 -> 15
        assert_eq!(5.0 / 10.0 * 30.0, 15.0);
    }

    #[test]
    fn severity_at_or_below_floor_is_config_error() {
        let op = AugmentOp { kind: OpClass::Rotate, max_val: 30.0 };
        assert!(sample_aug_level(&op, 0.1, &mut seeded(0)).is_err());
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp(5);
        let op = AugmentOp { kind: OpClass::Rotate, max_val: 30.0 };
        let out = apply_op(&img, &op, 0.0);
        for (a, b) in img.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn translate_full_width_zeroes_image() {
        let img = ramp(6);
        let op = AugmentOp { kind: OpClass::TranslateX, max_val: 1.0 / 3.0 };
        let out = apply_op(&img, &op, 1.0);
        assert!(out.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn posterize_one_bit_leaves_two_levels() {
        let img = ramp(8);
        let op = AugmentOp { kind: OpClass::Posterize, max_val: 4.0 };
        // level 7 -> ceil(8-7) = 1 bit
        let out = apply_op(&img, &op, 7.0);
        let mut distinct: Vec<u64> = out.pixels.iter().map(|p| p.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 2);
        assert!(out.pixels.iter().all(|&p| p == 0.0 || (p - 128.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn augmix_output_stays_in_unit_box() {
        let img = ramp(8);
        let cfg = AugMixConfig { severity: 10.0, ..AugMixConfig::default() };
        let mut rng = seeded(42);
        for _ in 0..1000 {
            let out = augmix(&img, &cfg, &mut rng).unwrap();
            assert!(out.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn augmix_is_deterministic_per_seed_and_varies_across_draws() {
        let img = ramp(8);
        let cfg = AugMixConfig::default();
        let a = augmix(&img, &cfg, &mut seeded(9)).unwrap();
        let b = augmix(&img, &cfg, &mut seeded(9)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let mut rng = seeded(9);
        let first = augmix(&img, &cfg, &mut rng).unwrap();
        let second = augmix(&img, &cfg, &mut rng).unwrap();
        assert_ne!(first.pixels, second.pixels);
    }

    #[test]
    fn dirichlet_weights_are_normalized() {
        let mut rng = seeded(3);
        for _ in 0..100 {
            let w = dirichlet_weights(3, 1.0, &mut rng);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_mean_is_half_at_alpha_one() {
        let beta = Beta::new(1.0, 1.0).unwrap();
        let mut rng = seeded(5);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| beta.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn identity_chains_recover_original() {
        // with rotate-only ops at level 0 the convex mixing collapses:
        // m*x + (1-m)*sum(b_i*x) = x
        let img = ramp(6);
        let mut rng = seeded(8);
        let weights = dirichlet_weights(3, 1.0, &mut rng);
        let mut aug = Image::zeros(6, 6, 1);
        for &b in &weights {
            for (a, &p) in aug.pixels.iter_mut().zip(&img.pixels) {
                *a += b * p;
            }
        }
        let m = 0.37;
        for (i, (&orig, &a)) in img.pixels.iter().zip(&aug.pixels).enumerate() {
            let mixed = m * orig + (1.0 - m) * a;
            assert!((mixed - img.pixels[i]).abs() < 1e-12);
        }
    }
}
