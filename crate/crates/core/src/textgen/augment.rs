use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, TextStrip, TextgenError};
use crate::seed;

/// Stochastic augmentation: a random non-empty subset of the enabled ops,
/// applied in random order.
///
/// Bounds: contrast factors in `[0, 2]`, blur sigma in `[0, 5]`, crop
/// fractions per side in `[0, 0.45]`, noise std in `[0, 1]`, probabilities
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub contrast_range: (f32, f32),
    pub blur_sigma_range: (f32, f32),
    /// Per-side fraction cut from the top and bottom before resizing back.
    pub crop_fraction_range: (f32, f32),
    /// Per-side fraction cut from the left and right before resizing back.
    pub hcrop_fraction_range: (f32, f32),
    pub noise_std: f32,
    /// Probability that each op (contrast, blur, crop, noise) is eligible.
    pub op_probability: [f32; 4],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            contrast_range: (0.5, 1.0),
            blur_sigma_range: (0.5, 1.5),
            crop_fraction_range: (0.0, 0.2),
            hcrop_fraction_range: (0.0, 0.02),
            noise_std: 0.05,
            op_probability: [1.0; 4],
        }
    }
}

impl AugmentConfig {
    /// Every op disabled.
    pub fn identity() -> Self {
        Self {
            op_probability: [0.0; 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f32, f32), max: f32| {
            if lo.is_nan() || hi.is_nan() || lo < 0.0 || lo > hi || hi > max {
                Err(TextgenError::Config(format!("{name} range ({lo}, {hi}) outside [0, {max}]")))
            } else {
                Ok(())
            }
        };
        range("contrast", self.contrast_range, 2.0)?;
        range("blur sigma", self.blur_sigma_range, 5.0)?;
        range("crop fraction", self.crop_fraction_range, 0.45)?;
        range("horizontal crop fraction", self.hcrop_fraction_range, 0.45)?;
        range("noise std", (0.0, self.noise_std), 1.0)?;
        for p in self.op_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(TextgenError::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum AugOp {
    Contrast,
    Blur,
    Crop,
    Noise,
}

fn sample(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn gaussian_blur(px: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma < 1e-3 {
        return px.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &k) in kernel.iter().enumerate() {
                    let d = j as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += k * src[sy as usize * w + sx as usize];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(px, true), false)
}

/// Bilinear resample of the box `[top, h−bottom) × [left, w−right)` back to
/// `h × w`. Zero fractions reproduce the input exactly.
fn crop_resize(px: &[f32], h: usize, w: usize, sides: [f32; 4]) -> Vec<f32> {
    let [top, bottom, left, right] = sides;
    let (top, bottom) = (top * h as f32, bottom * h as f32);
    let (left, right) = (left * w as f32, right * w as f32);
    let sy = (h as f32 - top - bottom) / h as f32;
    let sx = (w as f32 - left - right) / w as f32;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = (top + (y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = (left + (x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let a = px[y0 * w + x0] * (1.0 - tx) + px[y0 * w + x1] * tx;
            let b = px[y1 * w + x0] * (1.0 - tx) + px[y1 * w + x1] * tx;
            out[y * w + x] = if ty == 0.0 { a } else { a * (1.0 - ty) + b * ty };
        }
    }
    out
}

/// Augmented copy of `pixels` (`h × w`), clamped to `[0, 1]`.
pub fn augment_pixels(pixels: &[f32], h: usize, w: usize, cfg: &AugmentConfig, seed: u64) -> Vec<f32> {
    let mut rng = seed::rng(seed);
    let all = [AugOp::Contrast, AugOp::Blur, AugOp::Crop, AugOp::Noise];
    let mut eligible: Vec<AugOp> = all
        .iter()
        .zip(cfg.op_probability)
        .filter(|&(_, p)| p > 0.0 && rng.random::<f32>() < p)
        .map(|(&op, _)| op)
        .collect();
    let mut px = pixels.to_vec();
    if eligible.is_empty() {
        return px;
    }
    eligible.shuffle(&mut rng);
    let count = rng.random_range(1..=eligible.len());

    for op in &eligible[..count] {
        match op {
            AugOp::Contrast => {
                let f = sample(&mut rng, cfg.contrast_range);
                px.iter_mut().for_each(|v| *v = 0.5 + f * (*v - 0.5));
            }
            AugOp::Blur => {
                let sigma = sample(&mut rng, cfg.blur_sigma_range);
                px = gaussian_blur(&px, h, w, sigma);
            }
            AugOp::Crop => {
                let sides = [
                    sample(&mut rng, cfg.crop_fraction_range),
                    sample(&mut rng, cfg.crop_fraction_range),
                    sample(&mut rng, cfg.hcrop_fraction_range),
                    sample(&mut rng, cfg.hcrop_fraction_range),
                ];
                px = crop_resize(&px, h, w, sides);
            }
            AugOp::Noise => {
                let std = sample(&mut rng, (0.0, cfg.noise_std));
                if std > 0.0 {
                    let normal = Normal::new(0.0f32, std).expect("finite std");
                    px.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    px
}

/// Augments a strip's pixels; the output keeps the strip's `H × W` shape.
pub fn augment(strip: &TextStrip, cfg: &AugmentConfig, seed: u64) -> Vec<f32> {
    augment_pixels(&strip.pixels, strip.height, strip.width, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textgen::{render, RenderConfig};
    use proptest::prelude::*;

    fn strip() -> TextStrip {
        render("ABJ", &RenderConfig::default(), 3).unwrap()
    }

    #[test]
    fn all_disabled_is_identity() {
        let s = strip();
        assert_eq!(augment(&s, &AugmentConfig::identity(), 1), s.pixels);
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let s = strip();
        let cfg = AugmentConfig {
            contrast_range: (1.0, 1.0),
            blur_sigma_range: (1e-4, 1e-4),
            crop_fraction_range: (0.0, 0.0),
            hcrop_fraction_range: (0.0, 0.0),
            noise_std: 0.0,
            op_probability: [1.0; 4],
        };
        for seed in 0..20 {
            let out = augment(&s, &cfg, seed);
            for (a, b) in out.iter().zip(&s.pixels) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn seeded_determinism_and_variation() {
        let s = strip();
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&s, &cfg, 8), augment(&s, &cfg, 8));
        assert_ne!(augment(&s, &cfg, 8), augment(&s, &cfg, 9));
    }

    #[test]
    fn config_bounds_are_checked() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            crop_fraction_range: (0.3, 0.1),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            op_probability: [1.5, 0.0, 0.0, 0.0],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(seed in any::<u64>(), word_seed in 0u64..50) {
            let s = render("HIJAB", &RenderConfig::default(), word_seed).unwrap();
            let cfg = AugmentConfig { noise_std: 0.5, contrast_range: (0.0, 2.0), ..AugmentConfig::default() };
            let out = augment(&s, &cfg, seed);
            prop_assert_eq!(out.len(), s.pixels.len());
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
