//! Training augmentation and evaluation preprocessing.
//!
//! Train mode: random resized crop (area 0.8 to 1), independent horizontal
//! and vertical flips, rotation within ±15°, brightness and contrast jitter
//! of ±0.3, clamp, normalise. Eval mode: resize and normalise.

use super::splits::NormStats;
use super::synth::{CHANNELS, IMAGE_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub crop_area: f64,
    /// Crop centre offset in pixels.
    pub shift: (f64, f64),
    pub flip_h: bool,
    pub flip_v: bool,
    /// Radians.
    pub rotation: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            crop_area: 1.0,
            shift: (0.0, 0.0),
            flip_h: false,
            flip_v: false,
            rotation: 0.0,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let crop_area = rng.random_range(0.8..=1.0);
        let slack = (1.0 - f64::sqrt(crop_area)) * IMAGE_SIZE as f64 / 2.0;
        AugmentParams {
            crop_area,
            shift: (rng.random_range(-slack..=slack), rng.random_range(-slack..=slack)),
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            rotation: rng.random_range(-15.0f64..=15.0).to_radians(),
            brightness: rng.random_range(0.7..=1.3),
            contrast: rng.random_range(0.7..=1.3),
        }
    }
}

fn bilinear(plane: &[f32], size: usize, x: f64, y: f64) -> f64 {
    let m = (size - 1) as f64;
    let (x, y) = (x.clamp(0.0, m), y.clamp(0.0, m));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |yy: usize, xx: usize| plane[yy * size + xx] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of a channel-major `[3, from, from]` image.
pub fn resize(image: &[f32], from: usize, to: usize) -> Vec<f32> {
    if from == to {
        return image.to_vec();
    }
    let scale = from as f64 / to as f64;
    let mut out = vec![0.0f32; CHANNELS * to * to];
    for c in 0..CHANNELS {
        let plane = &image[c * from * from..(c + 1) * from * from];
        for y in 0..to {
            for x in 0..to {
                let sx = (x as f64 + 0.5) * scale - 0.5;
                let sy = (y as f64 + 0.5) * scale - 0.5;
                out[c * to * to + y * to + x] = bilinear(plane, from, sx, sy) as f32;
            }
        }
    }
    out
}

/// Geometric and photometric transform, clamped to `[0, 1]`.
pub fn apply(image: &[f32], p: &AugmentParams) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let centre = (n as f64 - 1.0) / 2.0;
    let k = p.crop_area.sqrt();
    let (sin, cos) = p.rotation.sin_cos();
    let mut out = vec![0.0f32; CHANNELS * n * n];
    for c in 0..CHANNELS {
        let plane = &image[c * n * n..(c + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                let mut u = x as f64 - centre;
                let mut v = y as f64 - centre;
                if p.flip_h {
                    u = -u;
                }
                if p.flip_v {
                    v = -v;
                }
                let sx = centre + p.shift.0 + k * (cos * u - sin * v);
                let sy = centre + p.shift.1 + k * (sin * u + cos * v);
                out[c * n * n + y * n + x] = bilinear(plane, n, sx, sy) as f32;
            }
        }
    }
    let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
    for v in out.iter_mut() {
        let x = *v as f64 * p.brightness;
        *v = ((x - mean * p.brightness) * p.contrast + mean * p.brightness).clamp(0.0, 1.0) as f32;
    }
    out
}

pub fn normalize(image: &[f32], norm: &NormStats) -> Vec<f32> {
    let hw = image.len() / CHANNELS;
    image
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / hw;
            ((v as f64 - norm.mean[c]) / norm.std[c]) as f32
        })
        .collect()
}

/// Train mode when `seed` is given, eval mode otherwise.
pub fn augment(image: &[f32], norm: &NormStats, seed: Option<u64>) -> Vec<f32> {
    match seed {
        Some(s) => {
            let p = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(s));
            normalize(&apply(image, &p), norm)
        }
        None => normalize(&resize(image, IMAGE_SIZE, IMAGE_SIZE), norm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_sample;

    fn stats() -> NormStats {
        NormStats {
            mean: [0.4, 0.35, 0.25],
            std: [0.2, 0.18, 0.12],
        }
    }

    #[test]
    fn eval_mode_is_normalize_of_resize() {
        let img = generate_sample(2, 5).image;
        let a = augment(&img, &stats(), None);
        assert_eq!(a, augment(&img, &stats(), None));
        assert_eq!(a, normalize(&resize(&img, IMAGE_SIZE, IMAGE_SIZE), &stats()));
    }

    #[test]
    fn identity_params_leave_image_unchanged() {
        let img = generate_sample(7, 5).image;
        let out = apply(&img, &AugmentParams::identity());
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn jitter_output_is_clamped() {
        let img = generate_sample(13, 1).image;
        let mut p = AugmentParams::identity();
        p.brightness = 1.3;
        p.contrast = 1.3;
        let out = apply(&img, &p);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        for seed in 0..20 {
            let p = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
            assert!(apply(&img, &p).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn different_seeds_give_different_images() {
        let img = generate_sample(0, 9).image;
        let differ = (0..100).filter(|&t| augment(&img, &stats(), Some(2 * t)) != augment(&img, &stats(), Some(2 * t + 1))).count();
        assert!(differ >= 99);
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let img = generate_sample(4, 3).image;
        let mut p = AugmentParams::identity();
        p.flip_h = true;
        let out = apply(&img, &p);
        let n = IMAGE_SIZE;
        for y in [0, 17, 63] {
            for x in [0, 5, 40] {
                assert!((out[y * n + x] - img[y * n + n - 1 - x]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = vec![0.3f32; CHANNELS * 16 * 16];
        let out = resize(&img, 16, 64);
        assert_eq!(out.len(), CHANNELS * 64 * 64);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }
}
