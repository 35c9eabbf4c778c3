//! Procedural rope renderer.
//!
//! A rope is a field of diagonal sinusoidal strands; damage is painted over
//! a rectangular region on the patch grid. Every random quantity is drawn
//! from the sample seed before rendering, so `render` is a pure function of
//! its arguments.

use crate::taxonomy::{DamageLabel, DamageType, Severity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const PATCH: usize = 8;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeSpec {
    /// Strands crossing the image, 3..=6.
    pub strand_count: usize,
    /// Lay slope, 0.6..1.4.
    pub twist_frequency: f64,
    /// Fibre colour, each channel in 0.25..0.8.
    pub base_color: [f64; 3],
    /// Per-pixel Gaussian noise std, 0..0.04.
    pub noise_level: f64,
}

impl RopeSpec {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let r = rng.random_range(0.55..0.8);
        RopeSpec {
            strand_count: rng.random_range(3..=6),
            twist_frequency: rng.random_range(0.6..1.4),
            base_color: [r, r * rng.random_range(0.75..0.9), r * rng.random_range(0.47..0.65)],
            noise_level: rng.random_range(0.0..0.04),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(3..=6).contains(&self.strand_count) {
            return Err(format!("strand_count {} outside 3..=6", self.strand_count));
        }
        if !(0.6..=1.4).contains(&self.twist_frequency) {
            return Err(format!("twist_frequency {} outside 0.6..1.4", self.twist_frequency));
        }
        if self.base_color.iter().any(|c| !(0.25..=0.8).contains(c)) {
            return Err(format!("base_color {:?} outside 0.25..0.8", self.base_color));
        }
        if !(0.0..=0.04).contains(&self.noise_level) {
            return Err(format!("noise_level {} outside 0..0.04", self.noise_level));
        }
        Ok(())
    }

    /// Strand shading at a continuous position.
    fn shade(&self, x: f64, y: f64) -> f64 {
        let n = IMAGE_SIZE as f64;
        let phase = 2.0 * PI * self.strand_count as f64 * (x / n + self.twist_frequency * y / n);
        let stripe = 0.5 + 0.5 * phase.sin();
        // Sharpen the grooves between strands.
        let groove = stripe.powf(0.6);
        let fibre = 0.04 * (2.0 * PI * (0.9 * x - 0.7 * y) / 3.0).sin();
        0.45 + 0.5 * groove + fibre
    }
}

/// Bounding box on the patch grid, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn pixels(&self) -> (usize, usize, usize, usize) {
        (self.row * PATCH, self.col * PATCH, (self.row + self.rows) * PATCH, (self.col + self.cols) * PATCH)
    }

    pub fn contains_patch(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.rows).contains(&r) && (self.col..self.col + self.cols).contains(&c)
    }

    fn sample<R: Rng + ?Sized>(rng: &mut R, central: bool) -> Self {
        if central {
            // Even sizes keep the region centred on the image.
            let rows = 2 * rng.random_range(2..=3);
            let cols = rows;
            return Region {
                row: (GRID - rows) / 2,
                col: (GRID - cols) / 2,
                rows,
                cols,
            };
        }
        let rows = rng.random_range(3..=5);
        let cols = rng.random_range(3..=5);
        Region {
            row: rng.random_range(0..=GRID - rows),
            col: rng.random_range(0..=GRID - cols),
            rows,
            cols,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DamageSpec {
    pub damage_type: DamageType,
    pub severity_scalar: f64,
    pub region: Region,
    pub compound_partner: Option<DamageType>,
}

impl DamageSpec {
    /// Severity bin, `None` for compound and severity-less types.
    pub fn severity(&self) -> Severity {
        if self.compound_partner.is_some() || !self.damage_type.has_severity() {
            Severity::None
        } else {
            Severity::from_scalar(self.severity_scalar)
        }
    }
}

/// Random fields fixed by the seed and shared by all severities.
#[derive(Clone, Debug)]
pub struct Draws {
    noise: Vec<f64>,
    texture: Vec<f64>,
    cut_angle: f64,
    warp_period: f64,
    void_radius: f64,
}

impl Draws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        Draws {
            noise: (0..PIXELS).map(|_| unit.sample(rng)).collect(),
            texture: (0..hw).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cut_angle: rng.random_range(0.5..1.1),
            warp_period: rng.random_range(6.0..10.0),
            void_radius: rng.random_range(6.0..9.0),
        }
    }
}

/// Draw the continuous severity inside a class's bin; severity-less classes
/// draw from the whole unit interval.
pub fn severity_in_bin<R: Rng + ?Sized>(severity: Severity, rng: &mut R) -> f64 {
    let (lo, hi) = match severity {
        Severity::Low => (0.0, 1.0 / 3.0),
        Severity::Medium => (1.0 / 3.0, 2.0 / 3.0),
        Severity::High => (2.0 / 3.0, 1.0),
        Severity::None => (0.0, 1.0),
    };
    rng.random_range(lo..hi)
}

/// Render a `[3, 64, 64]` image in `[0, 1]`, channel-major.
pub fn render(rope: &RopeSpec, damage: Option<&DamageSpec>, draws: &Draws) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let mut shade = vec![0.0f64; n * n];
    // Per-pixel multiplicative and additive overlays, then a pixel override.
    let mut gain = vec![1.0f64; n * n];
    let mut add = vec![0.0f64; n * n];
    let mut over: Vec<Option<f64>> = vec![None; n * n];
    let mut sample_at: Vec<(f64, f64)> = (0..n * n).map(|i| ((i % n) as f64, (i / n) as f64)).collect();

    if let Some(d) = damage {
        let mut kinds = vec![d.damage_type];
        kinds.extend(d.compound_partner);
        // Geometric warps first so colour overlays land on the warped field.
        kinds.sort_by_key(|k| !matches!(k, DamageType::Placking | DamageType::Compression));
        for kind in kinds {
            paint(kind, d, draws, &mut sample_at, &mut gain, &mut add, &mut over);
        }
    }
    for (i, s) in shade.iter_mut().enumerate() {
        let (x, y) = sample_at[i];
        *s = rope.shade(x, y);
    }
    let mut img = vec![0.0f32; PIXELS];
    for c in 0..CHANNELS {
        for i in 0..n * n {
            let v = match over[i] {
                Some(v) => v,
                None => rope.base_color[c] * shade[i] * gain[i] + add[i],
            };
            let v = v + rope.noise_level * draws.noise[c * n * n + i];
            img[c * n * n + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

#[allow(clippy::too_many_arguments)]
fn paint(
    kind: DamageType,
    d: &DamageSpec,
    draws: &Draws,
    sample_at: &mut [(f64, f64)],
    gain: &mut [f64],
    add: &mut [f64],
    over: &mut [Option<f64>],
) {
    let n = IMAGE_SIZE;
    let s = d.severity_scalar;
    let (y0, x0, y1, x1) = d.region.pixels();
    let (cy, cx) = ((y0 + y1) as f64 / 2.0, (x0 + x1) as f64 / 2.0);
    let (h, w) = ((y1 - y0) as f64, (x1 - x0) as f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * n + x;
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            // Smooth bump over the region, 1 at the centre, 0 on the border.
            let bump = (PI * (fy - y0 as f64) / h).sin() * (PI * (fx - x0 as f64) / w).sin();
            match kind {
                DamageType::Chafing => {
                    add[i] += (0.08 + 0.5 * s) * draws.texture[i];
                }
                DamageType::CutStrands => {
                    let (sa, ca) = draws.cut_angle.sin_cos();
                    let dist = ((fx - cx) * sa - (fy - cy) * ca).abs();
                    let half = 0.5 * (1.0 + 6.0 * s);
                    if dist < half {
                        gain[i] *= 0.12;
                    } else if dist < half + 1.0 {
                        gain[i] *= 0.5;
                    }
                }
                DamageType::Placking => {
                    let amp = (1.5 + 6.0 * s) * bump;
                    let (px, py) = sample_at[i];
                    sample_at[i] = (px + amp * (2.0 * PI * (fy - y0 as f64) / draws.warp_period).sin(), py);
                    add[i] += 0.2 * s * bump;
                }
                DamageType::Compression => {
                    let squash = 0.25 + 0.15 * s;
                    let (_, py) = sample_at[i];
                    sample_at[i] = (x0 as f64 + (fx - x0 as f64) * squash, py);
                    gain[i] *= 0.85;
                }
                DamageType::CoreOut => {
                    let r = draws.void_radius * (0.8 + 0.4 * s);
                    let dist = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    if dist < r {
                        over[i] = Some(0.93);
                    } else if dist < r + 1.5 {
                        add[i] += 0.25;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Seed-derived identifier, unique across splits of one dataset.
    pub id: u64,
    pub image: Vec<f32>,
    pub label: DamageLabel,
    pub severity_scalar: f64,
    pub description: String,
}

/// Everything drawn from a sample seed before rendering.
#[derive(Clone, Debug)]
pub struct SampleDraws {
    pub rope: RopeSpec,
    pub damage: DamageSpec,
    pub draws: Draws,
    pub text_seed: u64,
}

pub fn sample_draws(class_index: usize, seed: u64) -> SampleDraws {
    let label = DamageLabel::from_class(class_index).expect("class index in range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rope = RopeSpec::sample(&mut rng);
    let severity_scalar = severity_in_bin(label.severity, &mut rng);
    let region = Region::sample(&mut rng, label.damage_type == DamageType::CoreOut);
    let draws = Draws::sample(&mut rng);
    let text_seed = rng.random();
    SampleDraws {
        rope,
        damage: DamageSpec {
            damage_type: label.damage_type,
            severity_scalar,
            region,
            compound_partner: label.compound_partner(),
        },
        draws,
        text_seed,
    }
}

/// # Panics
/// If `class_index` is not below 14.
pub fn generate_sample(class_index: usize, seed: u64) -> Sample {
    let label = DamageLabel::from_class(class_index).expect("class index in range");
    let sd = sample_draws(class_index, seed);
    Sample {
        id: seed,
        image: render(&sd.rope, Some(&sd.damage), &sd.draws),
        label,
        severity_scalar: sd.damage.severity_scalar,
        description: super::describe::describe(&label, sd.damage.severity_scalar, sd.text_seed),
    }
}

/// Pure noise, the out-of-distribution probe for anomaly screening.
pub fn noise_image(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PIXELS).map(|_| rng.random::<f32>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::NUM_CLASSES;

    #[test]
    fn deterministic_per_seed() {
        for c in 0..NUM_CLASSES {
            assert_eq!(generate_sample(c, 77), generate_sample(c, 77));
        }
        assert_ne!(generate_sample(0, 1).image, generate_sample(0, 2).image);
    }

    #[test]
    fn pixels_in_unit_range_and_rope_valid() {
        for c in 0..NUM_CLASSES {
            let s = generate_sample(c, c as u64 + 100);
            assert_eq!(s.image.len(), PIXELS);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            sample_draws(c, c as u64).rope.validate().unwrap();
        }
    }

    #[test]
    fn severity_scalar_inside_bin() {
        for c in 0..NUM_CLASSES {
            for seed in 0..20 {
                let s = generate_sample(c, seed);
                if s.label.severity != Severity::None {
                    assert_eq!(Severity::from_scalar(s.severity_scalar), s.label.severity);
                }
                assert!((0.0..=1.0).contains(&s.severity_scalar));
            }
        }
    }

    fn region_distance(sd: &SampleDraws, s: f64) -> f64 {
        let clean = render(&sd.rope, None, &sd.draws);
        let mut d = sd.damage.clone();
        d.severity_scalar = s;
        let img = render(&sd.rope, Some(&d), &sd.draws);
        let (y0, x0, y1, x1) = d.region.pixels();
        let mut acc = 0.0;
        for c in 0..CHANNELS {
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x;
                    acc += (img[i] as f64 - clean[i] as f64).powi(2);
                }
            }
        }
        acc.sqrt()
    }

    #[test]
    fn chafing_distance_strictly_increases_with_severity() {
        for seed in 0..5 {
            let sd = sample_draws(0, seed);
            let d: Vec<f64> = (0..10).map(|k| region_distance(&sd, k as f64 / 9.0)).collect();
            assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
        }
    }

    #[test]
    fn damage_stays_inside_region_for_local_overlays() {
        let sd = sample_draws(3, 9);
        let clean = render(&sd.rope, None, &sd.draws);
        let img = render(&sd.rope, Some(&sd.damage), &sd.draws);
        let (y0, x0, y1, x1) = sd.damage.region.pixels();
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if !(y0..y1).contains(&y) || !(x0..x1).contains(&x) {
                    assert_eq!(img[y * IMAGE_SIZE + x], clean[y * IMAGE_SIZE + x]);
                }
            }
        }
    }

    #[test]
    fn coreout_void_is_bright() {
        let s = generate_sample(13, 4);
        let c = IMAGE_SIZE / 2;
        let v = s.image[c * IMAGE_SIZE + c];
        assert!(v > 0.85, "{v}");
    }
}
