//! Procedural stand-in for hand-gesture photographs: a palm with a
//! class-specific set of raised fingers, rendered under randomized
//! lighting, pose, background and sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, LabeledDataset};
use crate::{Error, Result};

pub const GESTURE_NAMES: [&str; 5] = ["one", "two", "three", "four", "five"];

/// Finger slots raised for each gesture. Slot 2 points straight up; the
/// patterns are mirror-symmetric so horizontal flips preserve the label.
const FINGER_PATTERNS: [&[usize]; 5] = [&[2], &[1, 3], &[1, 2, 3], &[0, 1, 3, 4], &[0, 1, 2, 3, 4]];
const SLOT_ANGLES_DEG: [f32; 5] = [-50.0, -24.0, 0.0, 24.0, 50.0];

const PALM_CENTER: (f32, f32) = (0.0, 0.32);
const PALM_RADII: (f32, f32) = (0.40, 0.34);
const FINGER_BASE: f32 = 0.25;
const FINGER_TIP: f32 = 0.88;
const FINGER_RADIUS: f32 = 0.085;

/// Ranges of the per-image random variation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    /// Multiplicative lighting factor range.
    pub brightness: (f32, f32),
    /// Maximum absolute in-plane rotation, degrees.
    pub rotation_deg: f32,
    /// Maximum absolute offset of the hand centre, as a fraction of the half-width.
    pub translation: f32,
    /// Hand scale range.
    pub scale: (f32, f32),
    /// 0 gives a fixed flat background; 1 gives fully random colour and texture.
    pub background: f32,
    /// Standard deviation of additive Gaussian pixel noise (0-255 units).
    pub noise_sigma: f32,
    /// 0 gives one fixed skin tone; 1 samples the full tone range.
    pub skin_variation: f32,
    /// Maximum slope of the linear lighting gradient across the frame.
    pub shading: f32,
}

impl Nuisance {
    /// No variation at all: every image of a class is identical.
    pub fn none() -> Self {
        Nuisance {
            brightness: (1.0, 1.0),
            rotation_deg: 0.0,
            translation: 0.0,
            scale: (1.0, 1.0),
            background: 0.0,
            noise_sigma: 0.0,
            skin_variation: 0.0,
            shading: 0.0,
        }
    }
}

impl Default for Nuisance {
    fn default() -> Self {
        Nuisance {
            brightness: (0.75, 1.2),
            rotation_deg: 12.0,
            translation: 0.08,
            scale: (0.9, 1.05),
            background: 1.0,
            noise_sigma: 6.0,
            skin_variation: 1.0,
            shading: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub nuisance: Nuisance,
}

impl SynthConfig {
    pub fn new(per_class: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            classes: GESTURE_NAMES.len(),
            per_class,
            size,
            seed,
            nuisance: Nuisance::default(),
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

struct Pose {
    cos: f32,
    sin: f32,
    shift: (f32, f32),
    scale: f32,
}

impl Pose {
    /// Maps image coordinates in [-1, 1]^2 back into canonical hand space.
    fn to_hand(&self, u: f32, v: f32) -> (f32, f32) {
        let (x, y) = (u - self.shift.0, v - self.shift.1);
        let (rx, ry) = (self.cos * x + self.sin * y, -self.sin * x + self.cos * y);
        (rx / self.scale, ry / self.scale)
    }
}

fn inside_hand(x: f32, y: f32, fingers: &[usize]) -> bool {
    let (dx, dy) = ((x - PALM_CENTER.0) / PALM_RADII.0, (y - PALM_CENTER.1) / PALM_RADII.1);
    if dx * dx + dy * dy <= 1.0 {
        return true;
    }
    fingers.iter().any(|&slot| {
        let a = SLOT_ANGLES_DEG[slot].to_radians();
        let dir = (a.sin(), -a.cos());
        let (px, py) = (x - PALM_CENTER.0, y - PALM_CENTER.1);
        let t = (px * dir.0 + py * dir.1).clamp(FINGER_BASE, FINGER_TIP);
        let (qx, qy) = (px - t * dir.0, py - t * dir.1);
        qx * qx + qy * qy <= FINGER_RADIUS * FINGER_RADIUS
    })
}

fn render(class: usize, size: usize, nz: &Nuisance, rng: &mut ChaCha8Rng) -> Result<Image> {
    let angle = uniform(rng, -nz.rotation_deg, nz.rotation_deg).to_radians();
    let pose = Pose {
        cos: angle.cos(),
        sin: angle.sin(),
        shift: (
            uniform(rng, -nz.translation, nz.translation),
            uniform(rng, -nz.translation, nz.translation),
        ),
        scale: uniform(rng, nz.scale.0, nz.scale.1),
    };
    let light = uniform(rng, nz.brightness.0, nz.brightness.1);
    let tone = [(195.0, 230.0), (140.0, 175.0), (110.0, 140.0)];
    let mut skin = [0f32; 3];
    for (s, (lo, hi)) in skin.iter_mut().zip(tone) {
        let mid = 0.5 * (lo + hi);
        *s = mid + nz.skin_variation * (uniform(rng, lo, hi) - mid);
    }
    let fixed_bg = [60.0f32, 80.0, 110.0];
    let mut bg = [0f32; 3];
    for (ch, b) in bg.iter_mut().enumerate() {
        let random = uniform(rng, 20.0 + 20.0 * ch as f32, 110.0 + 30.0 * ch as f32);
        *b = fixed_bg[ch] + nz.background * (random - fixed_bg[ch]);
    }
    let texture_amp = 30.0 * nz.background;
    let freqs = [uniform(rng, 1.0, 5.0), uniform(rng, 1.0, 5.0), uniform(rng, 0.0, 6.28)];
    let gradient = (
        uniform(rng, -nz.shading, nz.shading),
        uniform(rng, -nz.shading, nz.shading),
    );
    let noise = Normal::new(0.0f32, nz.noise_sigma.max(0.0))
        .map_err(|e| Error::config(format!("noise sigma: {e}")))?;

    let fingers = FINGER_PATTERNS[class];
    let mut data = Vec::with_capacity(size * size * 3);
    let step = 2.0 / size as f32;
    for py in 0..size {
        for px in 0..size {
            // 2x2 supersampling for coverage.
            let mut cover = 0.0f32;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (px as f32 + ox) * step - 1.0;
                let v = (py as f32 + oy) * step - 1.0;
                let (hx, hy) = pose.to_hand(u, v);
                if inside_hand(hx, hy, fingers) {
                    cover += 0.25;
                }
            }
            let u = (px as f32 + 0.5) * step - 1.0;
            let v = (py as f32 + 0.5) * step - 1.0;
            let tex = texture_amp * (freqs[0] * u + freqs[1] * v + freqs[2]).sin();
            let shade = light * (1.0 + gradient.0 * u + gradient.1 * v);
            for ch in 0..3 {
                let back = bg[ch] + tex;
                let value = shade * (cover * skin[ch] + (1.0 - cover) * back);
                let n = if nz.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((value + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(size, size, data)
}

/// Renders `per_class` images for each of the first `classes` gestures,
/// ordered class by class. Deterministic in `seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if !(2..=GESTURE_NAMES.len()).contains(&cfg.classes) {
        return Err(Error::config(format!(
            "synthetic data supports 2 to {} classes, got {}",
            GESTURE_NAMES.len(),
            cfg.classes
        )));
    }
    if cfg.per_class < 2 {
        return Err(Error::config("need at least two images per class"));
    }
    if cfg.size < 8 {
        return Err(Error::config("synthetic images must be at least 8x8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.classes * cfg.per_class);
    for class in 0..cfg.classes {
        for _ in 0..cfg.per_class {
            items.push((render(class, cfg.size, &cfg.nuisance, &mut rng)?, class));
        }
    }
    let names = GESTURE_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(items, names)
}
