//! Deterministic synthetic gesture videos.
//!
//! Each gloss class is a motion trajectory traced by a gaussian-profile blob
//! of identical appearance across classes, so a single frame carries no class
//! information; only cross-frame motion does. Static distractor blobs and
//! pixel noise are added on top. Every sample is a pure function of
//! `(seed, index)`.

use crate::ctc::GlossSequence;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of built-in trajectory classes.
pub const MAX_CLASSES: usize = 6;

/// Human-readable names of the trajectory classes, indexed by class id.
pub const CLASS_NAMES: [&str; MAX_CLASSES] =
    ["left", "right", "up", "down", "clockwise-arc", "zigzag"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub frame_size: usize,
    pub vocab_size: usize,
    pub frames_per_gloss: usize,
    pub min_glosses: usize,
    pub max_glosses: usize,
    /// Cutoff radius of the rendered blob; the gaussian profile has
    /// `sigma = blob_radius / 2.5`.
    pub blob_radius: f64,
    pub distractors: usize,
    /// Uniform noise amplitude in [0, 0.5].
    pub noise: f64,
    /// Per-frame trajectory wobble in pixels, applied orthogonally to each
    /// class's motion direction so the class-defining component is untouched.
    pub trajectory_jitter: f64,
    /// Maximum per-sample translation of the whole trajectory, in pixels.
    /// Makes absolute position uninformative; only relative motion carries
    /// the class.
    pub trajectory_offset: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            frame_size: 16,
            vocab_size: 6,
            frames_per_gloss: 8,
            min_glosses: 2,
            max_glosses: 5,
            blob_radius: 2.5,
            distractors: 3,
            noise: 0.05,
            trajectory_jitter: 1.0,
            trajectory_offset: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.frames_per_gloss == 0 || self.min_glosses == 0 {
            return Err(Error::Config("synthetic extents must be positive".into()));
        }
        if self.vocab_size == 0 || self.vocab_size > MAX_CLASSES {
            return Err(Error::Config(format!(
                "vocab_size must be in 1..={MAX_CLASSES}, got {}",
                self.vocab_size
            )));
        }
        if self.min_glosses > self.max_glosses {
            return Err(Error::Config("min_glosses exceeds max_glosses".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if self.blob_radius <= 0.0 {
            return Err(Error::Config("blob_radius must be positive".into()));
        }
        if self.trajectory_jitter < 0.0 || self.trajectory_offset < 0.0 {
            return Err(Error::Config(
                "trajectory_jitter and trajectory_offset must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn center(&self) -> f64 {
        (self.frame_size as f64 - 1.0) / 2.0
    }

    /// Trajectory amplitude keeping the blob fully inside the frame even at
    /// maximum wobble and sample translation.
    fn amplitude(&self) -> f64 {
        (self.center() - self.blob_radius - 0.5 - self.trajectory_jitter - self.trajectory_offset)
            .max(1.0)
    }
}

/// A generated video with its gloss label (ids are `class + 1`; 0 is blank).
#[derive(Clone, Debug)]
pub struct Sample<S> {
    /// `[T, 3, H, W]` pixel values in [0, 1].
    pub video: Tensor<S>,
    pub label: GlossSequence,
}

/// Data split roles map to disjoint global index ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Dev,
    Test,
}

impl Role {
    pub fn offset(self) -> u64 {
        match self {
            Role::Train => 0,
            Role::Dev => 1 << 40,
            Role::Test => 2 << 40,
        }
    }

    pub fn parse(name: &str) -> Result<Role> {
        match name {
            "train" => Ok(Role::Train),
            "dev" => Ok(Role::Dev),
            "test" => Ok(Role::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}, expected train, dev or test"
            ))),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Blob center for class `class` at progress `s` in [0, 1], as `(col, row)`.
pub fn trajectory_point(cfg: &SyntheticConfig, class: usize, s: f64) -> (f64, f64) {
    let c = cfg.center();
    let r = cfg.amplitude();
    match class {
        // left: columns decrease
        0 => (c + r * (1.0 - 2.0 * s), c),
        // right: columns increase
        1 => (c - r * (1.0 - 2.0 * s), c),
        // up: rows decrease
        2 => (c, c + r * (1.0 - 2.0 * s)),
        // down: rows increase
        3 => (c, c - r * (1.0 - 2.0 * s)),
        // clockwise half circle: top -> right -> bottom
        4 => {
            let phi = std::f64::consts::PI * s;
            (c + r * phi.sin(), c - r * phi.cos())
        }
        // zigzag: sweep right with a triangle-wave vertical component
        5 => {
            let u = (2.0 * s).fract();
            let tri = 4.0 * (u - 0.5).abs() - 1.0;
            (c + r * (2.0 * s - 1.0), c + 0.5 * r * tri)
        }
        _ => unreachable!("class outside built-in set"),
    }
}

/// Per-frame wobble applied orthogonally to the class's motion direction:
/// vertical for horizontal sweeps (right, zigzag keep their column order),
/// horizontal for vertical sweeps, radial for the arc.
fn apply_jitter(cfg: &SyntheticConfig, class: usize, s: f64, point: (f64, f64), u: f64) -> (f64, f64) {
    let j = cfg.trajectory_jitter * u;
    let (x, y) = point;
    match class {
        0 | 1 | 5 => (x, y + j),
        2 | 3 => (x + j, y),
        4 => {
            let phi = std::f64::consts::PI * s;
            (x + j * phi.sin(), y - j * phi.cos())
        }
        _ => unreachable!("class outside built-in set"),
    }
}

const JITTER_SALT: u64 = 0x7261_6a65_7474_6972;
const OFFSET_SALT: u64 = 0x7465_7366_666f_0000;

/// Whole-trajectory translation for the sample at `index`.
fn sample_offset(cfg: &SyntheticConfig, index: u64) -> (f64, f64) {
    if cfg.trajectory_offset == 0.0 {
        return (0.0, 0.0);
    }
    let mut rng = sample_rng(cfg.seed ^ OFFSET_SALT, index);
    let m = cfg.trajectory_offset;
    (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
}

/// Per-frame mover centers for the sample at `index`. Positions depend on the
/// label and on the sample's wobble stream, never on noise draws, so map
/// diagnostics can recompute them from `(config, index, label)`.
pub fn blob_centers(cfg: &SyntheticConfig, index: u64, label: &GlossSequence) -> Vec<(f64, f64)> {
    let f = cfg.frames_per_gloss;
    let denom = (f - 1).max(1) as f64;
    let mut jitter_rng = sample_rng(cfg.seed ^ JITTER_SALT, index);
    let (ox, oy) = sample_offset(cfg, index);
    let mut centers = Vec::with_capacity(label.len() * f);
    for &gloss in label {
        let class = gloss - 1;
        for k in 0..f {
            let s = k as f64 / denom;
            let base = trajectory_point(cfg, class, s);
            let u = jitter_rng.gen_range(-1.0..=1.0);
            let (x, y) = apply_jitter(cfg, class, s, base, u);
            centers.push((x + ox, y + oy));
        }
    }
    centers
}

// Distractors are dimmed copies of the mover: same hue and profile, only
// brightness separates them within a frame, and per-sample brightness jitter
// keeps that separation away from any fixed threshold. Cross-frame matching
// still binds the mover to itself (it stays the brightest blob).
const BLOB_COLOR: [f64; 3] = [1.0, 0.75, 0.55];
const MOVER_GAIN: (f64, f64) = (0.75, 1.0);
const DISTRACTOR_GAIN: (f64, f64) = (0.5, 0.7);

fn scaled(color: &[f64; 3], gain: f64) -> [f64; 3] {
    [color[0] * gain, color[1] * gain, color[2] * gain]
}

fn splat(frame: &mut [f64], size: usize, center: (f64, f64), radius: f64, color: &[f64; 3]) {
    let sigma = radius / 2.5;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let r2 = radius * radius;
    let (cx, cy) = center;
    let lo_x = (cx - radius).floor().max(0.0) as usize;
    let hi_x = (cx + radius).ceil().min(size as f64 - 1.0) as usize;
    let lo_y = (cy - radius).floor().max(0.0) as usize;
    let hi_y = (cy + radius).ceil().min(size as f64 - 1.0) as usize;
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
            if d2 > r2 {
                continue;
            }
            let intensity = (-d2 * inv).exp();
            for (ch, &w) in color.iter().enumerate() {
                frame[(ch * size + py) * size + px] += w * intensity;
            }
        }
    }
}

/// Generate the sample at a global index. Identical `(config.seed, index)`
/// pairs produce bitwise-identical samples.
pub fn generate_sample<S: Scalar>(cfg: &SyntheticConfig, index: u64) -> Sample<S> {
    let mut rng = sample_rng(cfg.seed, index);
    let n = rng.gen_range(cfg.min_glosses..=cfg.max_glosses);
    let label: GlossSequence = (0..n).map(|_| rng.gen_range(1..=cfg.vocab_size)).collect();

    let size = cfg.frame_size;
    let margin = cfg.blob_radius + 0.5;
    let span = size as f64 - 1.0 - 2.0 * margin;
    let distractors: Vec<(f64, f64)> = (0..cfg.distractors)
        .map(|_| {
            (
                margin + rng.gen::<f64>() * span,
                margin + rng.gen::<f64>() * span,
            )
        })
        .collect();
    let mover_color = scaled(&BLOB_COLOR, rng.gen_range(MOVER_GAIN.0..=MOVER_GAIN.1));
    let distractor_colors: Vec<[f64; 3]> = (0..cfg.distractors)
        .map(|_| scaled(&BLOB_COLOR, rng.gen_range(DISTRACTOR_GAIN.0..=DISTRACTOR_GAIN.1)))
        .collect();

    let centers = blob_centers(cfg, index, &label);
    let t_len = centers.len();
    let mut video = Vec::with_capacity(t_len * 3 * size * size);
    let mut frame = vec![0.0f64; 3 * size * size];
    for &center in &centers {
        frame.fill(0.0);
        splat(&mut frame, size, center, cfg.blob_radius, &mover_color);
        for (&d, color) in distractors.iter().zip(&distractor_colors) {
            splat(&mut frame, size, d, cfg.blob_radius, color);
        }
        for &v in &frame {
            let noisy = if cfg.noise > 0.0 {
                v + rng.gen_range(-cfg.noise..=cfg.noise)
            } else {
                v
            };
            video.push(S::from_f64(noisy.clamp(0.0, 1.0)));
        }
    }
    Sample {
        video: Tensor::new(vec![t_len, 3, size, size], video).expect("generated shape"),
        label,
    }
}

/// Generate `count` samples for a role; roles draw from disjoint index ranges.
pub fn generate_split<S: Scalar>(cfg: &SyntheticConfig, count: usize, role: Role) -> Vec<Sample<S>> {
    (0..count as u64)
        .map(|i| generate_sample(cfg, role.offset() + i))
        .collect()
}

/// Render a single-gloss video with no distractors and no noise; used to
/// check that per-frame statistics carry no class information.
pub fn render_gloss_video<S: Scalar>(cfg: &SyntheticConfig, class: usize) -> Tensor<S> {
    let clean = SyntheticConfig {
        distractors: 0,
        noise: 0.0,
        trajectory_jitter: 0.0,
        trajectory_offset: 0.0,
        ..*cfg
    };
    let centers = blob_centers(&clean, 0, &vec![class + 1]);
    let size = clean.frame_size;
    let mut video = Vec::with_capacity(centers.len() * 3 * size * size);
    let mut frame = vec![0.0f64; 3 * size * size];
    for &center in &centers {
        frame.fill(0.0);
        splat(&mut frame, size, center, clean.blob_radius, &BLOB_COLOR);
        for &v in &frame {
            video.push(S::from_f64(v.clamp(0.0, 1.0)));
        }
    }
    Tensor::new(vec![centers.len(), 3, size, size], video).expect("generated shape")
}

/// Intensity-weighted centroid `(col, row)` of channel 0 of frame `t`.
pub fn frame_centroid<S: Scalar>(video: &Tensor<S>, t: usize) -> (f64, f64) {
    let shape = video.shape();
    let (size_h, size_w) = (shape[2], shape[3]);
    let base = t * shape[1] * size_h * size_w;
    let data = video.data();
    let (mut mass, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
    for py in 0..size_h {
        for px in 0..size_w {
            let v = data[base + py * size_w + px].as_f64();
            mass += v;
            mx += v * px as f64;
            my += v * py as f64;
        }
    }
    (mx / mass, my / mass)
}
