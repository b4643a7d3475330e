//! Procedurally drawn 10-class 32x32 colour images in CIFAR-10 layout, for
//! running the pipeline where the real dataset is unavailable.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::write_cifar_file;
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORDS_PER_FILE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Minimum colour distance between object and background.
    pub min_contrast: f32,
    /// Probability of a second, random-class object as clutter.
    pub clutter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            noise: 0.12,
            min_contrast: 0.25,
            clutter: 0.3,
        }
    }
}

/// Shape placement in normalized image coordinates.
struct Pose {
    cx: f32,
    cy: f32,
    scale: f32,
    angle: f32,
}

impl Pose {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Pose {
            cx: rng.random_range(0.3..0.7),
            cy: rng.random_range(0.3..0.7),
            scale: rng.random_range(0.18..0.32),
            angle: rng.random_range(0.0..PI),
        }
    }

    /// Pixel centre in the shape's rotated frame, in units of `scale`.
    fn local(&self, px: usize, py: usize) -> (f32, f32) {
        let x = (px as f32 + 0.5) / SIDE as f32 - self.cx;
        let y = (py as f32 + 0.5) / SIDE as f32 - self.cy;
        let (s, c) = self.angle.sin_cos();
        ((c * x + s * y) / self.scale, (-s * x + c * y) / self.scale)
    }
}

/// Coverage in [0, 1] of class `class`'s shape at a local coordinate.
fn coverage(class: u8, u: f32, v: f32) -> f32 {
    // Soft edge roughly one pixel wide at typical scales.
    let edge = |d: f32| (0.5 - d * 6.0).clamp(0.0, 1.0);
    let r = (u * u + v * v).sqrt();
    match class {
        0 => edge(r - 1.0),
        1 => edge(u.abs().max(v.abs()) - 0.85),
        2 => {
            // Equilateral triangle.
            let d = (v - 0.5).max((-0.866 * u - 0.5 * v) - 0.5).max((0.866 * u - 0.5 * v) - 0.5);
            edge(d)
        }
        3 => {
            let inside = edge(u.abs().max(v.abs()) - 1.0);
            inside * if (v * 2.5).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.0 }
        }
        4 => edge((r - 0.85).abs() - 0.2),
        5 => edge(u.abs().min(v.abs()) - 0.25).min(edge(r - 1.1)),
        6 => {
            let inside = edge(u.abs().max(v.abs()) - 1.0);
            let cell = ((u * 2.0).floor() + (v * 2.0).floor()) as i32;
            inside * if cell.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
        }
        7 => edge((u.abs() - 1.1).max(v.abs() - 0.28)),
        8 => {
            let a = ((u - 0.55).powi(2) + v * v).sqrt();
            let b = ((u + 0.55).powi(2) + v * v).sqrt();
            edge(a.min(b) - 0.45)
        }
        _ => {
            // Half disc.
            edge((r - 1.0).max(-v))
        }
    }
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn colour_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
}

fn draw(class: u8, cfg: &SynthConfig, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    // Background: linear blend of two colours along a random direction.
    let (c0, c1) = (random_colour(rng), random_colour(rng));
    let dir = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (dir.cos(), dir.sin());
    for py in 0..SIDE {
        for px in 0..SIDE {
            let t = 0.5 + 0.5 * (dx * (px as f32 / SIDE as f32 - 0.5) + dy * (py as f32 / SIDE as f32 - 0.5));
            for ch in 0..3 {
                out[ch * PLANE + py * SIDE + px] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let mean_bg = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0, (c0[2] + c1[2]) / 2.0];
    let mut objects = vec![class];
    if rng.random::<f32>() < cfg.clutter {
        // Clutter is a small shape of a different class, drawn first.
        let other = (class + rng.random_range(1..10)) % 10;
        objects.insert(0, other);
    }
    let last = objects.len() - 1;
    for (i, &obj) in objects.iter().enumerate() {
        let mut fg = random_colour(rng);
        for _ in 0..20 {
            if colour_distance(fg, mean_bg) >= cfg.min_contrast {
                break;
            }
            fg = random_colour(rng);
        }
        let mut pose = Pose::random(rng);
        if i != last {
            pose.scale *= 0.55;
            pose.cx = rng.random_range(0.15..0.85);
            pose.cy = rng.random_range(0.15..0.85);
        }
        for py in 0..SIDE {
            for px in 0..SIDE {
                let (u, v) = pose.local(px, py);
                let m = coverage(obj, u, v);
                if m > 0.0 {
                    for ch in 0..3 {
                        let p = &mut out[ch * PLANE + py * SIDE + px];
                        *p = *p * (1.0 - m) + fg[ch] * m;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    for p in out.iter_mut() {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

/// `n` images with labels cycling through 0..10, quantized to bytes as the
/// CIFAR format stores them.
pub fn synthetic_cifar(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("noise {} must be >= 0", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * 3 * PLANE];
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for (img, &label) in data.chunks_exact_mut(3 * PLANE).zip(&labels) {
        draw(label, cfg, &mut rng, img);
        for p in img.iter_mut() {
            *p = (*p * 255.0).round() / 255.0;
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 3, SIDE, SIDE], data)?, labels)
}

/// Write `data_batch_*.bin` (10000 records each) and `test_batch.bin`.
pub fn write_synthetic_cifar(
    dir: &Path,
    train: usize,
    test: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train_set = synthetic_cifar(train, seed, cfg)?;
    let indices: Vec<usize> = (0..train).collect();
    for (i, chunk) in indices.chunks(RECORDS_PER_FILE).enumerate() {
        let part = train_set.gather(chunk)?;
        write_cifar_file(&dir.join(format!("data_batch_{}.bin", i + 1)), &part)?;
    }
    let test_set = synthetic_cifar(test, seed ^ 0x5EED_7E57, cfg)?;
    write_cifar_file(&dir.join("test_batch.bin"), &test_set)
}
