//! Pixel-space corruptions with five severity levels each. Pixel values are
//! kept in `[0, 1]`; labels are never touched.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    FogLikeHaze,
    FrostLikeOverlay,
    SnowLikeSpeckle,
    Contrast,
    Posterize,
    Solarize,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::GaussianNoise,
        Family::ShotNoise,
        Family::DefocusBlur,
        Family::FogLikeHaze,
        Family::FrostLikeOverlay,
        Family::SnowLikeSpeckle,
        Family::Contrast,
        Family::Posterize,
        Family::Solarize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianNoise => "gaussian_noise",
            Family::ShotNoise => "shot_noise",
            Family::DefocusBlur => "defocus_blur",
            Family::FogLikeHaze => "fog_like_haze",
            Family::FrostLikeOverlay => "frost_like_overlay",
            Family::SnowLikeSpeckle => "snow_like_speckle",
            Family::Contrast => "contrast",
            Family::Posterize => "posterize",
            Family::Solarize => "solarize",
        }
    }

    /// Strength parameter for severities 1..=5.
    pub fn schedule(self) -> [f64; 5] {
        match self {
            // noise standard deviation
            Family::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            // 1 / photon count
            Family::ShotNoise => [1.0 / 60.0, 1.0 / 25.0, 1.0 / 12.0, 1.0 / 6.0, 1.0 / 3.0],
            // Gaussian blur sigma in pixels
            Family::DefocusBlur => [0.4, 0.6, 0.85, 1.2, 1.7],
            // haze mixing weight
            Family::FogLikeHaze => [0.15, 0.3, 0.45, 0.6, 0.75],
            // overlay opacity
            Family::FrostLikeOverlay => [0.15, 0.25, 0.35, 0.5, 0.65],
            // speckle density
            Family::SnowLikeSpeckle => [0.02, 0.05, 0.08, 0.12, 0.18],
            // contrast reduction 1 − c
            Family::Contrast => [0.25, 0.45, 0.6, 0.72, 0.82],
            // 1 / (levels − 1)
            Family::Posterize => [1.0 / 15.0, 1.0 / 7.0, 1.0 / 4.0, 1.0 / 2.0, 1.0],
            // inversion amount above mid-grey
            Family::Solarize => [0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown corruption family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: Family,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(family: Family, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::arg(format!("severity must lie in 1..=5, got {severity}")));
        }
        Ok(Self { family, severity })
    }

    pub fn strength(&self) -> f64 {
        self.family.schedule()[self.severity as usize - 1]
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.family, self.severity)
    }
}

/// Applies `spec`; the result's id is `<data id>+<family>-<severity>`.
pub fn corrupt(data: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    let mut out = corrupt_with_strength(data, spec.family, spec.strength(), seed)?;
    out.id = format!("{}+{}", data.id, spec.label());
    Ok(out)
}

/// Applies a family at an explicit strength; strength 0 is the identity for
/// every family.
pub fn corrupt_with_strength(data: &Dataset, family: Family, strength: f64, seed: u64) -> Result<Dataset> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::arg("corruption strength must be finite and non-negative"));
    }
    let mut out = data.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (family as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let (c, h, w) = (data.channels, data.height, data.width);
    let plane = h * w;
    for img in out.pixels.chunks_mut(c * plane) {
        match family {
            Family::GaussianNoise => {
                let n = Normal::new(0.0, strength).map_err(|e| Error::arg(e.to_string()))?;
                img.iter_mut().for_each(|v| *v += n.sample(&mut rng) as f32);
            }
            Family::ShotNoise => {
                let lam = 1.0 / strength;
                for v in img.iter_mut() {
                    let mean = (*v as f64 * lam).max(1e-9);
                    let k: f64 = Poisson::new(mean).map_err(|e| Error::arg(e.to_string()))?.sample(&mut rng);
                    *v = (k / lam) as f32;
                }
            }
            Family::DefocusBlur => {
                for ch in img.chunks_mut(plane) {
                    blur(ch, h, w, strength);
                }
            }
            Family::FogLikeHaze => {
                let field = smooth_field(&mut rng, h, w);
                for ch in img.chunks_mut(plane) {
                    for (v, f) in ch.iter_mut().zip(&field) {
                        *v = ((1.0 - strength) * *v as f64 + strength * (0.55 + 0.35 * f)) as f32;
                    }
                }
            }
            Family::FrostLikeOverlay => {
                let pattern = crystals(&mut rng, h, w);
                for (ci, ch) in img.chunks_mut(plane).enumerate() {
                    let tint = [0.85, 0.9, 1.0][ci % 3];
                    for (v, p) in ch.iter_mut().zip(&pattern) {
                        *v = ((1.0 - strength) * *v as f64 + strength * tint * p) as f32;
                    }
                }
            }
            Family::SnowLikeSpeckle => {
                for i in 0..plane {
                    if rng.random::<f64>() < strength {
                        let b = rng.random_range(0.8f32..1.0);
                        for ch in 0..c {
                            img[ch * plane + i] = b;
                        }
                    }
                }
            }
            Family::Contrast => {
                let m = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
                img.iter_mut()
                    .for_each(|v| *v = (m + (1.0 - strength) * (*v as f64 - m)) as f32);
            }
            Family::Posterize => {
                let levels = (1.0 / strength).round();
                img.iter_mut()
                    .for_each(|v| *v = ((*v as f64 * levels).round() / levels) as f32);
            }
            Family::Solarize => {
                let a = strength as f32;
                img.iter_mut().for_each(|v| {
                    if *v > 0.5 {
                        *v += a * (1.0 - 2.0 * *v);
                    }
                });
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn blur(ch: &mut [f32], h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f32], dst: &mut [f32], horizontal: bool| {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let o = ki as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += k * src[yy as usize * w + xx as usize] as f64;
                }
                dst[y * w + x] = (acc / norm) as f32;
            }
        }
    };
    let mut tmp = vec![0f32; ch.len()];
    pass(ch, &mut tmp, true);
    pass(&tmp, ch, false);
}

/// Low-frequency field in `[−1, 1]`: bilinear interpolation of a 4×4 grid.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h - 1).max(1) as f64 * 3.0;
            let gx = x as f64 / (w - 1).max(1) as f64 * 3.0;
            let (y0, x0) = ((gy.floor() as usize).min(2), (gx.floor() as usize).min(2));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let g = |yy: usize, xx: usize| grid[yy * 4 + xx];
            out.push(
                g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + g(y0, x0 + 1) * (1.0 - fy) * fx
                    + g(y0 + 1, x0) * fy * (1.0 - fx)
                    + g(y0 + 1, x0 + 1) * fy * fx,
            );
        }
    }
    out
}

/// Sparse bright random walks standing in for ice crystals.
fn crystals(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut p = vec![0.3; h * w];
    for _ in 0..(h * w / 24).max(1) {
        let (mut y, mut x) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        for _ in 0..6 {
            p[y as usize * w + x as usize] = 1.0;
            y = (y + rng.random_range(-1i32..=1) as isize).clamp(0, h as isize - 1);
            x = (x + rng.random_range(-1i32..=1) as isize).clamp(0, w as isize - 1);
        }
    }
    p
}
