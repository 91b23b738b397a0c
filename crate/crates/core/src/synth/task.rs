//! Shape-versus-cue image classification tasks.
//!
//! Each image holds a 5×5 class glyph at a random interior position (the
//! semantic feature, spread over several patches) and a coloured one-pixel
//! border whose colour names a class (the shortcut, local to edge patches).
//! The border agrees with the label with probability `rho`; otherwise it
//! names one of the other classes uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const GLYPH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub image_side: usize,
    pub rho_id: f64,
    pub rho_ood: f64,
    pub n_train: usize,
    pub n_id_test: usize,
    pub n_ood_per_domain: usize,
    pub n_ood_domains: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 4,
            image_side: 16,
            rho_id: 0.8,
            rho_ood: 0.0,
            n_train: 2048,
            n_id_test: 512,
            n_ood_per_domain: 256,
            n_ood_domains: 4,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 8 {
            return Err(Error::arg("n_classes must lie in 2..=8"));
        }
        if self.image_side < GLYPH + 4 {
            return Err(Error::arg(format!("image side must be at least {}", GLYPH + 4)));
        }
        for (name, r) in [("rho_id", self.rho_id), ("rho_ood", self.rho_ood)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::arg(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.n_train == 0 || self.n_id_test == 0 || self.n_ood_per_domain == 0 {
            return Err(Error::arg("sample counts must be at least 1"));
        }
        Ok(())
    }
}

/// Look of the border cue in one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub id: String,
    pub rho: f64,
    /// Added to every class hue, in turns.
    pub hue_shift: f64,
    pub saturation: f64,
    pub brightness: f64,
}

impl DomainStyle {
    pub fn id_domain(rho: f64) -> Self {
        Self {
            id: "id".into(),
            rho,
            hue_shift: 0.0,
            saturation: 0.85,
            brightness: 0.9,
        }
    }

    /// The `i`-th held-out shifted domain.
    pub fn shifted(i: usize, rho: f64) -> Self {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        Self {
            id: format!("ood-{}", i + 1),
            rho,
            hue_shift: sign * 0.03 * (i / 2 + 1) as f64,
            saturation: 0.85 - 0.1 * (i % 3) as f64,
            brightness: 0.8 - 0.08 * i as f64 % 0.4,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// 5×5 glyph mask of class `c`.
pub fn glyph(c: usize) -> [[bool; GLYPH]; GLYPH] {
    let mut g = [[false; GLYPH]; GLYPH];
    for (r, row) in g.iter_mut().enumerate() {
        for (k, px) in row.iter_mut().enumerate() {
            *px = match c {
                0 => r == 2 || k == 2,
                1 => r == k || r + k == GLYPH - 1,
                2 => r == 0 || r == 4 || k == 0 || k == 4,
                3 => r % 2 == 0,
                4 => k % 2 == 0,
                5 => r == 0 || k == 0,
                6 => (r + k) % 2 == 0,
                _ => r == 4 || k == 4 || r == k,
            };
        }
    }
    g
}

/// Draws a cue class: the label with probability `rho`, else uniform over
/// the remaining classes.
fn draw_cue(rng: &mut ChaCha8Rng, label: usize, n: usize, rho: f64) -> usize {
    if rng.random::<f64>() < rho {
        label
    } else {
        let other = rng.random_range(0..n - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    }
}

/// `n` images of one domain.
pub fn gen_domain(spec: &TaskSpec, style: &DomainStyle, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_side;
    let nc = spec.n_classes;
    let palette: Vec<[f32; 3]> = (0..nc)
        .map(|c| hsv(c as f64 / nc as f64 + style.hue_shift, style.saturation, style.brightness))
        .collect();
    let mut pixels = vec![0f32; n * 3 * s * s];
    let mut labels = Vec::with_capacity(n);
    for img in pixels.chunks_mut(3 * s * s) {
        let label = rng.random_range(0..nc);
        let cue = draw_cue(&mut rng, label, nc, style.rho);
        for v in img.iter_mut() {
            *v = rng.random_range(0.0..0.25);
        }
        for y in 0..s {
            for x in 0..s {
                if y == 0 || x == 0 || y == s - 1 || x == s - 1 {
                    for (ch, col) in palette[cue].iter().enumerate() {
                        img[ch * s * s + y * s + x] = (col + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let oy = rng.random_range(2..=s - 2 - GLYPH);
        let ox = rng.random_range(2..=s - 2 - GLYPH);
        let ink: f32 = rng.random_range(0.75..1.0);
        for (r, row) in glyph(label).iter().enumerate() {
            for (k, &on) in row.iter().enumerate() {
                if on {
                    for ch in 0..3 {
                        img[ch * s * s + (oy + r) * s + ox + k] = ink;
                    }
                }
            }
        }
        labels.push(label as u16);
    }
    Dataset {
        id: style.id.clone(),
        channels: 3,
        height: s,
        width: s,
        pixels,
        labels,
        seed,
    }
}

/// Train split, ID test split and the held-out shifted domains.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood: Vec<Dataset>,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn gen_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let id = DomainStyle::id_domain(spec.rho_id);
    let mut train = gen_domain(spec, &id, spec.n_train, sub_seed(spec.seed, 1));
    train.id = "train".into();
    let mut id_test = gen_domain(spec, &id, spec.n_id_test, sub_seed(spec.seed, 2));
    id_test.id = "id-test".into();
    let ood = (0..spec.n_ood_domains)
        .map(|i| {
            gen_domain(
                spec,
                &DomainStyle::shifted(i, spec.rho_ood),
                spec.n_ood_per_domain,
                sub_seed(spec.seed, 100 + i as u64),
            )
        })
        .collect();
    Ok(TaskData { train, id_test, ood })
}
