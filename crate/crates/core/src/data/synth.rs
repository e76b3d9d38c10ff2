//! Procedural face-like images with label-dependent appearance, for smoke tests and demos
//! when the real face dataset is not at hand.
//!
//! Skin tone follows ethnicity, hair length follows gender, and forehead creases plus hair
//! greying follow age, so every label is learnable from the upper half of the image.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{InMemoryDataset, Split};
use super::image_ops::preprocess;
use super::labels::{Ethnicity, Gender, LabelTriple};
use super::mask::{apply_mask, MaskRanges};
use crate::error::Result;

const SKIN_TONES: [[u8; 3]; 5] = [
    [236, 200, 176],
    [92, 60, 44],
    [220, 180, 130],
    [160, 110, 76],
    [196, 150, 150],
];

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (f64::from(v) * f).round().clamp(0.0, 255.0) as u8)
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

/// Draws one `size x size` face for `label`; `seed` controls the nuisance factors.
pub fn synth_face(label: &LabelTriple, seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = f64::from(size);
    let bg = [rng.gen_range(20..90u8), rng.gen_range(20..90u8), rng.gen_range(20..90u8)];
    let skin = SKIN_TONES[label.ethnicity.index()].map(|v| {
        let j: i16 = rng.gen_range(-8..=8);
        (i16::from(v) + j).clamp(0, 255) as u8
    });
    let grey = (f64::from(label.age.saturating_sub(40)) / 60.0).min(1.0);
    let base_hair = [40.0, 28.0, 20.0];
    let hair = [0, 1, 2].map(|c| (base_hair[c] * (1.0 - grey) + 190.0 * grey) as u8);
    let cx = s / 2.0 + rng.gen_range(-0.03..=0.03) * s;
    let cy = s * 0.55;
    let (rx, ry) = (s * 0.30, s * 0.40);
    let creases = usize::from(label.age / 15);
    let crease_top = cy - ry * 0.62;

    let mut img = RgbImage::from_pixel(size, size, Rgb(bg));
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let in_face = in_ellipse(px, py, cx, cy, rx, ry);
            let long_hair = label.gender == Gender::Female
                && in_ellipse(px, py, cx, cy - ry * 0.05, rx * 1.3, ry * 1.12)
                && py < cy + ry * 0.6;
            let cap = in_ellipse(px, py, cx, cy - ry * 0.08, rx * 1.08, ry * 1.0) && py < cy - ry * 0.7;
            let mut color = if cap {
                hair
            } else if in_face {
                skin
            } else if long_hair {
                hair
            } else {
                bg
            };
            if in_face && !cap {
                let fy = py - crease_top;
                if (px - cx).abs() < rx * 0.5 && fy >= 0.0 && fy < (creases * 2) as f64 && (fy as usize) % 2 == 0 {
                    color = shade(skin, 0.7);
                }
                let eye_y = cy - ry * 0.15;
                for ex in [cx - rx * 0.4, cx + rx * 0.4] {
                    if in_ellipse(px, py, ex, eye_y, s * 0.045, s * 0.03) {
                        color = [20, 20, 30];
                    }
                }
                if (px - cx).abs() < s * 0.02 && py > cy && py < cy + ry * 0.25 {
                    color = shade(skin, 0.8);
                }
                if (px - cx).abs() < rx * 0.35 && (py - (cy + ry * 0.55)).abs() < s * 0.02 {
                    color = [150, 50, 60];
                }
            }
            let n: i16 = rng.gen_range(-5..=5);
            img.put_pixel(x, y, Rgb(color.map(|v| (i16::from(v) + n).clamp(0, 255) as u8)));
        }
    }
    img
}

/// Uniformly drawn labels with ages in `1..=90`.
pub fn random_labels(n: usize, seed: u64) -> Vec<LabelTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| LabelTriple {
            age: rng.gen_range(1..=90),
            gender: if rng.gen_bool(0.5) { Gender::Female } else { Gender::Male },
            ethnicity: Ethnicity::ALL[rng.gen_range(0..5)],
        })
        .collect()
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(6_364_136_223_846_793_005)
        .wrapping_add((i as u64).wrapping_mul(1_442_695_040_888_963_407).wrapping_add(1))
}

/// `n` preprocessed synthetic faces, optionally occluded with masks drawn from `masks`.
pub fn synth_dataset(n: usize, seed: u64, masks: Option<&MaskRanges>) -> Result<InMemoryDataset> {
    let labels = random_labels(n, seed);
    let mut images = Vec::with_capacity(n);
    for (i, label) in labels.iter().enumerate() {
        let s = sample_seed(seed, i);
        let mut img = synth_face(label, s, 48);
        if let Some(ranges) = masks {
            img = apply_mask(&img, &ranges.sample(s ^ 0x5555))?;
        }
        images.push(preprocess(&img));
    }
    InMemoryDataset::new(images, labels)
}

/// Writes `root/part{1,2,3}/<age>_<gender>_<race>_<index>.png` with `counts[part - 1]` images each.
pub fn write_synth_tree(root: &Path, counts: [usize; 3], seed: u64, size: u32) -> Result<()> {
    for (k, split) in [Split::Train, Split::Test, Split::Val].into_iter().enumerate() {
        let dir = root.join(split.dir_name());
        std::fs::create_dir_all(&dir)?;
        let part_seed = sample_seed(seed, 1_000_000 + k);
        for (i, label) in random_labels(counts[k], part_seed).iter().enumerate() {
            let img = synth_face(label, sample_seed(part_seed, i), size);
            let path = dir.join(format!("{label}_{i:08}.png"));
            img.save(&path).map_err(|source| crate::error::Error::Image { path, source })?;
        }
    }
    Ok(())
}
