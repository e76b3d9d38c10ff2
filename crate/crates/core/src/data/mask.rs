//! Geometric mask occluder: a bottom-anchored convex quadrilateral filled with a texture.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const COVERAGE_MIN: f64 = 0.35;
pub const COVERAGE_MAX: f64 = 0.55;
/// Maximum jitter as a fraction of image height.
pub const MAX_JITTER_FRACTION: f64 = 0.10;
pub const MIN_IMAGE_SIDE: u32 = 32;
pub const STRIPE_ROWS: u32 = 4;
/// Additive speckle amplitude as a fraction of full scale.
pub const SPECKLE_AMPLITUDE: f64 = 0.15;

pub const SURGICAL_BLUE: [u8; 3] = [70, 130, 180];
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];
pub const PALETTE: [[u8; 3]; 3] = [SURGICAL_BLUE, WHITE, BLACK];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    Flat,
    Striped,
    Speckle,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Flat, Texture::Striped, Texture::Speckle];

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Flat => "flat",
            Texture::Striped => "striped",
            Texture::Speckle => "speckle",
        }
    }
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Texture::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument {
                op: "texture",
                reason: format!("unknown texture `{s}`"),
            })
    }
}

/// Parameters of one synthetic mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    /// Fraction of the image height covered, measured from the bottom edge.
    pub coverage: f64,
    pub color: [u8; 3],
    pub texture: Texture,
    /// Maximum random offset, in pixels, applied to each top corner.
    pub top_jitter: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            coverage: 0.45,
            color: SURGICAL_BLUE,
            texture: Texture::Flat,
            top_jitter: 2.0,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, height: u32) -> Result<()> {
        if !(COVERAGE_MIN..=COVERAGE_MAX).contains(&self.coverage) {
            return Err(Error::InvalidArgument {
                op: "apply_mask",
                reason: format!(
                    "coverage {} outside [{COVERAGE_MIN}, {COVERAGE_MAX}]",
                    self.coverage
                ),
            });
        }
        let max_jitter = MAX_JITTER_FRACTION * f64::from(height);
        if !(0.0..=max_jitter).contains(&self.top_jitter) {
            return Err(Error::InvalidArgument {
                op: "apply_mask",
                reason: format!("jitter {} outside [0, {max_jitter}]", self.top_jitter),
            });
        }
        Ok(())
    }

    /// Second stripe colour: the first palette entry that differs from `color`.
    pub fn secondary_color(&self) -> [u8; 3] {
        PALETTE
            .into_iter()
            .find(|&c| c != self.color)
            .unwrap_or(BLACK)
    }

    /// Corners in order top-left, top-right, bottom-right, bottom-left, in pixel coordinates
    /// where the image spans `[0, w] x [0, h]`.
    pub fn quad(&self, width: u32, height: u32) -> [(f64, f64); 4] {
        let (w, h) = (f64::from(width), f64::from(height));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut jitter = || {
            if self.top_jitter > 0.0 {
                rng.gen_range(-self.top_jitter..=self.top_jitter)
            } else {
                0.0
            }
        };
        let top = h * (1.0 - self.coverage);
        let tl = (0.12 * w + jitter(), top + jitter());
        let tr = (0.88 * w + jitter(), top + jitter());
        [tl, tr, (0.78 * w, h), (0.22 * w, h)]
    }
}

/// Ranges from which per-image masks are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRanges {
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub colors: Vec<[u8; 3]>,
    pub textures: Vec<Texture>,
    pub top_jitter: f64,
}

impl Default for MaskRanges {
    fn default() -> Self {
        Self {
            coverage_min: COVERAGE_MIN,
            coverage_max: COVERAGE_MAX,
            colors: PALETTE.to_vec(),
            textures: Texture::ALL.to_vec(),
            top_jitter: 2.0,
        }
    }
}

impl MaskRanges {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument { op: "mask ranges", reason };
        if !(COVERAGE_MIN..=COVERAGE_MAX).contains(&self.coverage_min)
            || !(COVERAGE_MIN..=COVERAGE_MAX).contains(&self.coverage_max)
            || self.coverage_min > self.coverage_max
        {
            return Err(bad(format!(
                "coverage range [{}, {}] must lie within [{COVERAGE_MIN}, {COVERAGE_MAX}]",
                self.coverage_min, self.coverage_max
            )));
        }
        if self.colors.is_empty() || self.textures.is_empty() {
            return Err(bad("colors and textures must be non-empty".into()));
        }
        if self.top_jitter < 0.0 {
            return Err(bad("jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws one spec; the result depends only on `seed`.
    pub fn sample(&self, seed: u64) -> MaskSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coverage = if self.coverage_max > self.coverage_min {
            rng.gen_range(self.coverage_min..=self.coverage_max)
        } else {
            self.coverage_min
        };
        MaskSpec {
            coverage,
            color: self.colors[rng.gen_range(0..self.colors.len())],
            texture: self.textures[rng.gen_range(0..self.textures.len())],
            top_jitter: self.top_jitter,
            seed: rng.gen(),
        }
    }
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice.abs() / 2.0
}

/// True when every turn of the closed polygon has the same orientation.
pub fn is_convex(points: &[(f64, f64)]) -> bool {
    let n = points.len();
    let crosses: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b, c) = (points[i], points[(i + 1) % n], points[(i + 2) % n]);
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0)
        })
        .collect();
    crosses.iter().all(|&c| c >= 0.0) || crosses.iter().all(|&c| c <= 0.0)
}

fn inside_convex(quad: &[(f64, f64); 4], x: f64, y: f64) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b) = (quad[i], quad[(i + 1) % 4]);
        let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Boolean coverage of each pixel centre, row-major.
pub fn mask_coverage(spec: &MaskSpec, width: u32, height: u32) -> Vec<bool> {
    let quad = spec.quad(width, height);
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| inside_convex(&quad, f64::from(x) + 0.5, f64::from(y) + 0.5))
        .collect()
}

/// Paints the mask onto a copy of `img`. Pixels outside the quadrilateral are untouched.
pub fn apply_mask(img: &RgbImage, spec: &MaskSpec) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(Error::InvalidArgument {
            op: "apply_mask",
            reason: format!("image {w}x{h} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"),
        });
    }
    spec.validate(h)?;
    let covered = mask_coverage(spec, w, h);
    let secondary = spec.secondary_color();
    // separate stream from the geometry draw
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if !covered[(y * w + x) as usize] {
                continue;
            }
            let px = match spec.texture {
                Texture::Flat => spec.color,
                Texture::Striped => {
                    if (y / STRIPE_ROWS) % 2 == 0 {
                        spec.color
                    } else {
                        secondary
                    }
                }
                Texture::Speckle => {
                    let delta = noise.gen_range(-SPECKLE_AMPLITUDE..=SPECKLE_AMPLITUDE) * 255.0;
                    spec.color.map(|c| (f64::from(c) + delta).round().clamp(0.0, 255.0) as u8)
                }
            };
            out.put_pixel(x, y, Rgb(px));
        }
    }
    Ok(out)
}

const COLOR_NAMES: [(&str, [u8; 3]); 3] = [("blue", SURGICAL_BLUE), ("white", WHITE), ("black", BLACK)];

/// Palette name or `#rrggbb`.
pub fn parse_color(s: &str) -> Result<[u8; 3]> {
    let s = s.trim();
    if let Some((_, c)) = COLOR_NAMES.iter().find(|(n, _)| n.eq_ignore_ascii_case(s)) {
        return Ok(*c);
    }
    let bad = || Error::InvalidArgument {
        op: "color",
        reason: format!("expected blue, white, black or #rrggbb, got `{s}`"),
    };
    let hex = s.strip_prefix('#').filter(|h| h.len() == 6 && h.is_ascii()).ok_or_else(bad)?;
    let mut out = [0u8; 3];
    for (i, v) in out.iter_mut().enumerate() {
        *v = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Inverse of [`parse_color`]; palette colours get their name.
pub fn color_name(c: [u8; 3]) -> String {
    match COLOR_NAMES.iter().find(|(_, v)| *v == c) {
        Some((n, _)) => n.to_string(),
        None => format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([200, (x * 3 % 256) as u8, (y * 5 % 256) as u8]))
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = MaskSpec {
            coverage: 0.45,
            color: WHITE,
            seed: 7,
            ..MaskSpec::default()
        };
        let img = gradient(48, 48);
        assert_eq!(apply_mask(&img, &spec).unwrap(), apply_mask(&img, &spec).unwrap());
    }

    #[test]
    fn upper_rows_untouched_at_min_coverage() {
        let img = gradient(64, 64);
        for seed in 0..20 {
            let spec = MaskSpec {
                coverage: 0.35,
                top_jitter: 6.4,
                texture: Texture::Speckle,
                seed,
                ..MaskSpec::default()
            };
            let out = apply_mask(&img, &spec).unwrap();
            let keep = (0.45 * 64.0) as u32;
            for y in 0..keep {
                for x in 0..64 {
                    assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_coverage_and_small_images() {
        let spec = MaskSpec {
            coverage: 0.6,
            ..MaskSpec::default()
        };
        assert!(apply_mask(&gradient(48, 48), &spec).is_err());
        assert!(apply_mask(&gradient(16, 16), &MaskSpec::default()).is_err());
        let spec = MaskSpec {
            top_jitter: 10.0,
            ..MaskSpec::default()
        };
        assert!(apply_mask(&gradient(48, 48), &spec).is_err());
    }

    #[test]
    fn texture_histograms() {
        let img = gradient(48, 48);
        let region = |tex: Texture, color: [u8; 3]| -> HashSet<[u8; 3]> {
            let spec = MaskSpec {
                texture: tex,
                color,
                seed: 3,
                ..MaskSpec::default()
            };
            let out = apply_mask(&img, &spec).unwrap();
            let cov = mask_coverage(&spec, 48, 48);
            out.pixels()
                .zip(cov)
                .filter(|(_, c)| *c)
                .map(|(p, _)| p.0)
                .collect()
        };
        assert_eq!(region(Texture::Flat, SURGICAL_BLUE).len(), 1);
        assert!(region(Texture::Speckle, SURGICAL_BLUE).len() >= 2);
        assert!(region(Texture::Speckle, BLACK).len() >= 2);
        assert_eq!(region(Texture::Striped, WHITE).len(), 2);
    }

    #[test]
    fn quad_is_convex_and_anchored() {
        for seed in 0..50 {
            let spec = MaskSpec {
                coverage: 0.35 + (seed as f64 % 5.0) * 0.05,
                top_jitter: 4.8,
                seed,
                ..MaskSpec::default()
            };
            let q = spec.quad(48, 48);
            assert!(is_convex(&q));
            assert_eq!(q[2].1, 48.0);
            assert_eq!(q[3].1, 48.0);
        }
    }

    #[test]
    fn color_names_round_trip() {
        for c in [SURGICAL_BLUE, WHITE, BLACK, [1, 2, 250]] {
            assert_eq!(parse_color(&color_name(c)).unwrap(), c);
        }
        assert_eq!(parse_color("Blue").unwrap(), SURGICAL_BLUE);
        assert!(parse_color("#12345").is_err());
        assert!(parse_color("red").is_err());
    }
}
