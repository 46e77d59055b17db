//! Raw-image augmentations that keep every pixel on its original band, plus
//! the naive mosaic flips they replace.
//!
//! Geometric operations are traced: the operation is run on an image whose
//! values are pixel indices, which yields for every output pixel the source
//! pixel it was copied from. [`verify_pattern`] uses that provenance to check
//! that no value moved to a pixel of a different band.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msfa::{pixel_shuffle, pixel_unshuffle, MsfaPattern, PlaneCube, RawImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftAxis {
    X,
    Y,
}

/// For every output pixel, the flat index of the source pixel it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub src_width: usize,
    pub src_height: usize,
    pub sources: Vec<usize>,
}

impl Provenance {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            src_width: width,
            src_height: height,
            sources: (0..width * height).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: RawImage,
    pub provenance: Provenance,
}

impl Augmented {
    pub fn verify(&self) -> bool {
        verify_pattern(&self.image, &self.provenance)
    }
}

impl From<Augmented> for RawImage {
    fn from(a: Augmented) -> Self {
        a.image
    }
}

/// True iff every augmented pixel was copied from a source pixel of the same band.
pub fn verify_pattern(img: &RawImage, provenance: &Provenance) -> bool {
    if provenance.sources.len() != img.width() * img.height() {
        return false;
    }
    let pattern = img.pattern();
    provenance.sources.iter().enumerate().all(|(k, &src)| {
        let (x, y) = (k % img.width(), k / img.width());
        let (sx, sy) = (src % provenance.src_width, src / provenance.src_width);
        sy < provenance.src_height && pattern.band_at_pixel(x, y) == pattern.band_at_pixel(sx, sy)
    })
}

/// Runs a value-agnostic rearrangement on an index image and applies the
/// resulting source map to `img`.
fn traced(img: &RawImage, rearrange: impl Fn(&RawImage) -> RawImage) -> Augmented {
    let (w, h) = (img.width(), img.height());
    let index = RawImage::new(img.pattern_arc().clone(), h, w, (0..w * h).map(|k| k as f64).collect())
        .expect("index image has the source geometry");
    let moved = rearrange(&index);
    debug_assert_eq!((moved.width(), moved.height()), (w, h));
    let sources: Vec<usize> = moved.data().iter().map(|&v| v as usize).collect();
    let data = sources.iter().map(|&s| img.data()[s]).collect();
    Augmented {
        image: RawImage::from_parts(img.pattern_arc().clone(), h, w, data),
        provenance: Provenance {
            src_width: w,
            src_height: h,
            sources,
        },
    }
}

fn remap_planes(cube: &PlaneCube, source_of: impl Fn(usize, usize) -> (usize, usize)) -> PlaneCube {
    let (rows, cols) = (cube.rows(), cube.cols());
    let mut data = Vec::with_capacity(cube.data().len());
    for b in 0..cube.channels() {
        let plane = cube.channel(b);
        for y in 0..rows {
            for x in 0..cols {
                let (sx, sy) = source_of(x, y);
                data.push(plane[sy * cols + sx]);
            }
        }
    }
    PlaneCube::new(cube.pattern_arc().clone(), cube.channels(), rows, cols, data)
        .expect("remapping keeps the cube geometry")
}

fn flip_planes(cube: &PlaneCube, axis: FlipAxis) -> PlaneCube {
    let (rows, cols) = (cube.rows(), cube.cols());
    match axis {
        FlipAxis::Horizontal => remap_planes(cube, |x, y| (cols - 1 - x, y)),
        FlipAxis::Vertical => remap_planes(cube, |x, y| (x, rows - 1 - y)),
    }
}

/// Flip of the unshuffled planes, shuffled back onto the mosaic.
pub fn preserving_flip(img: &RawImage, axis: FlipAxis) -> Augmented {
    traced(img, |i| pixel_shuffle(&flip_planes(&pixel_unshuffle(i), axis)))
}

/// Direct mirror of the mosaic. Moves values onto other bands whenever the
/// basic pattern is not itself symmetric.
pub fn naive_flip(img: &RawImage, axis: FlipAxis) -> Augmented {
    let (w, h) = (img.width(), img.height());
    traced(img, |i| {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = match axis {
                    FlipAxis::Horizontal => (w - 1 - x, y),
                    FlipAxis::Vertical => (x, h - 1 - y),
                };
                data.push(i.get(sx, sy));
            }
        }
        RawImage::from_parts(i.pattern_arc().clone(), h, w, data)
    })
}

/// Cyclic shift of the mosaic by an arbitrary number of pixels. Only shifts
/// by multiples of the pattern width preserve the band map.
pub fn cyclic_shift(img: &RawImage, axis: ShiftAxis, pixels: isize) -> Augmented {
    let (w, h) = (img.width(), img.height());
    traced(img, |i| {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = match axis {
                    ShiftAxis::X => ((x as isize - pixels).rem_euclid(w as isize) as usize, y),
                    ShiftAxis::Y => (x, (y as isize - pixels).rem_euclid(h as isize) as usize),
                };
                data.push(i.get(sx, sy));
            }
        }
        RawImage::from_parts(i.pattern_arc().clone(), h, w, data)
    })
}

/// Cyclic shift by `step_patterns * B` pixels; content leaving one edge
/// re-enters at the other.
pub fn preserving_translate(img: &RawImage, axis: ShiftAxis, step_patterns: isize) -> Result<Augmented> {
    let b = img.pattern().width() as isize;
    let extent = match axis {
        ShiftAxis::X => img.width(),
        ShiftAxis::Y => img.height(),
    } as isize;
    let pixels = step_patterns * b;
    if pixels.abs() >= extent {
        return Err(Error::Range(format!(
            "translation by {step_patterns} patterns ({pixels} px) does not fit a {extent} px extent"
        )));
    }
    Ok(cyclic_shift(img, axis, pixels))
}

/// Overwrites `round(fraction * cells)` pattern-aligned `B x B` blocks with
/// blocks copied from other uniformly chosen positions of the original image.
pub fn texture_remodel(img: &RawImage, fraction: f64, seed: u64) -> Result<Augmented> {
    remodel(img, fraction, seed, true)
}

/// Remodeling whose source blocks start off the pattern grid, so copied
/// values land on pixels of other bands. Kept for ablations.
pub fn naive_remodel(img: &RawImage, fraction: f64, seed: u64) -> Result<Augmented> {
    remodel(img, fraction, seed, false)
}

fn remodel(img: &RawImage, fraction: f64, seed: u64, aligned: bool) -> Result<Augmented> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("remodel fraction {fraction} outside (0, 1]")));
    }
    let b = img.pattern().width();
    let (w, h) = (img.width(), img.height());
    let (cells_x, cells_y) = img.cells();
    let cells = cells_x * cells_y;
    let count = (fraction * cells as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // top-left source pixel of every destination block
    let mut block_source: Vec<(usize, usize)> = (0..cells).map(|k| ((k % cells_x) * b, (k / cells_x) * b)).collect();
    if cells > 1 && count > 0 {
        for dst in sample(&mut rng, cells, count.min(cells)) {
            if aligned {
                let mut src = rng.random_range(0..cells - 1);
                if src >= dst {
                    src += 1;
                }
                block_source[dst] = ((src % cells_x) * b, (src / cells_x) * b);
            } else if b > 1 {
                let (mut sx, sy) = (rng.random_range(0..=w - b), rng.random_range(0..=h - b));
                if sx % b == 0 && sy % b == 0 {
                    // nudge onto the neighbouring off-grid position
                    sx = if sx + 1 <= w - b { sx + 1 } else { sx - 1 };
                }
                block_source[dst] = (sx, sy);
            }
        }
    }
    Ok(traced(img, |i| {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = block_source[(y / b) * cells_x + x / b];
                data.push(i.get(sx + x % b, sy + y % b));
            }
        }
        RawImage::from_parts(i.pattern_arc().clone(), h, w, data)
    }))
}

/// Adds seeded i.i.d. normal noise to every raw value, clamping below at 0.
pub fn gaussian_noise(img: &RawImage, mu: f64, sigma: f64, seed: u64) -> Result<Augmented> {
    if !(sigma >= 0.0) || !mu.is_finite() {
        return Err(Error::Parameter(format!("noise needs finite mu and sigma >= 0, got mu={mu} sigma={sigma}")));
    }
    let normal = Normal::new(mu, sigma)
        .map_err(|e| Error::Parameter(format!("noise mu={mu} sigma={sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| (v + normal.sample(&mut rng)).max(0.0))
        .collect();
    Ok(Augmented {
        image: RawImage::from_parts(img.pattern_arc().clone(), img.height(), img.width(), data),
        provenance: Provenance::identity(img.width(), img.height()),
    })
}

/// Source position of output `(x, y)` under the radial model
/// `r' = r (1 + k1 r^2)`, radii normalized by the larger half-extent.
/// Nearest-neighbor, clamped to the plane.
pub fn radial_source(x: usize, y: usize, rows: usize, cols: usize, k1: f64) -> (usize, usize) {
    let cx = (cols as f64 - 1.0) / 2.0;
    let cy = (rows as f64 - 1.0) / 2.0;
    let norm = cx.max(cy);
    if norm == 0.0 {
        return (x, y);
    }
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    let r2 = (dx * dx + dy * dy) / (norm * norm);
    let factor = 1.0 + k1 * r2;
    let sx = (cx + dx * factor).round().clamp(0.0, cols as f64 - 1.0) as usize;
    let sy = (cy + dy * factor).round().clamp(0.0, rows as f64 - 1.0) as usize;
    (sx, sy)
}

/// Radial distortion applied to each unshuffled band plane separately, so
/// no value crosses bands.
pub fn optical_distortion(img: &RawImage, k1: f64) -> Result<Augmented> {
    if !(k1.abs() <= 0.5) {
        return Err(Error::Parameter(format!("distortion coefficient {k1} outside [-0.5, 0.5]")));
    }
    Ok(traced(img, |i| {
        let cube = pixel_unshuffle(i);
        let (rows, cols) = (cube.rows(), cube.cols());
        pixel_shuffle(&remap_planes(&cube, |x, y| radial_source(x, y, rows, cols, k1)))
    }))
}

fn default_fraction() -> f64 {
    0.1
}

fn default_sigma() -> f64 {
    0.25
}

fn default_k1() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    Hflip,
    Vflip,
    TranslateX {
        step: isize,
    },
    TranslateY {
        step: isize,
    },
    Remodel {
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
    GaussianNoise {
        #[serde(default)]
        mu: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    OpticalDistortion {
        #[serde(default = "default_k1")]
        k1: f64,
    },
    /// Pattern-breaking variants, kept for ablations.
    NaiveHflip,
    NaiveVflip,
    NaiveShiftX {
        pixels: isize,
    },
    NaiveShiftY {
        pixels: isize,
    },
    NaiveRemodel {
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(flatten)]
    pub kind: AugmentKind,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn is_pattern_preserving(&self) -> bool {
        !matches!(
            self.kind,
            AugmentKind::NaiveHflip
                | AugmentKind::NaiveVflip
                | AugmentKind::NaiveShiftX { .. }
                | AugmentKind::NaiveShiftY { .. }
                | AugmentKind::NaiveRemodel { .. }
        )
    }

    pub fn apply(&self, img: &RawImage) -> Result<Augmented> {
        match self.kind {
            AugmentKind::Hflip => Ok(preserving_flip(img, FlipAxis::Horizontal)),
            AugmentKind::Vflip => Ok(preserving_flip(img, FlipAxis::Vertical)),
            AugmentKind::TranslateX { step } => preserving_translate(img, ShiftAxis::X, step),
            AugmentKind::TranslateY { step } => preserving_translate(img, ShiftAxis::Y, step),
            AugmentKind::Remodel { fraction } => texture_remodel(img, fraction, self.seed),
            AugmentKind::GaussianNoise { mu, sigma } => gaussian_noise(img, mu, sigma, self.seed),
            AugmentKind::OpticalDistortion { k1 } => optical_distortion(img, k1),
            AugmentKind::NaiveHflip => Ok(naive_flip(img, FlipAxis::Horizontal)),
            AugmentKind::NaiveVflip => Ok(naive_flip(img, FlipAxis::Vertical)),
            AugmentKind::NaiveShiftX { pixels } => Ok(cyclic_shift(img, ShiftAxis::X, pixels)),
            AugmentKind::NaiveShiftY { pixels } => Ok(cyclic_shift(img, ShiftAxis::Y, pixels)),
            AugmentKind::NaiveRemodel { fraction } => naive_remodel(img, fraction, self.seed),
        }
    }
}

/// Whether a pattern maps onto itself under a naive mosaic flip.
pub fn pattern_is_flip_symmetric(pattern: &MsfaPattern, axis: FlipAxis) -> bool {
    let b = pattern.width();
    (0..b).all(|j| {
        (0..b).all(|i| {
            let (fi, fj) = match axis {
                FlipAxis::Horizontal => (b - 1 - i, j),
                FlipAxis::Vertical => (i, b - 1 - j),
            };
            pattern.band_at_cell(i, j) == pattern.band_at_cell(fi, fj)
        })
    })
}
