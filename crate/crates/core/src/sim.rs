//! Radiance simulation under narrow-band illumination, procedural texture
//! scenes and the top/bottom patch protocol.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msfa::{mosaic, FullImage, MsfaPattern, RawImage};

/// Relative spectral power distribution sampled at increasing wavelengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Illuminant {
    name: String,
    samples: Vec<(f64, f64)>,
}

impl Illuminant {
    pub fn new(name: impl Into<String>, samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Parameter("an illuminant needs at least 2 samples".into()));
        }
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Parameter("illuminant wavelengths must be strictly increasing".into()));
        }
        if samples.iter().any(|&(_, p)| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Parameter("illuminant powers must be finite and non-negative".into()));
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    /// Equal-energy illuminant over 400-1000 nm.
    pub fn flat_white() -> Self {
        Self::new("flat-white", vec![(400.0, 1.0), (1000.0, 1.0)]).unwrap()
    }

    /// Stand-in for extended illuminant A: a 2856 K blackbody, whose power
    /// rises monotonically across 400-1000 nm.
    pub fn warm() -> Self {
        const C2: f64 = 1.438_776_877e7; // second radiation constant, nm*K
        let t = 2856.0;
        let planck = |l: f64| l.powi(-5) / ((C2 / (l * t)).exp() - 1.0);
        let peak = planck(1000.0);
        let samples = (0..=60)
            .map(|k| {
                let l = 400.0 + 10.0 * k as f64;
                (l, planck(l) / peak)
            })
            .collect();
        Self::new("warm", samples).unwrap()
    }

    /// Stand-in for a D65 simulator: flat with a mild lift below 550 nm.
    pub fn daylight() -> Self {
        let samples = (0..=60)
            .map(|k| {
                let l = 400.0 + 10.0 * k as f64;
                (l, 1.0 + 0.3 * ((550.0 - l) / 150.0).max(0.0))
            })
            .collect();
        Self::new("daylight", samples).unwrap()
    }

    pub fn builtin_names() -> [&'static str; 3] {
        ["flat-white", "warm", "daylight"]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "flat-white" => Ok(Self::flat_white()),
            "warm" => Ok(Self::warm()),
            "daylight" => Ok(Self::daylight()),
            other => Err(Error::Parameter(format!(
                "unknown illuminant {other:?} (expected flat-white, warm or daylight)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Linearly interpolated relative power at `wavelength`.
    pub fn power_at(&self, wavelength: f64) -> Result<f64> {
        let (lo, hi) = (self.samples[0].0, self.samples[self.samples.len() - 1].0);
        if !(wavelength >= lo && wavelength <= hi) {
            return Err(Error::Range(format!(
                "wavelength {wavelength} nm outside illuminant {:?} range [{lo}, {hi}]",
                self.name
            )));
        }
        let k = self.samples.partition_point(|&(l, _)| l <= wavelength);
        if k == self.samples.len() {
            return Ok(self.samples[k - 1].1);
        }
        let (l0, p0) = self.samples[k - 1];
        let (l1, p1) = self.samples[k];
        let t = (wavelength - l0) / (l1 - l0);
        Ok(p0 + t * (p1 - p0))
    }
}

/// Per-band illumination vector of `ill` at the band centers of `pattern`,
/// scaled so that its largest entry is 1.
pub fn illuminant_vector(ill: &Illuminant, pattern: &MsfaPattern) -> Result<Vec<f64>> {
    let raw = pattern
        .wavelengths()
        .iter()
        .map(|&l| ill.power_at(l))
        .collect::<Result<Vec<_>>>()?;
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Range(format!(
            "illuminant {:?} has no power at the {} band centers",
            ill.name(),
            pattern.id()
        )));
    }
    Ok(raw.into_iter().map(|v| v / max).collect())
}

/// Fully-defined reflectance image with values in `[0, 1]`, one channel per band.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCube(FullImage);

impl SceneCube {
    pub fn new(full: FullImage) -> Result<Self> {
        if let Some(v) = full.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::Range(format!("reflectance {v} outside [0, 1]")));
        }
        Ok(Self(full))
    }

    /// Builds a scene from a hyperspectral reflectance cube by keeping, for
    /// each band, the channel whose wavelength is closest to the band center.
    pub fn from_nearest_channels(
        pattern: impl Into<Arc<MsfaPattern>>,
        channel_wavelengths: &[f64],
        height: usize,
        width: usize,
        data: &[f64],
    ) -> Result<Self> {
        let pattern = pattern.into();
        let plane = height * width;
        if channel_wavelengths.is_empty() || data.len() != channel_wavelengths.len() * plane {
            return Err(Error::Structure(format!(
                "{} channels of {width}x{height} do not match {} values",
                channel_wavelengths.len(),
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(pattern.bands() * plane);
        for &center in pattern.wavelengths() {
            let k = channel_wavelengths
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - center).abs().total_cmp(&(b.1 - center).abs()))
                .map(|(k, _)| k)
                .unwrap();
            out.extend_from_slice(&data[k * plane..(k + 1) * plane]);
        }
        Self::new(FullImage::new(pattern.clone(), pattern.bands(), height, width, out)?)
    }

    pub fn image(&self) -> &FullImage {
        &self.0
    }

    pub fn pattern(&self) -> &MsfaPattern {
        self.0.pattern()
    }

    pub fn into_inner(self) -> FullImage {
        self.0
    }
}

/// Raw radiance of `scene` under a per-band illumination vector.
pub fn render_with_vector(scene: &SceneCube, illumination: &[f64]) -> Result<RawImage> {
    let pattern = scene.pattern();
    if illumination.len() != pattern.bands() {
        return Err(Error::Structure(format!(
            "illumination vector has {} entries for {} bands",
            illumination.len(),
            pattern.bands()
        )));
    }
    if illumination.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Range("illumination entries must be non-negative".into()));
    }
    let raw = mosaic(scene.image())?;
    let (h, w) = (raw.height(), raw.width());
    let mut data = raw.into_data();
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] *= illumination[pattern.band_at_pixel(x, y)];
        }
    }
    RawImage::new(scene.image().pattern_arc().clone(), h, w, data)
}

/// Raw radiance of `scene` under `ill`.
pub fn render_raw(scene: &SceneCube, ill: &Illuminant) -> Result<RawImage> {
    render_with_vector(scene, &illuminant_vector(ill, scene.pattern())?)
}

/// Stationary procedural texture with values in `[0, 1]`.
#[derive(Debug, Clone)]
enum Texture {
    /// Two gratings mirrored about the x axis.
    Grating { fx: f64, fy: f64, phase: [f64; 2] },
    /// Axis-aligned soft checkerboard.
    Checker { cell: f64, softness: f64 },
    Noise { cell: f64, lattice_w: usize, lattice: Vec<f64> },
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, family: usize, height: usize, width: usize) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        match family % 3 {
            0 => {
                let period = rng.random_range(12.0..40.0);
                let f = std::f64::consts::TAU / period;
                Texture::Grating {
                    fx: f * theta.cos(),
                    fy: f * theta.sin(),
                    phase: [
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    ],
                }
            }
            1 => Texture::Checker {
                cell: rng.random_range(8.0..24.0),
                softness: rng.random_range(0.15..0.4),
            },
            _ => {
                let cell: f64 = rng.random_range(10.0..32.0);
                let lattice_w = (width as f64 / cell).ceil() as usize + 2;
                let lattice_h = (height as f64 / cell).ceil() as usize + 2;
                let lattice = (0..lattice_w * lattice_h).map(|_| rng.random::<f64>()).collect();
                Texture::Noise {
                    cell,
                    lattice_w,
                    lattice,
                }
            }
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Texture::Grating { fx, fy, phase } => {
                0.5 + 0.25 * ((fx * x + fy * y + phase[0]).sin() + (fx * x - fy * y + phase[1]).sin())
            }
            Texture::Checker { cell, softness } => {
                let pi = std::f64::consts::PI;
                let s = (pi * x / cell).sin() * (pi * y / cell).sin();
                0.5 + 0.5 * (s / softness).tanh()
            }
            Texture::Noise {
                cell,
                lattice_w,
                lattice,
            } => {
                let (gx, gy) = (x / cell, y / cell);
                let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
                let at = |i: usize, j: usize| lattice[j * lattice_w + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                top * (1.0 - ty) + bottom * ty
            }
        }
    }
}

/// Deterministic procedural texture scenes, one per class.
///
/// Each class mixes two stationary textures (gratings, soft checkerboards or
/// value noise). One texture dominates the short-wavelength half of the
/// pattern's bands, the other the long-wavelength half, and an overall
/// class-specific reflectance profile scales every band. Classes come in
/// pairs that share both textures but swap which spectral half carries
/// which, so those pairs differ only through spatio-spectral arrangement.
/// Mirroring a texture yields another sample of the same texture, the
/// assumption flip augmentation rests on.
pub fn synth_textures(
    num_classes: usize,
    height: usize,
    width: usize,
    pattern: &MsfaPattern,
    seed: u64,
) -> Result<Vec<SceneCube>> {
    if num_classes == 0 {
        return Err(Error::Parameter("at least one class is required".into()));
    }
    let b = pattern.width();
    if height == 0 || width == 0 || height % b != 0 || width % b != 0 {
        return Err(Error::Structure(format!(
            "scene {width}x{height} is not a multiple of the {b}x{b} basic pattern"
        )));
    }
    let pattern = Arc::new(pattern.clone());
    let wl = pattern.wavelengths();
    let (lo, hi) = wl.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    let span = (hi - lo).max(1.0);

    let mut scenes = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let pair = (class / 2) as u64;
        let mut pair_rng = ChaCha8Rng::seed_from_u64(seed ^ pair.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let first_family = pair_rng.random_range(0..3usize);
        let second_family = first_family + pair_rng.random_range(1..3usize);
        let t1 = Texture::random(&mut pair_rng, first_family, height, width);
        let t2 = Texture::random(&mut pair_rng, second_family, height, width);
        let split = lo + span * pair_rng.random_range(0.4..0.6);

        let mut class_rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_add(0xD1B5_4A32_D192_ED03) ^ (class as u64).wrapping_mul(0xA24B_AED4_963E_E407),
        );
        // smooth reflectance level: a random linear trend plus one bump
        let level0 = class_rng.random_range(0.35..1.0);
        let level1 = class_rng.random_range(0.35..1.0);
        let bump_center = lo + span * class_rng.random_range(0.0..1.0);
        let bump_height = class_rng.random_range(-0.25..0.25);
        let profile: Vec<f64> = wl
            .iter()
            .map(|&l| {
                let t = (l - lo) / span;
                let g = (-((l - bump_center) / (0.2 * span)).powi(2)).exp();
                (level0 + (level1 - level0) * t + bump_height * g).clamp(0.2, 1.0)
            })
            .collect();

        let plane = height * width;
        let mut data = vec![0.0; pattern.bands() * plane];
        for y in 0..height {
            for x in 0..width {
                let (a, c) = (t1.eval(x as f64, y as f64), t2.eval(x as f64, y as f64));
                let (short, long) = if class % 2 == 0 { (a, c) } else { (c, a) };
                for band in 0..pattern.bands() {
                    let w_short = 1.0 / (1.0 + ((wl[band] - split) / (0.08 * span)).exp());
                    let mix = w_short * short + (1.0 - w_short) * long;
                    data[band * plane + y * width + x] = profile[band] * (0.3 + 0.7 * mix);
                }
            }
        }
        scenes.push(SceneCube::new(FullImage::new(
            pattern.clone(),
            pattern.bands(),
            height,
            width,
            data,
        )?)?);
    }
    Ok(scenes)
}

/// Which horizontal half of an image a patch set is cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn role(self) -> Role {
        match self {
            Split::Top => Role::Train,
            Split::Bottom => Role::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: RawImage,
    pub label: usize,
    /// Top-left corner in the source image.
    pub origin: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub role: Role,
    pub illuminant: String,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new(patch_size: usize, role: Role, illuminant: impl Into<String>) -> Self {
        Self {
            patch_size,
            role,
            illuminant: illuminant.into(),
            patches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.label).collect()
    }

    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if other.patch_size != self.patch_size {
            return Err(Error::Structure(format!(
                "cannot merge {0}x{0} patches into a {1}x{1} set",
                other.patch_size, self.patch_size
            )));
        }
        self.patches.extend(other.patches);
        Ok(())
    }
}

/// Cuts non-overlapping `patch x patch` tiles from one horizontal half of `img`.
///
/// Both halves are `floor(height / 2 / B) * B` rows tall, the bottom one
/// starting right below the top one, so every tile starts on a basic-pattern
/// boundary. Tiles are listed in row-major order.
pub fn extract_patches(
    img: &RawImage,
    patch: usize,
    split: Split,
    label: usize,
    illuminant: &str,
) -> Result<PatchSet> {
    let b = img.pattern().width();
    if patch == 0 || patch % b != 0 {
        return Err(Error::Alignment(format!(
            "patch size {patch} is not a positive multiple of the pattern width {b}"
        )));
    }
    let half = (img.height() / 2 / b) * b;
    if patch > half || patch > img.width() {
        return Err(Error::Range(format!(
            "patch size {patch} exceeds the {}x{half} sub-image",
            img.width()
        )));
    }
    let top = match split {
        Split::Top => 0,
        Split::Bottom => half,
    };
    let mut set = PatchSet::new(patch, split.role(), illuminant);
    for r in 0..half / patch {
        for c in 0..img.width() / patch {
            let origin = (c * patch, top + r * patch);
            set.patches.push(Patch {
                image: img.crop(origin.0, origin.1, patch, patch)?,
                label,
                origin,
            });
        }
    }
    Ok(set)
}
