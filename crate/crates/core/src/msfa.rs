//! MSFA basic patterns, raw mosaics and the periodic pixel (un)shuffling
//! operators that move between a mosaic and its per-band planes.
//!
//! Coordinates are `(x, y)` with `x` the column and `y` the row. Inside a
//! basic pattern the band at column `i`, row `j` is `band_grid[j][i]`.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A `B x B` basic pattern of distinct bands and their center wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct MsfaPattern {
    id: String,
    width: usize,
    /// Row-major `B x B` grid of band indices.
    band_grid: Vec<usize>,
    /// Center wavelength (nm) of each band, indexed by band.
    wavelengths: Vec<f64>,
    cells: Vec<(usize, usize)>,
}

impl MsfaPattern {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        band_grid: Vec<usize>,
        wavelengths: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Pattern("basic pattern width must be positive".into()));
        }
        let bands = width * width;
        if band_grid.len() != bands {
            return Err(Error::Pattern(format!(
                "band grid has {} cells, expected {bands}",
                band_grid.len()
            )));
        }
        if wavelengths.len() != bands {
            return Err(Error::Pattern(format!(
                "{} wavelengths given for {bands} bands",
                wavelengths.len()
            )));
        }
        if let Some(w) = wavelengths.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Pattern(format!("wavelength {w} is not strictly positive")));
        }
        let mut cells = vec![(usize::MAX, usize::MAX); bands];
        for (k, &band) in band_grid.iter().enumerate() {
            if band >= bands {
                return Err(Error::Pattern(format!("band index {band} out of range 0..{bands}")));
            }
            if cells[band].0 != usize::MAX {
                return Err(Error::Pattern(format!("band {band} appears more than once")));
            }
            cells[band] = (k % width, k / width);
        }
        Ok(Self {
            id: id.into(),
            width,
            band_grid,
            wavelengths,
            cells,
        })
    }

    /// Row-major pattern with linearly spaced band centers between `first` and `last`.
    fn row_major(id: &str, width: usize, first: f64, last: f64) -> Self {
        let bands = width * width;
        let step = (last - first) / (bands - 1) as f64;
        let wavelengths = (0..bands).map(|b| first + step * b as f64).collect();
        Self::new(id, width, (0..bands).collect(), wavelengths).expect("built-in pattern is valid")
    }

    /// IMEC VIS-NIR 2x2 snapshot mosaic, 465-811 nm.
    pub fn imec2x2() -> Self {
        Self::row_major("imec2x2", 2, 465.0, 811.0)
    }

    /// IMEC VIS 4x4 snapshot mosaic, 469-633 nm.
    pub fn imec4x4() -> Self {
        Self::row_major("imec4x4", 4, 469.0, 633.0)
    }

    /// IMEC NIR 5x5 snapshot mosaic, 678-960 nm.
    pub fn imec5x5() -> Self {
        Self::row_major("imec5x5", 5, 678.0, 960.0)
    }

    pub fn builtin_ids() -> [&'static str; 3] {
        ["imec2x2", "imec4x4", "imec5x5"]
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "imec2x2" => Ok(Self::imec2x2()),
            "imec4x4" => Ok(Self::imec4x4()),
            "imec5x5" => Ok(Self::imec5x5()),
            other => Err(Error::Pattern(format!(
                "unknown MSFA id {other:?} (expected one of imec2x2, imec4x4, imec5x5)"
            ))),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Basic pattern width `B`.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of bands `B^2`.
    pub fn bands(&self) -> usize {
        self.width * self.width
    }

    pub fn band_grid(&self) -> &[usize] {
        &self.band_grid
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    /// Band at column `i`, row `j` of the basic pattern.
    #[inline]
    pub fn band_at_cell(&self, i: usize, j: usize) -> usize {
        self.band_grid[j * self.width + i]
    }

    /// `(column, row)` of `band` inside the basic pattern.
    #[inline]
    pub fn cell_of_band(&self, band: usize) -> (usize, usize) {
        self.cells[band]
    }

    /// The MSFA function: band sampled at raw pixel `(x, y)`.
    #[inline]
    pub fn band_at_pixel(&self, x: usize, y: usize) -> usize {
        self.band_at_cell(x % self.width, y % self.width)
    }
}

/// Single-channel raw mosaic whose sides are multiples of the pattern width.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pattern: Arc<MsfaPattern>,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RawImage {
    pub fn new(
        pattern: impl Into<Arc<MsfaPattern>>,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let pattern = pattern.into();
        let b = pattern.width();
        if height == 0 || width == 0 || height % b != 0 || width % b != 0 {
            return Err(Error::Structure(format!(
                "raw image {width}x{height} is not a positive multiple of the {b}x{b} basic pattern"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Structure(format!(
                "raw image {width}x{height} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Range(format!("raw value {v} is not a finite non-negative number")));
        }
        Ok(Self {
            pattern,
            height,
            width,
            data,
        })
    }

    pub fn filled(pattern: impl Into<Arc<MsfaPattern>>, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(pattern, height, width, vec![value; height * width])
    }

    /// Builds a raw image without validating values. Callers guarantee the
    /// geometry and non-negativity invariants.
    pub(crate) fn from_parts(pattern: Arc<MsfaPattern>, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            pattern,
            height,
            width,
            data,
        }
    }

    pub fn pattern(&self) -> &MsfaPattern {
        &self.pattern
    }

    pub fn pattern_arc(&self) -> &Arc<MsfaPattern> {
        &self.pattern
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of basic-pattern cells along x and y.
    pub fn cells(&self) -> (usize, usize) {
        let b = self.pattern.width();
        (self.width / b, self.height / b)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn band_at(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::Coordinate {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.pattern.band_at_pixel(x, y))
    }

    /// Copy of the `w x h` window whose top-left corner is `(x0, y0)`.
    /// The window must start on a basic-pattern boundary.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let b = self.pattern.width();
        if x0 % b != 0 || y0 % b != 0 {
            return Err(Error::Alignment(format!(
                "crop origin ({x0}, {y0}) is not on a {b}-pixel pattern boundary"
            )));
        }
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Range(format!(
                "crop {w}x{h} at ({x0}, {y0}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(self.pattern.clone(), h, w, data)
    }
}

/// Per-band planes of a raw image: `B^2` channels of `rows x cols` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCube {
    pattern: Arc<MsfaPattern>,
    rows: usize,
    cols: usize,
    /// Channel-major: `data[b * rows * cols + y * cols + x]`.
    data: Vec<f64>,
}

impl PlaneCube {
    pub fn new(
        pattern: impl Into<Arc<MsfaPattern>>,
        channels: usize,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let pattern = pattern.into();
        if channels != pattern.bands() {
            return Err(Error::Structure(format!(
                "plane cube has {channels} channels but pattern {} has {} bands",
                pattern.id(),
                pattern.bands()
            )));
        }
        if rows == 0 || cols == 0 || data.len() != channels * rows * cols {
            return Err(Error::Structure(format!(
                "plane cube {channels}x{rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            pattern,
            rows,
            cols,
            data,
        })
    }

    pub fn pattern(&self) -> &MsfaPattern {
        &self.pattern
    }

    pub fn pattern_arc(&self) -> &Arc<MsfaPattern> {
        &self.pattern
    }

    pub fn channels(&self) -> usize {
        self.pattern.bands()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, band: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn channel_mut(&mut self, band: usize) -> &mut [f64] {
        let n = self.rows * self.cols;
        &mut self.data[band * n..(band + 1) * n]
    }

    #[inline]
    pub fn get(&self, band: usize, x: usize, y: usize) -> f64 {
        self.data[(band * self.rows + y) * self.cols + x]
    }
}

/// A fully-defined `B^2`-channel image at raw resolution, the input of the
/// mosaicing step.
#[derive(Debug, Clone, PartialEq)]
pub struct FullImage {
    pattern: Arc<MsfaPattern>,
    height: usize,
    width: usize,
    /// Channel-major: `data[b * height * width + y * width + x]`.
    data: Vec<f64>,
}

impl FullImage {
    pub fn new(
        pattern: impl Into<Arc<MsfaPattern>>,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let pattern = pattern.into();
        if channels != pattern.bands() {
            return Err(Error::Structure(format!(
                "full image has {channels} channels but pattern {} has {} bands",
                pattern.id(),
                pattern.bands()
            )));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::Structure(format!(
                "full image {channels}x{height}x{width} does not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            pattern,
            height,
            width,
            data,
        })
    }

    pub fn pattern(&self) -> &MsfaPattern {
        &self.pattern
    }

    pub fn pattern_arc(&self) -> &Arc<MsfaPattern> {
        &self.pattern
    }

    pub fn channels(&self) -> usize {
        self.pattern.bands()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, band: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    #[inline]
    pub fn get(&self, band: usize, x: usize, y: usize) -> f64 {
        self.data[(band * self.height + y) * self.width + x]
    }
}

/// Rearranges a mosaic into its `B^2` band planes.
///
/// Channel `band_grid[j][i]` at `(x, y)` receives raw pixel `(x*B + i, y*B + j)`.
pub fn pixel_unshuffle(img: &RawImage) -> PlaneCube {
    let pattern = img.pattern_arc();
    let b = pattern.width();
    let (cols, rows) = img.cells();
    let plane = rows * cols;
    let mut data = vec![0.0; pattern.bands() * plane];
    for y in 0..img.height() {
        let (cy, j) = (y / b, y % b);
        let row = &img.data()[y * img.width()..(y + 1) * img.width()];
        for (x, &v) in row.iter().enumerate() {
            let band = pattern.band_at_cell(x % b, j);
            data[band * plane + cy * cols + x / b] = v;
        }
    }
    PlaneCube {
        pattern: pattern.clone(),
        rows,
        cols,
        data,
    }
}

/// Exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(cube: &PlaneCube) -> RawImage {
    let pattern = cube.pattern_arc();
    let b = pattern.width();
    let (height, width) = (cube.rows() * b, cube.cols() * b);
    let plane = cube.rows() * cube.cols();
    let mut data = vec![0.0; height * width];
    for y in 0..height {
        let (cy, j) = (y / b, y % b);
        for x in 0..width {
            let band = pattern.band_at_cell(x % b, j);
            data[y * width + x] = cube.data()[band * plane + cy * cube.cols() + x / b];
        }
    }
    RawImage::from_parts(pattern.clone(), height, width, data)
}

/// Spatio-spectral sub-sampling of a fully-defined image: pixel `p` keeps
/// only channel `MSFA(p)`.
pub fn mosaic(full: &FullImage) -> Result<RawImage> {
    let pattern = full.pattern_arc();
    let b = pattern.width();
    if full.height() % b != 0 || full.width() % b != 0 {
        return Err(Error::Structure(format!(
            "full image {}x{} is not a multiple of the {b}x{b} basic pattern",
            full.width(),
            full.height()
        )));
    }
    let (h, w) = (full.height(), full.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(full.get(pattern.band_at_pixel(x, y), x, y));
        }
    }
    RawImage::new(pattern.clone(), h, w, data)
}
