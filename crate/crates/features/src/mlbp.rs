//! M-LBP: one LBP histogram per MSFA band, each pixel compared with its
//! eight nearest neighbours of the same band (offsets of B pixels).

use rawmix_core::RawImage;

use crate::error::{Error, Result};
use crate::{Descriptor, FeatureVector};

const BINS: usize = 256;

/// Neighbour offsets in basic-pattern units, clockwise from the top-left.
/// Bit `k` of a code is set when neighbour `k` is >= the centre.
const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

pub fn mlbp_dim(pattern_width: usize) -> usize {
    BINS * pattern_width * pattern_width
}

pub fn mlbp(img: &RawImage) -> Result<FeatureVector> {
    let p = img.pattern();
    let b = p.width();
    let (cells_x, cells_y) = img.cells();
    if cells_x < 3 || cells_y < 3 {
        return Err(Error::Size(format!(
            "M-LBP needs at least 3x3 basic patterns, got {cells_x}x{cells_y} ({}x{} pixels, B={b})",
            img.width(),
            img.height()
        )));
    }
    let mut out = vec![0.0; mlbp_dim(b)];
    let per_band = ((cells_x - 2) * (cells_y - 2)) as f64;
    for band in 0..p.bands() {
        let (i, j) = p.cell_of_band(band);
        let hist = &mut out[band * BINS..(band + 1) * BINS];
        for cy in 1..cells_y - 1 {
            for cx in 1..cells_x - 1 {
                let (x, y) = (cx * b + i, cy * b + j);
                let center = img.get(x, y);
                let mut code = 0usize;
                for (k, (dx, dy)) in NEIGHBORS.iter().enumerate() {
                    let nx = (x as isize + dx * b as isize) as usize;
                    let ny = (y as isize + dy * b as isize) as usize;
                    if img.get(nx, ny) >= center {
                        code |= 1 << k;
                    }
                }
                hist[code] += 1.0;
            }
        }
        hist.iter_mut().for_each(|v| *v /= per_band);
    }
    Ok(out)
}

/// [`mlbp`] as a [`Descriptor`] for a fixed basic-pattern width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlbp {
    pub pattern_width: usize,
}

impl Descriptor for Mlbp {
    fn name(&self) -> &str {
        "mlbp"
    }

    fn dim(&self) -> usize {
        mlbp_dim(self.pattern_width)
    }

    fn extract(&self, img: &RawImage) -> Result<FeatureVector> {
        if img.pattern().width() != self.pattern_width {
            return Err(Error::Config(format!(
                "descriptor built for B={}, image has B={}",
                self.pattern_width,
                img.pattern().width()
            )));
        }
        mlbp(img)
    }
}
