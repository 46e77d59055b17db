//! Max-Raw white balance: every band is divided by the maximum of its 5x5
//! median-filtered plane.

use serde::{Deserialize, Serialize};

use crate::msfa::{pixel_shuffle, pixel_unshuffle, PlaneCube, RawImage};

/// Floor applied to per-band estimates so all-zero bands stay defined.
pub const ESTIMATE_FLOOR: f64 = 1e-8;

const WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationEstimate {
    pub per_band: Vec<f64>,
}

/// 5x5 median filter of a `rows x cols` plane.
///
/// Borders are replicate-padded. When the plane is smaller than the window
/// along either axis the window is clipped to the plane instead; even-sized
/// windows then take the lower of the two middle values.
pub fn median_filter_5x5(plane: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(plane.len(), rows * cols);
    let r = (WINDOW / 2) as isize;
    let clip = rows < WINDOW || cols < WINDOW;
    let mut window = Vec::with_capacity(WINDOW * WINDOW);
    let mut out = Vec::with_capacity(plane.len());
    for y in 0..rows as isize {
        for x in 0..cols as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && xx >= 0 && yy < rows as isize && xx < cols as isize;
                    if clip && !inside {
                        continue;
                    }
                    let yy = yy.clamp(0, rows as isize - 1) as usize;
                    let xx = xx.clamp(0, cols as isize - 1) as usize;
                    window.push(plane[yy * cols + xx]);
                }
            }
            let mid = (window.len() - 1) / 2;
            let (_, median, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out.push(*median);
        }
    }
    out
}

pub fn estimate_illumination(cube: &PlaneCube) -> IlluminationEstimate {
    let per_band = (0..cube.channels())
        .map(|b| {
            median_filter_5x5(cube.channel(b), cube.rows(), cube.cols())
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
                .max(ESTIMATE_FLOOR)
        })
        .collect();
    IlluminationEstimate { per_band }
}

/// White-balances a raw mosaic and returns the estimate that was used.
pub fn white_balance_with_estimate(img: &RawImage) -> (RawImage, IlluminationEstimate) {
    let mut cube = pixel_unshuffle(img);
    let estimate = estimate_illumination(&cube);
    for (b, &e) in estimate.per_band.iter().enumerate() {
        cube.channel_mut(b).iter_mut().for_each(|v| *v /= e);
    }
    (pixel_shuffle(&cube), estimate)
}

pub fn white_balance(img: &RawImage) -> RawImage {
    white_balance_with_estimate(img).0
}
