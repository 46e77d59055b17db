//! Raw multispectral filter array (MSFA) mosaics: pattern definitions, exact
//! pixel (un)shuffling, radiance simulation, Max-Raw white balance and
//! pattern-preserving augmentation.

pub mod augment;
pub mod constancy;
pub mod error;
pub mod io;
pub mod msfa;
pub mod sim;

pub use error::{Error, Result};
pub use msfa::{mosaic, pixel_shuffle, pixel_unshuffle, FullImage, MsfaPattern, PlaneCube, RawImage};
