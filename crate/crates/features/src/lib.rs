//! Texture descriptors computed directly on raw MSFA patches: the learned
//! RawMixer network and the handcrafted M-LBP histogram.

mod error;
mod gradcheck;
mod mlbp;
mod rawmixer;
mod train;

pub use error::{Error, Result};
pub use gradcheck::{all_elements, gradient_check, GradCheckConfig, GradCheckEntry, GradCheckReport, TensorSummary};
pub use mlbp::{mlbp, mlbp_dim, Mlbp};
pub use rawmixer::{raw_conv, BnMode, FeatureMaps, Forward, RawMixer, RawMixerConfig};
pub use train::{train, train_with, EpochRecord, TrainConfig, TrainHistory};

use rawmix_core::RawImage;

pub type FeatureVector = Vec<f64>;

/// Anything that maps a raw patch to a fixed-length feature vector.
pub trait Descriptor {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn extract(&self, img: &RawImage) -> Result<FeatureVector>;

    fn extract_all(&self, imgs: &[&RawImage]) -> Result<Vec<FeatureVector>> {
        imgs.iter().map(|img| self.extract(img)).collect()
    }
}
