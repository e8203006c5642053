pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod partition;
pub mod scene;
pub mod spatial;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Settings for fitting a single scene: a smaller decoder, no augmentation
/// and a higher learning rate than the multi-scene defaults.
pub const OVERFIT_CONFIG: &str = "\
steps = 300
batch_size = 1
lr = 0.002
weight_decay = 0
decoder_layers = 2
augment_flip = false
augment_rotate = false
augment_scale = false
";
