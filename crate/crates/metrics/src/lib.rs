//! Image-set and image-pair metrics on top of one fixed, seeded random
//! convolutional feature extractor.
//!
//! Values are only comparable between runs that use the same extractor seed;
//! they are not comparable with metrics computed by pretrained networks.

pub mod drift;
pub mod extractor;
pub mod kid;
pub mod patch;
pub mod stats;

pub use drift::{drift_report, DriftReport};
pub use extractor::{extract_features, Extractor, FEATURE_DIM};
pub use kid::kid_mmd;
pub use patch::patch_similarity;
pub use stats::{frechet_distance, mean_ci, FeatureStats};
