//! Guide-label generation for weakly supervised semantic segmentation:
//! seeds from class heatmaps, fusion with saliency, dense-CRF refinement,
//! and the metrics used to judge the result.

pub mod densecrf;
pub mod error;
pub mod fixtures;
pub mod guides;
pub mod maskcore;
pub mod metrics;
pub mod pipeline;
pub mod regions;
pub mod seeder;

pub use error::{Error, Result};
