//! Zero-shot anomaly segmentation driven by image-aware prompts.
//!
//! Stage 1 harvests object tags from normal images, asks a language model for
//! defect descriptors and derives a size threshold. Stage 2 detects, filters,
//! segments and scores each test image. All model inference goes through
//! [`backends::Backend`], which can be a live model server or a replay store
//! of recorded responses.

pub mod backends;
pub mod config;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod prompting;
pub mod types;

pub use config::{validate, PipelineConfig};
pub use error::{
    BackendError, ConfigError, DatasetError, GeometryError, MetricsError, PipelineError, TypeError,
};
pub use types::{
    BinaryMask, BoundingBox, Detection, DetectionSet, ImageRef, MaskSet, PromptBundle,
    PromptTemplate, ScoreMap, SizeThreshold, Split, TagSet,
};
