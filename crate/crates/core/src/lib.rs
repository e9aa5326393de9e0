//! Boundary-aware transformer segmentation: boundary key-point supervision, the
//! implicit, explicit and cross-scale boundary learners, the multi-scale objective,
//! evaluation metrics, and synthetic lesion data.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod keypoints;
pub mod learners;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod train;

pub use attention::{FeatureMap, TokenSequence, Weighting};
pub use data::{Sample, SynthParams};
pub use error::{Error, Result};
pub use keypoints::{Contour, ScoredContour};
pub use learners::BoundaryEmbedding;
pub use mask::{BinaryMask, KeyPointMap};
pub use metrics::{MetricReport, SampleMetrics};
pub use network::{ForwardOutput, ModelConfig, XBoundFormer};
pub use objectives::{LabelPyramid, LossBreakdown, LossWeights};
pub use train::{AdamW, AdamWConfig};
