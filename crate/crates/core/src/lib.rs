//! Gradient-based visual explanations for small convolutional networks.
//!
//! The crate bundles a reverse-mode autodiff CNN engine ([`graph`],
//! [`layers`]), canonical architectures and training ([`zoo`]), saliency
//! methods from CAM to Grad-CAM++ ([`saliency`]), faithfulness and
//! localization metrics ([`metrics`], [`eval`]), explanation-driven
//! distillation ([`distill`]) and a synthetic shapes dataset ([`data`]).

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod numdiff;
pub mod pnm;
pub mod saliency;
pub mod tensor;
pub mod zoo;

pub use data::{Dataset, DatasetManifest, GenerateConfig, Sample};
pub use distill::{DistillConfig, DistillOutcome, MapNormalization};
pub use error::{Error, Result};
pub use eval::{EvalConfig, MetricsReport};
pub use graph::{ForwardTape, GradientTape, ModelGraph, ParamGrads};
pub use layers::{Layer, LayerKind};
pub use metrics::{BoundingBox, ConfidencePair, RocPoint};
pub use saliency::{AlphaMap, ExplainOptions, Explanation, Method, SaliencyMap, ScoreFunction};
pub use tensor::Tensor;
pub use zoo::{Architecture, EpochLoss, LabeledImage, TrainConfig};
