//! Semi-supervised fine-tuning pipeline for pixel-level building detection.
//!
//! A stacked-autoencoder classifier over multi-band image patches whose
//! fine-tuning loss can pull in unlabeled pixels through estimated soft
//! targets. Three engines produce those targets — anchor-graph label
//! propagation, a worst-case-gain combination of kNN regressors, and a
//! mutual-information regularized kernel classifier — plus a harmonic blend
//! of all three. Post-processing (majority vote, erosion) and a
//! confusion-matrix evaluator close the loop, and [`pipeline`] wires the
//! stages into a resumable CLI workflow.

pub mod anchor;
pub mod config;
pub mod error;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod raster;
pub mod safer;
pub mod smir;
pub mod synth;
pub mod targets;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use features::{NormStats, PatchDataset, SplitRatios};
pub use model_io::ModelBundle;
pub use nn::{Activation, MlpModel, TrainConfig};
pub use raster::{BandStack, LabelMask, PolygonAnnotation};
pub use targets::{ExtendedTargets, LossKind, SoftTargets, SslParams};
