//! Intensity-weighted coordinate channels for single-point localisation.
//!
//! The crate bundles everything needed to run the localisation experiments
//! end to end on a CPU:
//!
//! - [`tensor`]: a small reverse-mode differentiable array engine with the
//!   layers used by the two regression networks and an Adam optimiser.
//! - [`encode`]: CoordConv and intensity-weighted coordinate channels.
//! - [`ingest`]: contour and WFDB parsers, image preprocessing, ECG
//!   changepoint windowing and the on-disk dataset container.
//! - [`augment`]: geometric image augmentation and the ECG perturbation
//!   stack, including Butterworth filter design.
//! - [`synth`]: synthetic datasets with exact ground truth.
//! - [`models`]: LakshyaNet and NimeshaNet, full and reduced variants.
//! - [`train`]: group-aware k-fold training harness with R² logging.
//! - [`stats`]: bootstrap superiority tests and the instability score.

pub mod augment;
pub mod encode;
mod error;
pub mod ingest;
pub mod models;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use encode::{CoordMode, EncodedInput, EncodingKind};
pub use error::{Error, Result};
pub use ingest::{EcgWindow, ImageSample, Task};
pub use models::{NetworkSpec, NetworkState, Variant};
pub use stats::{BootstrapResult, SuperiorityReport};
pub use tensor::{Graph, Tensor, Var};
pub use train::{ExperimentConfig, TrainLog};
