//! Dense higher-order CRF inference for detection-driven instance
//! segmentation.
//!
//! The semantic stage runs mean field on a fully connected CRF whose
//! pairwise terms are Gaussian kernels and whose higher-order terms tie
//! each detection's foreground pixels to a latent validity variable. The
//! instance stage turns the result into a per-image labelling over the
//! detections. Everything is differentiable through the unrolled
//! iterations.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod filter;
pub mod grid;
pub mod instance;
pub mod io;
pub mod numeric;
pub mod potentials;
pub mod semantic;
pub mod synthetic;

pub use error::{Error, Result};
pub use filter::{Backend, FeatureField, FilterPlan};
pub use grid::{BoundingBox, ColorImage, PixelGrid};
pub use potentials::{
    Detection, DetectionParams, DistributionField, KernelSpec, LabelSpace, Labeling,
    PairwiseConfig, PairwiseModel, UnaryField,
};
