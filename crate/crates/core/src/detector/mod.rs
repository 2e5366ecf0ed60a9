//! A miniature two-stage oriented detector.

pub mod backbone;
pub mod config;
pub mod heads;
pub mod layers;
pub mod model;
pub mod pooling;
pub mod rpn;

pub use config::{DetectorConfig, LossToggles, LossWeights};
pub use model::{hwc_to_chw, AnnotatedImage, DetectedBox, Detector, StepGraph, StepPlan};
