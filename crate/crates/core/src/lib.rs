//! Conversion of constraint-compliant analog networks into rate-coded spiking
//! networks by threshold balancing, and event-driven integrate-and-fire
//! simulation of the result.
//!
//! Pipeline: build or [load](format::load_model) a [`NetworkGraph`], check it
//! with [`validate_convertibility`], [train](trainer::train) it, compute a
//! [`ThresholdSet`] with [`normalizer::spike_norm`] or
//! [`normalizer::ann_based_thresholds`], then classify with
//! [`snn::run_inference`] and account for the compute with [`analyzer`].

pub mod analyzer;
pub mod ann;
pub mod arch;
pub mod data;
pub mod encoder;
pub mod error;
pub mod format;
pub mod graph;
pub mod normalizer;
pub mod pipeline;
pub mod resnet;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{
    validate_convertibility, Layer, LayerKind, NetworkGraph, ValidationMode, ValidationReport,
    Violation, ViolationKind, INPUT,
};
pub use normalizer::{ThresholdMethod, ThresholdSet};
pub use tensor::Tensor;
