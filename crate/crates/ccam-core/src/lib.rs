//! Core library for a counterfactual CAM pipeline on synthetic
//! co-occurrence-biased scenes: a minimal f32 tensor/autodiff engine, a
//! procedural dataset generator, a small convolutional model with
//! foreground/background feature decoupling, counterfactual training,
//! test-time adaptation, and weakly-supervised localization metrics.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod counterfactual;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BnMode, BnRunning, Graph, TensorId};
pub use rng::CounterRng;
pub use tensor::Tensor;
