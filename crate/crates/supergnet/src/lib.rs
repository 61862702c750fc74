//! Host-side tooling around `supergnet-core`: image files, the model file
//! format, classification, dataset evaluation and the interactive loop.

pub mod eval;
pub mod image_io;
pub mod model_file;
pub mod pipeline;
pub mod reference_models;
pub mod repl;

pub use eval::{evaluate, read_dataset, EvalError, EvalReport, TextField};
pub use model_file::{load_model, save_model, Model, ModelError};
pub use pipeline::{argmax, Classification, Classifier, PipelineError, StageTimings};
pub use supergnet_core as core;
