//! Toy data, training, synthesis and evaluation.

mod data;
mod eval;
mod gradcheck;
mod synth;
mod train;

pub use data::{gen_dataset, render, ToyDataset, ToyFontSpec, CLASS_NAMES, N_CLASSES};
pub use eval::{
    ablate, ce_comparison, evaluate, summarize, AblationConfig, AblationRow, AblationSummary,
    CeComparison, EvalConfig, EvalReport, GlyphEval,
};
pub use gradcheck::{
    grad_check_suite, model_grad_check, objective_grad_check, CheckTarget, GradSuiteReport,
    ModelGradReport, TensorCheck,
};
pub use synth::{interpolate, synthesize, SynthConfig, Synthesis};
pub use train::{train, StepLog, TrainConfig, Trainer};

use thiserror::Error;

use crate::bezier::GeomError;
use crate::embedding::EmbedError;
use crate::glyph::GlyphError;
use crate::net::NetError;
use crate::objective::ObjectiveError;
use crate::raster::RasterError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} outside its domain")]
    Domain(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { step: usize, term: String },
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
