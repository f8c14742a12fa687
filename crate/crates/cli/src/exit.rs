//! Maps errors to process exit codes.

use vecfont_core::embedding::EmbedError;
use vecfont_core::glyph::GlyphError;
use vecfont_core::net::NetError;
use vecfont_core::objective::ObjectiveError;
use vecfont_core::pipeline::PipelineError;
use vecfont_core::raster::RasterError;
use vecfont_core::tensor::TensorError;

pub const USAGE: i32 = 2;
pub const PARSE: i32 = 3;
pub const NUMERIC: i32 = 4;
pub const IO: i32 = 5;
const OTHER: i32 = 1;

/// Errors raised by the command layer itself.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

fn glyph(e: &GlyphError) -> i32 {
    match e {
        GlyphError::Io(_) => IO,
        _ => PARSE,
    }
}

fn tensor(e: &TensorError) -> i32 {
    match e {
        TensorError::Checkpoint(_) => PARSE,
        _ => NUMERIC,
    }
}

fn raster(e: &RasterError) -> i32 {
    match e {
        RasterError::Domain(_) | RasterError::Shape(..) => USAGE,
        RasterError::Format(_) => PARSE,
        RasterError::Io(_) => IO,
    }
}

fn embed(e: &EmbedError) -> i32 {
    match e {
        EmbedError::Glyph(g) => glyph(g),
        EmbedError::Tensor(t) => tensor(t),
        _ => PARSE,
    }
}

fn net(e: &NetError) -> i32 {
    match e {
        NetError::Config(_) | NetError::Arity { .. } => USAGE,
        NetError::Checkpoint(_) => PARSE,
        NetError::Tensor(t) => tensor(t),
        NetError::Embed(x) => embed(x),
        NetError::Glyph(g) => glyph(g),
        NetError::Io(_) => IO,
    }
}

fn objective(e: &ObjectiveError) -> i32 {
    match e {
        ObjectiveError::Tensor(t) => tensor(t),
        _ => NUMERIC,
    }
}

fn pipeline(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Config(_) | PipelineError::Domain(_) | PipelineError::Geom(_) => USAGE,
        PipelineError::Format(_) => PARSE,
        PipelineError::NonFinite { .. } => NUMERIC,
        PipelineError::Glyph(g) => glyph(g),
        PipelineError::Raster(r) => raster(r),
        PipelineError::Embed(x) => embed(x),
        PipelineError::Net(n) => net(n),
        PipelineError::Objective(o) => objective(o),
        PipelineError::Tensor(t) => tensor(t),
        PipelineError::Io(_) => IO,
    }
}

/// Exit code of the first recognized error in the chain.
pub fn code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => USAGE,
                CliError::Numeric(_) => NUMERIC,
            };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return pipeline(e);
        }
        if let Some(e) = cause.downcast_ref::<GlyphError>() {
            return glyph(e);
        }
        if let Some(e) = cause.downcast_ref::<RasterError>() {
            return raster(e);
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return net(e);
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor(e);
        }
        if cause.is::<serde_json::Error>() {
            return PARSE;
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    OTHER
}
