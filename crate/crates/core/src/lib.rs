pub mod bezier;
pub mod embedding;
pub mod glyph;
pub mod net;
pub mod objective;
pub mod pipeline;
pub mod raster;
pub mod tensor;

pub use glyph::{CommandType, DrawCommand, Font, Glyph, GlyphError, Point, RepKind};
pub use net::{Model, ModelConfig, StyleFeature};
pub use objective::LossWeights;
pub use pipeline::{PipelineError, SynthConfig, TrainConfig};
pub use raster::{FillRule, RasterImage};
