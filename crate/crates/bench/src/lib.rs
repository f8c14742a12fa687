//! Inputs shared by the benchmarks.

use std::path::PathBuf;

use vecfont_core::pipeline::{gen_dataset, ToyDataset, TrainConfig};
use vecfont_core::Font;

/// Path of a file in the workspace `fixtures/` directory.
pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

/// A training configuration from `fixtures/`.
pub fn train_config(name: &str) -> TrainConfig {
    let text = std::fs::read_to_string(fixture(name)).expect("fixture exists");
    serde_json::from_str(&text).expect("fixture parses")
}

/// A small toy dataset with a fixed seed.
pub fn toy_data(fonts: usize) -> ToyDataset {
    gen_dataset(17, fonts).expect("toy dataset")
}

/// The first training font of [`toy_data`].
pub fn toy_font() -> Font {
    toy_data(2).train.remove(0)
}
