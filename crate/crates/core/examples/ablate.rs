//! Aux-point / refinement ablation on a toy dataset.
//!
//! Usage: `cargo run --release --example ablate -- <ablation.json> <n_fonts> <data_seed>`

use vecfont_core::pipeline::{ablate, gen_dataset, summarize, AblationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let cfg: AblationConfig = serde_json::from_str(&std::fs::read_to_string(&args[1])?)?;
    let ds = gen_dataset(args[3].parse()?, args[2].parse()?)?;
    let start = std::time::Instant::now();
    let rows = ablate(&ds.train, &ds.test, &cfg, |r| {
        eprintln!(
            "{:7.1}s {}",
            start.elapsed().as_secs_f64(),
            serde_json::to_string(r).unwrap()
        )
    })?;
    println!("{}", serde_json::to_string_pretty(&summarize(&rows))?);
    Ok(())
}
