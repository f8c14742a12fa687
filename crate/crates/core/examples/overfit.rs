//! Trains on a small toy set and reports re-synthesis quality.
//!
//! Usage: `cargo run --release --example overfit -- <config.json> <n_fonts> <data_seed>`

use std::time::Instant;

use vecfont_core::pipeline::{
    ce_comparison, evaluate, gen_dataset, EvalConfig, SynthConfig, TrainConfig, Trainer,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(&args[1])?)?;
    let n_fonts: usize = args[2].parse()?;
    let data_seed: u64 = args[3].parse()?;
    let ds = gen_dataset(data_seed, n_fonts)?;
    let steps = cfg.steps;
    let mut t = Trainer::new(cfg, &ds.train)?;
    let start = Instant::now();
    let mut window = Vec::new();
    for s in 0..steps {
        let log = t.step()?;
        window.push(log.loss);
        if (s + 1) % 250 == 0 {
            let n = window.len() as f64;
            let mean = |f: &dyn Fn(&vecfont_core::objective::LossReport) -> f64| {
                window.iter().map(f).sum::<f64>() / n
            };
            eprintln!(
                "{:5} {:7.1}s total {:.4} img {:.4} ce {:.4}/{:.4} cons {:.5} bez {:.5} kl {:.3}",
                s + 1,
                start.elapsed().as_secs_f64(),
                mean(&|r| r.total),
                mean(&|r| r.terms.l_img),
                mean(&|r| r.terms.l_ce_init),
                mean(&|r| r.terms.l_ce_refine),
                mean(&|r| r.terms.l_cons),
                mean(&|r| r.terms.l_bezier),
                mean(&|r| r.terms.l_kl),
            );
            window.clear();
        }
    }
    let refs: Vec<usize> = (0..t.model.config.n_refs).collect();
    for (name, fonts) in [("train", &ds.train), ("test", &ds.test)] {
        for refine in [true, false] {
            let ec = EvalConfig {
                ref_classes: refs.clone(),
                synth: SynthConfig::deterministic(refine),
                ..EvalConfig::default()
            };
            let r = evaluate(&t.model, fonts, &ec)?;
            eprintln!(
                "{name} refine={refine}: l1 {:.4} gap {:.5} max gap {:.4}",
                r.mean_l1, r.mean_gap, r.max_gap
            );
            if refine {
                let per: Vec<String> = r
                    .glyphs
                    .iter()
                    .map(|g| format!("{}:{:.3}", g.char_class, g.l1))
                    .collect();
                eprintln!("  {}", per.join(" "));
            }
        }
        let ce = ce_comparison(&t.model, fonts, &refs)?;
        eprintln!("{name} ce init {:.4} refined {:.4}", ce.init, ce.refined);
    }
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
