use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vecfont_bench::{toy_data, toy_font, train_config};
use vecfont_core::pipeline::{render, synthesize, Trainer};
use vecfont_core::tensor::{Graph, Tensor};
use vecfont_core::{Glyph, Model, RasterImage, SynthConfig};

fn matmul(c: &mut Criterion) {
    let rng = &mut ChaCha8Rng::seed_from_u64(1);
    for n in [32, 128] {
        let (a, b) = (
            Tensor::randn(&[n, n], 1.0, rng),
            Tensor::randn(&[n, n], 1.0, rng),
        );
        c.bench_function(&format!("matmul_forward_backward_{n}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.param(a.clone()), g.param(b.clone()));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).is_some())
            })
        });
    }
}

fn training(c: &mut Criterion) {
    for fixture in ["train_smoke.json", "overfit_toy.json"] {
        let data = toy_data(4);
        let mut t = Trainer::new(train_config(fixture), &data.train).unwrap();
        let name = fixture.trim_end_matches(".json");
        c.bench_function(&format!("train_step_{name}"), |bench| {
            bench.iter(|| t.step().unwrap().loss.total)
        });
    }
}

fn synthesis(c: &mut Criterion) {
    let cfg = train_config("overfit_toy.json").model;
    let model = Model::new(cfg, 3).unwrap();
    let font = toy_font();
    let n = model.config.n_refs;
    let refs: Vec<Glyph> = font.glyphs[..n]
        .iter()
        .map(|g| g.to_relaxed().unwrap())
        .collect();
    let imgs: Vec<RasterImage> = font.glyphs[..n]
        .iter()
        .map(|g| render(g, model.config.resolution).unwrap())
        .collect();
    let mut group = c.benchmark_group("synthesize_toy");
    group.sample_size(10);
    for (name, cfg) in [
        ("deterministic", SynthConfig::deterministic(true)),
        (
            "ten_candidates",
            SynthConfig {
                candidates: 10,
                noise_std: 1.0,
                ..SynthConfig::deterministic(true)
            },
        ),
    ] {
        group.bench_function(name, |bench| {
            bench.iter(|| synthesize(&model, &refs, &imgs, &[4, 5], &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, training, synthesis);
criterion_main!(benches);
