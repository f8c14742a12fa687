use criterion::{black_box, criterion_group, criterion_main, Criterion};
use vecfont_bench::toy_font;
use vecfont_core::bezier::{alignment_distance, AuxParams, CubicBezier};
use vecfont_core::glyph::{parse_svg_path, serialize_svg};
use vecfont_core::raster::{rasterize, FillRule};
use vecfont_core::{DrawCommand, Point};

fn bezier(c: &mut Criterion) {
    let p = |x, y| Point::new(x, y);
    let b = CubicBezier::new(p(0.1, 0.1), p(0.9, 0.2), p(0.1, 0.8), p(0.9, 0.9));
    c.bench_function("bezier_eval", |bench| {
        bench.iter(|| b.eval(black_box(0.37)).unwrap())
    });
    c.bench_function("bezier_flatten_quarter_pixel_64", |bench| {
        bench.iter(|| b.flatten(black_box(0.25 / 64.0)))
    });
    let x = DrawCommand::relaxed_curve(p(0.1, 0.1), p(0.9, 0.2), p(0.1, 0.8), p(0.9, 0.9));
    let y = DrawCommand::relaxed_line(p(0.2, 0.1), p(0.8, 0.9));
    let aux = AuxParams::uniform(3);
    c.bench_function("alignment_distance_3_points", |bench| {
        bench.iter(|| alignment_distance(black_box(&x), black_box(&y), &aux).unwrap())
    });
}

fn glyphs(c: &mut Criterion) {
    let font = toy_font();
    let g = &font.glyphs[2];
    for res in [32, 64, 128] {
        c.bench_function(&format!("rasterize_{res}"), |bench| {
            bench.iter(|| rasterize(black_box(g), res, FillRule::NonZero).unwrap())
        });
    }
    let text = serialize_svg(g, 256.0).unwrap();
    c.bench_function("svg_parse", |bench| {
        bench.iter(|| parse_svg_path(black_box(&text), 256.0).unwrap())
    });
    c.bench_function("relaxed_round_trip", |bench| {
        bench.iter(|| g.to_relaxed().unwrap().merge_relaxed().unwrap())
    });
}

criterion_group!(benches, bezier, glyphs);
criterion_main!(benches);
