//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line
//! with its measurements and runtime.
//!
//! The tests hold a shared lock so each one is timed without competition
//! from the others. Run with `cargo test --release -p vecfont-core --test
//! acceptance`; the overfit and ablation criteria train real models and
//! take minutes.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecfont_core::bezier::{alignment_distance, AuxParams, CubicBezier};
use vecfont_core::embedding::{quantize_glyph, QuantizedCommand, BINS};
use vecfont_core::glyph::{parse_svg_path, serialize_svg};
use vecfont_core::net::{split_predictions, MemoryLayout};
use vecfont_core::objective::{ce_breakdown, loss_kl, loss_kl_var, total, LossTerms};
use vecfont_core::pipeline::{
    ablate, evaluate, gen_dataset, grad_check_suite, interpolate, render, summarize, synthesize,
    AblationConfig, EvalConfig, Synthesis, ToyFontSpec, Trainer,
};
use vecfont_core::raster::{outline_polygons, rasterize, FillRule};
use vecfont_core::tensor::{Graph, Tensor};
use vecfont_core::{
    CommandType, DrawCommand, Font, Glyph, LossWeights, Model, Point, RasterImage, RepKind,
    SynthConfig, TrainConfig,
};

static SERIAL: Mutex<()> = Mutex::new(());

type Checked = Result<String, String>;

/// Runs one criterion under the shared lock, prints its line and fails the
/// test when the check or the time limit fails.
fn criterion(id: u32, name: &str, limit: Duration, body: impl FnOnce() -> Checked) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = body();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = result.is_ok() && in_time;
    let detail = match &result {
        Ok(s) | Err(s) => s.clone(),
    };
    let line = format!(
        "[{}] criterion {id} {name}: {detail}; {:.1}s of {:.0}s{}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64(),
        if in_time { "" } else { " (over time)" },
    );
    // Written to the raw handle so the line shows without --nocapture.
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

/// Extra property checked alongside a criterion.
fn property(name: &str, ok: bool, detail: String) -> bool {
    let _ = writeln!(
        std::io::stderr(),
        "    [{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn read_fixture<T: serde::de::DeserializeOwned>(name: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn ensure(ok: bool, detail: String) -> Checked {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_integrity() {
    criterion(1, "gradient integrity", Duration::from_secs(120), || {
        let r = grad_check_suite(1, 1e-5, 8, 200).map_err(|e| e.to_string())?;
        let ops = r.ops.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        let objective = r.objective.iter().map(|t| t.rel_error).fold(0.0, f64::max);
        let detail = format!(
            "max rel err {:.2e} (ops {:.2e} over {} checks, model {:.2e} over {} of {} params, \
             objective {:.2e})",
            r.max_rel_error,
            ops,
            r.ops.len(),
            r.model.max_rel_error,
            r.model.coordinates,
            r.model.parameters,
            objective,
        );
        ensure(r.max_rel_error < 1e-4, detail)
    });
}

// ---------------------------------------------------------------- 2

fn random_point(rng: &mut ChaCha8Rng) -> Point {
    // A few coordinates land exactly on the canvas border.
    let mut c = || match rng.gen_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen::<f64>(),
    };
    Point::new(c(), c())
}

fn random_compact_glyph(rng: &mut ChaCha8Rng) -> Glyph {
    let mut cmds = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let start = random_point(rng);
        cmds.push(DrawCommand::compact_move(start));
        for _ in 0..rng.gen_range(1..=5) {
            cmds.push(if rng.gen_bool(0.5) {
                DrawCommand::compact_line(random_point(rng))
            } else {
                DrawCommand::compact_curve(random_point(rng), random_point(rng), random_point(rng))
            });
        }
        if rng.gen_bool(0.5) {
            cmds.push(DrawCommand::compact_line(start));
        }
    }
    Glyph::new(cmds, rng.gen_range(0..8), RepKind::Compact)
        .sort_subpaths()
        .unwrap()
}

#[test]
fn criterion_2_representation_round_trips() {
    criterion(
        2,
        "representation round-trips",
        Duration::from_secs(10),
        || {
            let rng = &mut ChaCha8Rng::seed_from_u64(2);
            let mut relaxed_ok = 0;
            let mut svg_err: f64 = 0.0;
            for _ in 0..1000 {
                let g = random_compact_glyph(rng);
                g.validate().map_err(|e| e.to_string())?;
                let back = g
                    .to_relaxed()
                    .and_then(|r| r.merge_relaxed())
                    .map_err(|e| e.to_string())?;
                let exact = back.rep_kind == RepKind::Compact
                    && back.commands.len() == g.commands.len()
                    && back.commands.iter().zip(&g.commands).all(|(a, b)| {
                        a.cmd == b.cmd
                            && a.mask == b.mask
                            && a.coords()
                                .iter()
                                .zip(b.coords())
                                .all(|(x, y)| x.to_bits() == y.to_bits())
                    });
                relaxed_ok += exact as usize;

                let canvas = [1.0, 16.0, 256.0, 1000.0][rng.gen_range(0..4)];
                let text = serialize_svg(&g, canvas).map_err(|e| e.to_string())?;
                let h = parse_svg_path(&text, canvas).map_err(|e| e.to_string())?;
                if h.commands.len() != g.commands.len()
                    || h.commands
                        .iter()
                        .zip(&g.commands)
                        .any(|(a, b)| a.cmd != b.cmd)
                {
                    return Err(format!("SVG round trip changed the commands of {text}"));
                }
                for (a, b) in h.commands.iter().zip(&g.commands) {
                    for (x, y) in a.coords().iter().zip(b.coords()) {
                        svg_err = svg_err.max((x - y).abs() * canvas);
                    }
                }
            }
            ensure(
            relaxed_ok == 1000 && svg_err < 1e-5,
            format!(
                "{relaxed_ok}/1000 exact relaxed round trips, max SVG error {svg_err:.2e} canvas units"
            ),
        )
        },
    );
}

// ---------------------------------------------------------------- 3

/// de Casteljau by repeated linear interpolation.
fn de_casteljau(p: [Point; 4], r: f64) -> Point {
    let lerp = |a: Point, b: Point| Point::new(a.x + r * (b.x - a.x), a.y + r * (b.y - a.y));
    let (a, b, c) = (lerp(p[0], p[1]), lerp(p[1], p[2]), lerp(p[2], p[3]));
    let (d, e) = (lerp(a, b), lerp(b, c));
    lerp(d, e)
}

/// Bernstein polynomials with explicit binomials and powers.
fn bernstein_sum(p: [Point; 4], r: f64) -> Point {
    let binom = [1.0, 3.0, 3.0, 1.0];
    let mut out = Point::new(0.0, 0.0);
    for k in 0..4 {
        let w = binom[k] * r.powi(k as i32) * (1.0 - r).powi(3 - k as i32);
        out.x += w * p[k].x;
        out.y += w * p[k].y;
    }
    out
}

fn oracle_cubic(c: &DrawCommand) -> [Point; 4] {
    match c.cmd {
        CommandType::CurveFromTo => c.points,
        CommandType::LineFromTo => {
            let (a, b) = (c.start(), c.end());
            let third = |t: f64| Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
            [a, third(1.0 / 3.0), third(2.0 / 3.0), b]
        }
        _ => unreachable!(),
    }
}

fn random_segment(rng: &mut ChaCha8Rng) -> DrawCommand {
    let line = rng.gen_bool(0.3);
    let mut p = || Point::new(rng.gen(), rng.gen());
    if line {
        DrawCommand::relaxed_line(p(), p())
    } else {
        DrawCommand::relaxed_curve(p(), p(), p(), p())
    }
}

#[test]
fn criterion_3_bezier_oracle() {
    criterion(3, "Bezier oracle", Duration::from_secs(10), || {
        let rng = &mut ChaCha8Rng::seed_from_u64(3);
        let (mut eval_err, mut align_err, mut line_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for i in 0..10_000 {
            let c = random_segment(rng);
            let r = match i % 50 {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen(),
            };
            let got = CubicBezier::from_command(&c)
                .and_then(|b| b.eval(r))
                .map_err(|e| e.to_string())?;
            let pts = oracle_cubic(&c);
            for want in [de_casteljau(pts, r), bernstein_sum(pts, r)] {
                eval_err = eval_err.max((got.x - want.x).abs().max((got.y - want.y).abs()));
            }

            let d = random_segment(rng);
            let mut rs: Vec<f64> = (0..rng.gen_range(1..=5)).map(|_| rng.gen()).collect();
            rs.sort_by(f64::total_cmp);
            rs.dedup();
            let aux = AuxParams::new(rs.clone()).map_err(|e| e.to_string())?;
            let got = alignment_distance(&c, &d, &aux).map_err(|e| e.to_string())?;
            let (pc, pd) = (oracle_cubic(&c), oracle_cubic(&d));
            let want: f64 = rs
                .iter()
                .map(|&r| {
                    let (a, b) = (de_casteljau(pc, r), de_casteljau(pd, r));
                    (a.x - b.x).powi(2) + (a.y - b.y).powi(2)
                })
                .sum();
            align_err = align_err.max((got - want).abs());

            // A lifted line evaluates to the straight interpolation.
            let (a, b) = (
                Point::new(rng.gen(), rng.gen()),
                Point::new(rng.gen(), rng.gen()),
            );
            let t: f64 = rng.gen();
            let on = CubicBezier::from_command(&DrawCommand::relaxed_line(a, b))
                .and_then(|cb| cb.eval(t))
                .map_err(|e| e.to_string())?;
            let want = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
            line_err = line_err.max((on.x - want.x).abs().max((on.y - want.y).abs()));
        }
        ensure(
            eval_err <= 1e-12 && align_err <= 1e-12 && line_err <= 1e-15,
            format!(
                "10000 cases: eval {eval_err:.1e}, alignment {align_err:.1e}, line lift {line_err:.1e}"
            ),
        )
    });
}

// ---------------------------------------------------------------- 4

/// Closed polylines of a compact glyph, curves sampled uniformly in the
/// parameter.
fn oracle_polygons(g: &Glyph) -> Vec<Vec<Point>> {
    let mut polys: Vec<Vec<Point>> = Vec::new();
    let mut pen = Point::new(0.0, 0.0);
    for c in g.active() {
        match c.cmd {
            CommandType::MoveFromTo => {
                pen = c.end();
                polys.push(vec![pen]);
            }
            CommandType::LineFromTo => {
                pen = c.end();
                polys.last_mut().unwrap().push(pen);
            }
            CommandType::CurveFromTo => {
                let p = [pen, c.points[1], c.points[2], c.end()];
                let poly = polys.last_mut().unwrap();
                for k in 1..=512 {
                    poly.push(bernstein_sum(p, k as f64 / 512.0));
                }
                pen = c.end();
            }
            CommandType::Eos => {}
        }
    }
    polys
}

/// Winding number of `q` around closed polylines.
fn winding(polys: &[Vec<Point>], q: Point) -> i32 {
    let mut w = 0;
    for poly in polys {
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let side = (b.x - a.x) * (q.y - a.y) - (q.x - a.x) * (b.y - a.y);
            if a.y <= q.y {
                if b.y > q.y && side > 0.0 {
                    w += 1;
                }
            } else if b.y <= q.y && side < 0.0 {
                w -= 1;
            }
        }
    }
    w
}

fn random_multi_contour(rng: &mut ChaCha8Rng) -> Glyph {
    let mut cmds = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        // A loop around a random center, with random radii and some curves.
        let c = Point::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
        let n = rng.gen_range(3..=7);
        let reverse = rng.gen_bool(0.5);
        let pts: Vec<Point> = (0..n)
            .map(|k| {
                let k = if reverse { n - k } else { k };
                let a = std::f64::consts::TAU * (k as f64 + rng.gen_range(0.0..0.6)) / n as f64;
                let r = rng.gen_range(0.05..0.2_f64);
                Point::new(
                    (c.x + r * a.cos()).clamp(0.0, 1.0),
                    (c.y + r * a.sin()).clamp(0.0, 1.0),
                )
            })
            .collect();
        cmds.push(DrawCommand::compact_move(pts[0]));
        for k in 1..=n {
            let to = pts[k % n];
            cmds.push(if rng.gen_bool(0.5) {
                DrawCommand::compact_line(to)
            } else {
                let mut ctrl = || Point::new(rng.gen(), rng.gen());
                DrawCommand::compact_curve(ctrl(), ctrl(), to)
            });
        }
    }
    Glyph::new(cmds, 0, RepKind::Compact)
}

#[test]
fn criterion_4_rasterizer_oracle() {
    criterion(4, "rasterizer oracle", Duration::from_secs(60), || {
        let rng = &mut ChaCha8Rng::seed_from_u64(4);
        let res = 64;
        // Agreement against the rasterizer's own flattening, then against a
        // fine uniform flattening of the true curves.
        let (mut same, mut fine, mut worst) = (0usize, 0usize, 1.0_f64);
        for _ in 0..100 {
            let g = random_multi_contour(rng);
            let img = rasterize(&g, res, FillRule::NonZero).map_err(|e| e.to_string())?;
            let flat = outline_polygons(&g, 0.25 / res as f64);
            let dense = oracle_polygons(&g);
            let mut glyph_same = 0;
            for row in 0..res {
                for col in 0..res {
                    let q = Point::new(
                        (col as f64 + 0.5) / res as f64,
                        (row as f64 + 0.5) / res as f64,
                    );
                    let filled = img.get(row, col) > 0.5;
                    glyph_same += ((winding(&flat, q) != 0) == filled) as usize;
                    fine += ((winding(&dense, q) != 0) == filled) as usize;
                }
            }
            same += glyph_same;
            worst = worst.min(glyph_same as f64 / (res * res) as f64);
        }
        let n = (100 * res * res) as f64;
        let (rate, fine_rate) = (same as f64 / n, fine as f64 / n);
        ensure(
            rate >= 0.995 && fine_rate >= 0.995,
            format!(
                "agreement {:.4}% over 100 glyphs (worst glyph {:.4}%), {:.4}% against exact curves",
                100.0 * rate,
                100.0 * worst,
                100.0 * fine_rate
            ),
        )
    });
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_closed_form_losses() {
    criterion(5, "closed-form losses", Duration::from_secs(5), || {
        let rng = &mut ChaCha8Rng::seed_from_u64(5);
        let mut kl_err: f64 = 0.0;
        for _ in 0..1000 {
            let d = rng.gen_range(1..=16);
            let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // KL(N(mu, s^2) || N(0, 1)) = ln(1 / s) + (s^2 + mu^2) / 2 - 1 / 2 per dimension.
            let want: f64 = mu
                .iter()
                .zip(&lv)
                .map(|(m, l)| {
                    let s = (0.5 * l).exp();
                    -s.ln() + 0.5 * (s * s + m * m) - 0.5
                })
                .sum();
            let got = loss_kl(&mu, &lv).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let (mv, lvv) = (
                g.constant(Tensor::from_vec(mu.clone())),
                g.constant(Tensor::from_vec(lv.clone())),
            );
            let on_tape = loss_kl_var(&mut g, mv, lvv).map_err(|e| e.to_string())?;
            kl_err = kl_err
                .max((got - want).abs())
                .max((g.value(on_tape).item() - want).abs());
        }

        let w = LossWeights::default();
        let weights_ok = w.values() == [1.0, 1.0, 1.0, 10.0, 1.0, 0.01];
        let mut sums_exact = 0;
        for _ in 0..1000 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..10.0)).collect();
            let terms = LossTerms {
                l_img: v[0],
                l_ce_init: v[1],
                l_ce_refine: v[2],
                l_cons: v[3],
                l_bezier: v[4],
                l_kl: v[5],
            };
            let want =
                1.0 * v[0] + 1.0 * v[1] + 1.0 * v[2] + 10.0 * v[3] + 1.0 * v[4] + 0.01 * v[5];
            let got = total(&terms, &w).map_err(|e| e.to_string())?.total;
            sums_exact += (got.to_bits() == want.to_bits()) as usize;
        }

        // Per-step CE of a freshly initialized model on toy glyphs.
        let cfg: TrainConfig = read_fixture("overfit_toy.json");
        let model = Model::new(cfg.model.clone(), 5).map_err(|e| e.to_string())?;
        let font = &gen_dataset(5, 2).map_err(|e| e.to_string())?.train[0];
        let n_refs = model.config.n_refs;
        let refs: Vec<Glyph> = font.glyphs[..n_refs]
            .iter()
            .map(|g| g.to_relaxed().unwrap())
            .collect();
        let imgs: Vec<RasterImage> = font.glyphs[..n_refs]
            .iter()
            .map(|g| render(g, model.config.resolution).unwrap())
            .collect();
        let targets: Vec<Glyph> = font
            .glyphs
            .iter()
            .map(|g| g.to_relaxed().unwrap())
            .collect();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let out = model
            .forward_train(&mut g, &b, &refs, &imgs, &targets, None)
            .map_err(|e| e.to_string())?;
        let n = model.config.n_max;
        let preds = split_predictions(&g, out.init, targets.len(), n);
        let (mut cmd, mut arg) = (0.0, 0.0);
        for (p, t) in preds.iter().zip(&targets) {
            let q = quantize_glyph(&t.padded(n).unwrap()).map_err(|e| e.to_string())?;
            let (c, a) = ce_breakdown(p, &q).map_err(|e| e.to_string())?;
            cmd += c / targets.len() as f64;
            arg += a / targets.len() as f64;
        }
        let (ln4, ln256) = (4f64.ln(), (BINS as f64).ln());
        let ce_ok = (cmd / ln4 - 1.0).abs() <= 0.2 && (arg / ln256 - 1.0).abs() <= 0.2;
        ensure(
            kl_err <= 1e-12 && weights_ok && sums_exact == 1000 && ce_ok,
            format!(
                "KL error {kl_err:.1e}; default weights {:?}, {sums_exact}/1000 exact totals; \
                 init CE cmd {cmd:.3} (ln 4 = {ln4:.3}), args {arg:.3} (ln 256 = {ln256:.3})",
                w.values()
            ),
        )
    });
}

// ---------------------------------------------------------------- 6

/// Eight toy fonts; the last repeats the first with another stroke width.
fn overfit_fonts() -> (Vec<Font>, f64, f64) {
    let specs: Vec<ToyFontSpec> = gen_dataset(11, 9).unwrap().specs[..7].to_vec();
    let mut twin = specs[0];
    twin.stroke = if twin.stroke < 0.14 { 0.19 } else { 0.09 };
    let mut fonts: Vec<Font> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| s.font(&format!("overfit-{i}")))
        .collect();
    fonts.push(twin.font("overfit-7"));
    (fonts, specs[0].stroke, twin.stroke)
}

fn mean_fill(out: &[Synthesis]) -> f64 {
    out.iter()
        .map(|s| render(&s.glyph, 64).unwrap().fill_ratio(0.5))
        .sum::<f64>()
        / out.len() as f64
}

#[test]
fn criterion_6_overfit_reproduction() {
    criterion(
        6,
        "overfit reproduction",
        Duration::from_secs(30 * 60),
        || {
            let cfg: TrainConfig = read_fixture("overfit_toy.json");
            if cfg.steps > 5000 {
                return Err(format!("{} steps configured", cfg.steps));
            }
            let (fonts, stroke_a, stroke_b) = overfit_fonts();
            let steps = cfg.steps;
            let mut t = Trainer::new(cfg, &fonts).map_err(|e| e.to_string())?;
            let mut totals = Vec::with_capacity(steps);
            for _ in 0..steps {
                totals.push(t.step().map_err(|e| e.to_string())?.loss.total);
            }
            let refs: Vec<usize> = (0..t.model.config.n_refs).collect();
            let ec = EvalConfig {
                ref_classes: refs.clone(),
                synth: SynthConfig::deterministic(true),
                resolution: 64,
                ..EvalConfig::default()
            };
            let r = evaluate(&t.model, &fonts, &ec).map_err(|e| e.to_string())?;

            let windows: Vec<f64> = totals
                .chunks(500)
                .map(|w| w.iter().sum::<f64>() / w.len() as f64)
                .collect();
            // Side checks on the same run; the verdict covers the criterion alone.
            property(
                "side check: total loss decreases over every 500-step window",
                windows.windows(2).all(|w| w[1] < w[0]),
                format!(
                    "window means {:?}",
                    windows
                        .iter()
                        .map(|m| (m * 1e4).round() / 1e4)
                        .collect::<Vec<_>>()
                ),
            );

            // Styles 0 and 7 differ only in stroke width.
            let style = |f: &Font| {
                let gs: Vec<Glyph> = refs
                    .iter()
                    .map(|&c| f.glyphs[c].to_relaxed().unwrap())
                    .collect();
                let im: Vec<RasterImage> = refs
                    .iter()
                    .map(|&c| render(&f.glyphs[c], t.model.config.resolution).unwrap())
                    .collect();
                t.model.style(&gs, &im, None, None).unwrap()
            };
            let (a, b) = (style(&fonts[0]), style(&fonts[7]));
            let classes: Vec<usize> = (0..t.model.config.n_classes).collect();
            let fill =
                |l: f64| mean_fill(&interpolate(&t.model, &a, &b, l, &classes, true).unwrap().1);
            let sweep: Vec<f64> = (0..=10).map(|k| fill(k as f64 / 10.0)).collect();
            let (f0, fh, f1) = (sweep[0], sweep[5], sweep[10]);
            property(
                "side check: interpolation midpoint fill ratio lies between the endpoints",
                fh > f0.min(f1) && fh < f0.max(f1),
                format!(
                    "stroke {stroke_a:.3} -> {f0:.4}, midpoint {fh:.4}, stroke {stroke_b:.3} -> {f1:.4}; \
                     fill at lambda 0, 0.1, .., 1: {:?}",
                    sweep
                        .iter()
                        .map(|m| (m * 1e4).round() / 1e4)
                        .collect::<Vec<_>>()
                ),
            );

            let gap_limit = 2.0 / 255.0;
            let detail = format!(
            "{steps} steps on {} fonts: mean L1 {:.4} (< 0.05), mean junction gap {:.5} (< {gap_limit:.5}), \
             final window loss {:.4}",
            fonts.len(),
            r.mean_l1,
            r.mean_gap,
            windows.last().copied().unwrap_or(f64::NAN),
        );
            ensure(r.mean_l1 < 0.05 && r.mean_gap < gap_limit, detail)
        },
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_ablation_direction() {
    criterion(
        7,
        "ablation direction",
        Duration::from_secs(2 * 3600),
        || {
            let cfg: AblationConfig = read_fixture("ablate_toy.json");
            if cfg.seeds.len() < 3 {
                return Err(format!("{} seeds configured", cfg.seeds.len()));
            }
            let ds = gen_dataset(7, 30).map_err(|e| e.to_string())?;
            let rows = ablate(&ds.train, &ds.test, &cfg, |r| {
                let _ = writeln!(
                std::io::stderr(),
                "    aux {} seed {}: L1 refined {:.4}, initial {:.4}; CE init {:.4}, refined {:.4}",
                r.aux_points,
                r.seed,
                r.l1_refined,
                r.l1_initial,
                r.ce_init,
                r.ce_refine
            );
            })
            .map_err(|e| e.to_string())?;
            let s = summarize(&rows);
            let by = |a: usize| s.iter().find(|x| x.aux_points == a).cloned();
            let (Some(a0), Some(a3)) = (by(0), by(3)) else {
                return Err("aux 0 and 3 both required".into());
            };
            let n = rows.len() as f64;
            let mean = |f: fn(&vecfont_core::pipeline::AblationRow) -> f64| {
                rows.iter().map(f).sum::<f64>() / n
            };
            let (on, off) = (mean(|r| r.l1_refined), mean(|r| r.l1_initial));
            let (ce_i, ce_r) = (mean(|r| r.ce_init), mean(|r| r.ce_refine));
            ensure(
            a3.l1_refined <= a0.l1_refined && on <= off && ce_r <= ce_i,
            format!(
                "{} seeds on {} test fonts: L1 aux3 {:.4} vs aux0 {:.4}; refinement on {on:.4} vs off {off:.4}; \
                 final-window CE refined {ce_r:.4} vs initial {ce_i:.4}",
                cfg.seeds.len(),
                ds.test.len(),
                a3.l1_refined,
                a0.l1_refined,
            ),
        )
        },
    );
}

// ---------------------------------------------------------------- 8

fn toy_model(seed: u64) -> Model {
    let cfg: TrainConfig = read_fixture("overfit_toy.json");
    Model::new(cfg.model, seed).unwrap()
}

fn references(model: &Model, font: &Font) -> (Vec<Glyph>, Vec<RasterImage>) {
    let n = model.config.n_refs;
    (
        font.glyphs[..n]
            .iter()
            .map(|g| g.to_relaxed().unwrap())
            .collect(),
        font.glyphs[..n]
            .iter()
            .map(|g| render(g, model.config.resolution).unwrap())
            .collect(),
    )
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn same_synthesis(a: &[Synthesis], b: &[Synthesis]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.glyph.commands.len() == y.glyph.commands.len()
                && x.glyph
                    .commands
                    .iter()
                    .zip(&y.glyph.commands)
                    .all(|(c, d)| c.cmd == d.cmd && same_bits(&c.coords(), &d.coords()))
                && same_bits(x.image.pixels(), y.image.pixels())
        })
}

#[test]
fn criterion_8_interpolation_contract() {
    criterion(8, "interpolation contract", Duration::from_secs(60), || {
        let model = toy_model(8);
        let ds = gen_dataset(8, 4).map_err(|e| e.to_string())?;
        let (ra, ia) = references(&model, &ds.train[0]);
        let (rb, ib) = references(&model, &ds.train[1]);
        let a = model
            .style(&ra, &ia, None, None)
            .map_err(|e| e.to_string())?;
        let b = model
            .style(&rb, &ib, None, None)
            .map_err(|e| e.to_string())?;
        let classes: Vec<usize> = (0..model.config.n_classes).collect();
        let mut ok = true;
        let mut notes = Vec::new();
        for (lambda, end, refs, imgs) in [(0.0, &a, &ra, &ia), (1.0, &b, &rb, &ib)] {
            let (s, out) =
                interpolate(&model, &a, &b, lambda, &classes, true).map_err(|e| e.to_string())?;
            let feature = same_bits(&s.f, &end.f)
                && same_bits(&s.mu, &end.mu)
                && same_bits(&s.logvar, &end.logvar)
                && same_bits(s.memory.data(), end.memory.data());
            let direct = synthesize(
                &model,
                refs,
                imgs,
                &classes,
                &SynthConfig::deterministic(true),
            )
            .map_err(|e| e.to_string())?;
            let decoded = same_synthesis(&out, &direct);
            ok &= feature && decoded;
            notes.push(format!(
                "lambda {lambda}: feature {}, decoding {}",
                if feature { "bit-exact" } else { "differs" },
                if decoded { "bit-exact" } else { "differs" }
            ));
        }
        ensure(ok, notes.join("; "))
    });
}

// ---------------------------------------------------------------- 9

fn random_command(rng: &mut ChaCha8Rng) -> QuantizedCommand {
    let cmd = CommandType::from_index(rng.gen_range(0..4)).unwrap();
    let bins = [(); 8].map(|_| rng.gen_range(0..BINS));
    QuantizedCommand::new(cmd, bins, rng.gen_range(0..BINS), rng.gen_range(0..BINS)).unwrap()
}

#[test]
fn criterion_9_refinement_mask() {
    criterion(9, "refinement mask", Duration::from_secs(60), || {
        let model = toy_model(9);
        let n = model.config.n_max;
        let ds = gen_dataset(9, 2).map_err(|e| e.to_string())?;
        let (refs, imgs) = references(&model, &ds.train[0]);
        let style = model
            .style(&refs, &imgs, None, None)
            .map_err(|e| e.to_string())?;
        let rng = &mut ChaCha8Rng::seed_from_u64(9);
        let (mut checked, mut identical, mut trials) = (0usize, 0usize, 0usize);
        for _ in 0..20 {
            // Four sequences per batch, each with its own valid length.
            let valid: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=n)).collect();
            let classes: Vec<usize> = (0..4)
                .map(|_| rng.gen_range(0..model.config.n_classes))
                .collect();
            let base: Vec<Vec<QuantizedCommand>> = (0..4)
                .map(|_| (0..n).map(|_| random_command(rng)).collect())
                .collect();
            let mut perturbed = base.clone();
            for (seq, &v) in perturbed.iter_mut().zip(&valid) {
                for q in &mut seq[v..] {
                    *q = random_command(rng);
                }
            }
            let run = |inputs: &[Vec<QuantizedCommand>]| {
                model.refine_commands(
                    &style.memory,
                    MemoryLayout::Shared,
                    inputs,
                    &valid,
                    &classes,
                )
            };
            let x = run(&base).map_err(|e| e.to_string())?;
            let y = run(&perturbed).map_err(|e| e.to_string())?;
            for ((p, q), &v) in x.iter().zip(&y).zip(&valid) {
                for j in 0..v {
                    checked += 1;
                    let same = same_bits(p.cmd_logits.row(j), q.cmd_logits.row(j))
                        && same_bits(
                            &p.arg_logits.data()[j * 8 * BINS..(j + 1) * 8 * BINS],
                            &q.arg_logits.data()[j * 8 * BINS..(j + 1) * 8 * BINS],
                        );
                    identical += same as usize;
                }
            }
            trials += 1;
        }
        ensure(
            checked > 0 && identical == checked,
            format!(
                "{identical}/{checked} valid positions bit-identical over {trials} batches of 4"
            ),
        )
    });
}
