//! `vecfont`: conversion, rendering, scoring, training and synthesis of
//! vector glyphs.

mod exit;
mod files;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vecfont_core::pipeline::{
    ablate, gen_dataset, grad_check_suite, interpolate, summarize, synthesize, train,
    AblationConfig, AblationRow, Synthesis, ToyDataset,
};
use vecfont_core::raster::{iou, l1_error};
use vecfont_core::{FillRule, Font, Glyph, Model, RasterImage, SynthConfig, TrainConfig};

use exit::{usage, CliError};
use files::Kind;

/// Threshold on the gradient-check relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "vecfont", version, about = "Vector glyph generation toolkit")]
struct Cli {
    /// Seed of the single random generator used by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; only `ablate` runs work in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert between SVG and glyph JSON-lines, and between compact and
    /// relaxed commands.
    Convert(ConvertArgs),
    /// Rasterize a glyph to PGM or PNG, or write it as SVG.
    Render(RenderArgs),
    /// L1 error and IOU between two images or glyphs (JSON on stdout).
    Score(ScoreArgs),
    /// Generate a seeded toy dataset.
    GenData(GenDataArgs),
    /// Train a model on a toy dataset.
    Train(TrainArgs),
    /// Few-shot synthesis from reference glyphs.
    Synth(SynthArgs),
    /// Decode the blend of two fonts' style features.
    Interp(InterpArgs),
    /// Finite-difference gradient checks (JSON on stdout).
    GradCheck(GradCheckArgs),
    /// Sweep auxiliary-point counts and refinement (JSON on stdout).
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rep {
    Compact,
    Relaxed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rule {
    Nonzero,
    Evenodd,
}

impl From<Rule> for FillRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Nonzero => FillRule::NonZero,
            Rule::Evenodd => FillRule::EvenOdd,
        }
    }
}

#[derive(Args, Debug)]
struct GlyphInput {
    /// Canvas size of bare SVG path data (documents use their viewBox).
    #[arg(long, default_value_t = 1.0)]
    canvas: f64,
    /// Glyph index within a JSON-lines file.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Input `.svg` or `.jsonl`.
    input: PathBuf,
    /// Output `.svg` or `.jsonl`.
    #[arg(short, long)]
    output: PathBuf,
    /// Command representation of JSON-lines output.
    #[arg(long, value_enum, default_value = "compact")]
    to: Rep,
    /// Character class assigned to SVG input.
    #[arg(long, default_value_t = 0)]
    class: usize,
    /// Style id assigned to SVG input.
    #[arg(long, default_value = "svg")]
    style: String,
    #[command(flatten)]
    glyph: GlyphInput,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Input `.svg` or `.jsonl`.
    input: PathBuf,
    /// Output `.pgm`, `.png` or `.svg`.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, value_enum, default_value = "nonzero")]
    fill_rule: Rule,
    #[command(flatten)]
    glyph: GlyphInput,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Image (`.pgm`) or glyph (`.svg`, `.jsonl`).
    a: PathBuf,
    /// Image (`.pgm`) or glyph (`.svg`, `.jsonl`).
    b: PathBuf,
    /// Raster side for glyph operands; defaults to the side of an image
    /// operand, else 64.
    #[arg(long)]
    resolution: Option<usize>,
    /// Binarization threshold of the IOU.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "nonzero")]
    fill_rule: Rule,
    #[command(flatten)]
    glyph: GlyphInput,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    fonts: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(short, long)]
    out: PathBuf,
    /// Metric log path; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Auxiliary points per curve in the Bezier loss.
    #[arg(long)]
    aux: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines file holding the reference font.
    #[arg(long)]
    refs: PathBuf,
    /// Font to use when the reference file holds several.
    #[arg(long)]
    style: Option<String>,
    /// Reference classes; the model uses the first N_r.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    ref_classes: Vec<usize>,
    /// Classes to synthesize; all classes when omitted.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    /// Number of noisy candidates (N_s).
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    no_refine: bool,
    /// Output JSON-lines file of compact glyphs.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write one SVG per glyph into this directory.
    #[arg(long)]
    svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference font a (JSON-lines, one font).
    #[arg(long)]
    a: PathBuf,
    /// Reference font b (JSON-lines, one font).
    #[arg(long)]
    b: PathBuf,
    /// Blend weight in [0, 1]; 0 is font a.
    #[arg(long)]
    lambda: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    ref_classes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    #[arg(long)]
    no_refine: bool,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Also check the tiny model and the training objective.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Parameter coordinates sampled per tensor (0 checks all).
    #[arg(long, default_value_t = 8)]
    per_tensor: usize,
    /// Coordinates sampled per model output for the objective check.
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Dataset directory; a toy set of `--fonts` fonts is generated from
    /// `--seed` when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    fonts: usize,
    /// Ablation configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Auxiliary-point counts to compare.
    #[arg(long, value_delimiter = ',')]
    aux: Vec<usize>,
    /// Training seeds per count.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn convert(a: &ConvertArgs) -> Result<()> {
    let fonts = match files::kind(&a.input)? {
        Kind::Svg => vec![Font {
            style_id: a.style.clone(),
            glyphs: vec![files::read_svg(&a.input, a.glyph.canvas, a.class)?],
        }],
        Kind::Jsonl => files::read_fonts(&a.input)?,
        _ => return Err(usage("convert reads .svg or .jsonl")),
    };
    match files::kind(&a.output)? {
        Kind::Svg => {
            let all: Vec<&Glyph> = fonts.iter().flat_map(|f| &f.glyphs).collect();
            let g = all
                .get(a.glyph.index)
                .ok_or_else(|| usage(format!("glyph {} of {}", a.glyph.index, all.len())))?;
            files::write_svg(&a.output, g, a.glyph.canvas)
        }
        Kind::Jsonl => {
            let mut out = fonts;
            for f in &mut out {
                for g in &mut f.glyphs {
                    let c = files::compact(g)?;
                    *g = match a.to {
                        Rep::Compact => c,
                        Rep::Relaxed => c.to_relaxed()?,
                    };
                }
            }
            files::write_fonts(&a.output, &out)
        }
        _ => Err(usage("convert writes .svg or .jsonl")),
    }
}

fn render(a: &RenderArgs) -> Result<()> {
    let g = files::compact(&files::read_glyph(&a.input, a.glyph.index, a.glyph.canvas)?)?;
    match files::kind(&a.output)? {
        Kind::Svg => files::write_svg(&a.output, &g, a.glyph.canvas),
        Kind::Pgm | Kind::Png => {
            let img = vecfont_core::raster::rasterize(&g, a.resolution, a.fill_rule.into())?;
            files::write_image(&a.output, &img)
        }
        Kind::Jsonl => Err(usage("render writes .pgm, .png or .svg")),
    }
}

fn score(a: &ScoreArgs) -> Result<()> {
    let image_side = [&a.a, &a.b]
        .into_iter()
        .find(|p| matches!(files::kind(p), Ok(Kind::Pgm)))
        .map(|p| files::read_pgm(p).map(|i| i.resolution()))
        .transpose()?;
    let res = a.resolution.or(image_side).unwrap_or(64);
    let load =
        |p: &Path| files::read_raster(p, res, a.glyph.index, a.glyph.canvas, a.fill_rule.into());
    let (x, y) = (load(&a.a)?, load(&a.b)?);
    if x.resolution() != y.resolution() {
        return Err(usage(format!(
            "resolutions differ: {} vs {}",
            x.resolution(),
            y.resolution()
        )));
    }
    let out = serde_json::json!({
        "l1": l1_error(&x, &y)?,
        "iou": iou(&x, &y, a.threshold)?,
        "resolution": x.resolution(),
    });
    println!("{out}");
    Ok(())
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    let ds = gen_dataset(seed, a.fonts)?;
    ds.write(&a.out, a.resolution)?;
    log::info!(
        "wrote {} train and {} test fonts to {}",
        ds.train.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(x) = a.aux {
        cfg.aux_points = x;
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    let ds = ToyDataset::read(&a.data)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let log = BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    log::info!(
        "training {} steps on {} fonts; log {}",
        cfg.steps,
        ds.train.len(),
        log_path.display()
    );
    let start = Instant::now();
    let (_, history) = train(cfg, &ds.train, log, Some(&a.out))?;
    if let Some(last) = history.last() {
        log::info!(
            "step {} total {:.4} in {:.1}s; checkpoint {}",
            last.step,
            last.loss.total,
            start.elapsed().as_secs_f64(),
            a.out.display()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .0)
}

/// Relaxed references and their renders for the model.
fn references(
    model: &Model,
    font: &Font,
    classes: &[usize],
) -> Result<(Vec<Glyph>, Vec<RasterImage>)> {
    let n = model.config.n_refs;
    if classes.len() < n {
        return Err(usage(format!(
            "{} reference classes given, the model takes {n}",
            classes.len()
        )));
    }
    let mut refs = Vec::with_capacity(n);
    let mut imgs = Vec::with_capacity(n);
    for &c in &classes[..n] {
        let g = font
            .glyph(c)
            .ok_or_else(|| usage(format!("font {} has no class {c}", font.style_id)))?;
        let compact = files::compact(g)?;
        imgs.push(vecfont_core::pipeline::render(
            &compact,
            model.config.resolution,
        )?);
        refs.push(compact.to_relaxed()?);
    }
    Ok((refs, imgs))
}

fn targets(model: &Model, classes: &[usize]) -> Vec<usize> {
    if classes.is_empty() {
        (0..model.config.n_classes).collect()
    } else {
        classes.to_vec()
    }
}

fn write_synthesis(
    out: &Path,
    svg_dir: Option<&Path>,
    style_id: &str,
    result: &[Synthesis],
) -> Result<()> {
    let font = Font {
        style_id: style_id.to_string(),
        glyphs: result.iter().map(|s| s.glyph.clone()).collect(),
    };
    files::write_fonts(out, std::slice::from_ref(&font))?;
    if let Some(dir) = svg_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for g in &font.glyphs {
            files::write_svg(
                &dir.join(format!("{style_id}_{}.svg", g.char_class)),
                g,
                1.0,
            )?;
        }
    }
    for s in result {
        log::info!(
            "class {}: candidate {} of {} (IOU {:.3}), {} commands",
            s.char_class,
            s.chosen,
            s.ious.len(),
            s.ious[s.chosen],
            s.glyph.len()
        );
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let font = files::pick_font(&a.refs, a.style.as_deref())?;
    let (refs, imgs) = references(&model, &font, &a.ref_classes)?;
    let cfg = SynthConfig {
        candidates: a.candidates,
        noise_std: a.noise,
        refine: !a.no_refine,
        seed,
        ..SynthConfig::default()
    };
    let out = synthesize(&model, &refs, &imgs, &targets(&model, &a.classes), &cfg)?;
    write_synthesis(
        &a.out,
        a.svg_dir.as_deref(),
        &format!("{}-synth", font.style_id),
        &out,
    )
}

fn interp(a: &InterpArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let style = |p: &Path| -> Result<_> {
        let font = files::pick_font(p, None)?;
        let (refs, imgs) = references(&model, &font, &a.ref_classes)?;
        Ok((font.style_id, model.style(&refs, &imgs, None, None)?))
    };
    let (id_a, fa) = style(&a.a)?;
    let (id_b, fb) = style(&a.b)?;
    let (_, out) = interpolate(
        &model,
        &fa,
        &fb,
        a.lambda,
        &targets(&model, &a.classes),
        !a.no_refine,
    )?;
    write_synthesis(
        &a.out,
        a.svg_dir.as_deref(),
        &format!("{id_a}-{id_b}-{}", a.lambda),
        &out,
    )
}

fn grad_check(a: &GradCheckArgs, seed: u64) -> Result<()> {
    let start = Instant::now();
    let (report, max) = if a.tiny {
        let r = grad_check_suite(seed, a.eps, a.per_tensor, a.samples)?;
        let max = r.max_rel_error;
        (serde_json::to_value(&r)?, max)
    } else {
        let ops = vecfont_core::tensor::op_suite(seed, a.eps)?;
        let max = ops.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        (serde_json::json!({ "ops": ops, "max_rel_error": max }), max)
    };
    println!(
        "{}",
        serde_json::json!({
            "max_rel_error": max,
            "tolerance": GRAD_TOLERANCE,
            "passed": max < GRAD_TOLERANCE,
            "report": report,
        })
    );
    log::info!(
        "max relative error {max:.3e} (tolerance {GRAD_TOLERANCE:e}) in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    if max < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {max:e} exceeds {GRAD_TOLERANCE:e}"
        ))
        .into())
    }
}

fn run_ablate(a: &AblateArgs, seed: u64, threads: usize) -> Result<()> {
    let mut cfg: AblationConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AblationConfig::default(),
    };
    if !a.aux.is_empty() {
        cfg.aux_points = a.aux.clone();
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
        cfg.ce_window = cfg.ce_window.min(s);
    }
    let ds = match &a.data {
        Some(dir) => ToyDataset::read(dir)?,
        None => gen_dataset(seed, a.fonts)?,
    };
    let runs: Vec<(usize, u64)> = cfg
        .aux_points
        .iter()
        .flat_map(|&x| cfg.seeds.iter().map(move |&s| (x, s)))
        .collect();
    log::info!(
        "{} runs of {} steps on {} train / {} test fonts",
        runs.len(),
        cfg.train.steps,
        ds.train.len(),
        ds.test.len()
    );
    let start = Instant::now();
    let one = |(x, s): (usize, u64)| -> Result<AblationRow> {
        let c = AblationConfig {
            aux_points: vec![x],
            seeds: vec![s],
            ..cfg.clone()
        };
        let rows = ablate(&ds.train, &ds.test, &c, |r| {
            log::info!(
                "{:.1}s aux {} seed {}: l1 refined {:.4} initial {:.4}",
                start.elapsed().as_secs_f64(),
                r.aux_points,
                r.seed,
                r.l1_refined,
                r.l1_initial
            )
        })?;
        Ok(rows.into_iter().next().expect("one run per config"))
    };
    let mut results: Vec<Option<Result<AblationRow>>> = (0..runs.len()).map(|_| None).collect();
    // Run i goes to worker i % threads; each run is seeded on its own, so
    // the output does not depend on the thread count.
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads.min(runs.len()).max(1))
            .map(|w| {
                let runs = &runs;
                let one = &one;
                scope.spawn(move || {
                    (w..runs.len())
                        .step_by(threads)
                        .map(|i| (i, one(runs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let rows = results
        .into_iter()
        .map(|r| r.expect("every run assigned"))
        .collect::<Result<Vec<_>>>()?;
    let out = serde_json::json!({ "summary": summarize(&rows), "rows": rows });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    match &cli.command {
        Command::Convert(a) => convert(a),
        Command::Render(a) => render(a),
        Command::Score(a) => score(a),
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Synth(a) => synth(a, cli.seed),
        Command::Interp(a) => interp(a),
        Command::GradCheck(a) => grad_check(a, cli.seed),
        Command::Ablate(a) => run_ablate(a, cli.seed, cli.threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_and_unknown_ones_are_rejected() {
        let cli =
            Cli::try_parse_from(["vecfont", "ablate", "--aux", "0,3", "--seed", "4"]).unwrap();
        assert_eq!(cli.seed, 4);
        assert_eq!(cli.threads, 1);
        match cli.command {
            Command::Ablate(a) => assert_eq!(a.aux, vec![0, 3]),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["vecfont", "score", "a.pgm", "b.pgm", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["vecfont", "interp"]).is_err());
    }
}
