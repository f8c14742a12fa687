use serde::{Deserialize, Serialize};

use super::{render, synthesize, PipelineError, Result, SynthConfig, TrainConfig, Trainer};
use crate::embedding::quantize_glyph;
use crate::glyph::{Font, Glyph};
use crate::net::{split_predictions, Model};
use crate::objective::loss_ce;
use crate::raster::{l1_error, RasterImage};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Classes used as references; the first `n_refs` are taken.
    pub ref_classes: Vec<usize>,
    /// Classes to synthesize; empty means every class of the font.
    pub target_classes: Vec<usize>,
    pub synth: SynthConfig,
    /// Side of the rasters compared by the L1 error.
    pub resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ref_classes: vec![0, 1, 2, 3],
            target_classes: Vec::new(),
            synth: SynthConfig::default(),
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphEval {
    pub style_id: String,
    pub char_class: usize,
    pub l1: f64,
    /// Endpoint gaps between consecutive relaxed commands before merging.
    pub gaps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_l1: f64,
    /// Mean over every junction of every glyph; 0 when there are none.
    pub mean_gap: f64,
    pub max_gap: f64,
    pub glyphs: Vec<GlyphEval>,
}

/// One trained model of an ablation sweep, evaluated with and without
/// refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub aux_points: usize,
    pub seed: u64,
    pub l1_refined: f64,
    pub l1_initial: f64,
    /// Training-log means of the two CE terms over the last steps.
    pub ce_init: f64,
    pub ce_refine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub aux_points: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    /// Final training steps averaged for the CE comparison.
    pub ce_window: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            aux_points: vec![0, 3],
            seeds: vec![1, 2, 3],
            eval: EvalConfig::default(),
            ce_window: 500,
        }
    }
}

/// Mean over seeds of each column, per aux-point count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub aux_points: usize,
    pub l1_refined: f64,
    pub l1_initial: f64,
    pub ce_init: f64,
    pub ce_refine: f64,
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut auxes: Vec<usize> = rows.iter().map(|r| r.aux_points).collect();
    auxes.sort_unstable();
    auxes.dedup();
    auxes
        .into_iter()
        .map(|a| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.aux_points == a).collect();
            let mean = |f: fn(&AblationRow) -> f64| {
                sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64
            };
            AblationSummary {
                aux_points: a,
                l1_refined: mean(|r| r.l1_refined),
                l1_initial: mean(|r| r.l1_initial),
                ce_init: mean(|r| r.ce_init),
                ce_refine: mean(|r| r.ce_refine),
            }
        })
        .collect()
}

/// Trains one model per (aux-point count, seed) on `train` and evaluates
/// it on `test` with refinement on and off. `progress` receives each row
/// as it completes.
pub fn ablate(
    train: &[Font],
    test: &[Font],
    cfg: &AblationConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if cfg.ce_window == 0 || cfg.ce_window > cfg.train.steps {
        return Err(PipelineError::Config(format!(
            "CE window {} must be in 1..={}",
            cfg.ce_window, cfg.train.steps
        )));
    }
    let mut rows = Vec::new();
    for &aux in &cfg.aux_points {
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                aux_points: aux,
                seed,
                ..cfg.train.clone()
            };
            let mut t = Trainer::new(tc, train)?;
            let (mut ci, mut cr) = (0.0, 0.0);
            for s in 0..cfg.train.steps {
                let log = t.step()?;
                if s >= cfg.train.steps - cfg.ce_window {
                    ci += log.loss.terms.l_ce_init;
                    cr += log.loss.terms.l_ce_refine;
                }
            }
            let mut ec = cfg.eval.clone();
            ec.synth.seed = seed;
            ec.synth.refine = true;
            let refined = evaluate(&t.model, test, &ec)?;
            ec.synth.refine = false;
            let initial = evaluate(&t.model, test, &ec)?;
            let row = AblationRow {
                aux_points: aux,
                seed,
                l1_refined: refined.mean_l1,
                l1_initial: initial.mean_l1,
                ce_init: ci / cfg.ce_window as f64,
                ce_refine: cr / cfg.ce_window as f64,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn references(
    model: &Model,
    font: &Font,
    ref_classes: &[usize],
) -> Result<(Vec<Glyph>, Vec<RasterImage>)> {
    let n = model.config.n_refs;
    if ref_classes.len() < n {
        return Err(PipelineError::Config(format!(
            "{} reference classes given, the model takes {n}",
            ref_classes.len()
        )));
    }
    let mut refs = Vec::with_capacity(n);
    let mut imgs = Vec::with_capacity(n);
    for &c in &ref_classes[..n] {
        let g = font.glyph(c).ok_or_else(|| {
            PipelineError::Config(format!("font {} has no class {c}", font.style_id))
        })?;
        refs.push(g.to_relaxed()?);
        imgs.push(render(g, model.config.resolution)?);
    }
    Ok((refs, imgs))
}

/// Synthesizes the target classes of every font from its own references
/// and compares with the ground truth.
pub fn evaluate(model: &Model, fonts: &[Font], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut glyphs = Vec::new();
    for font in fonts {
        let (refs, imgs) = references(model, font, &cfg.ref_classes)?;
        let classes: Vec<usize> = if cfg.target_classes.is_empty() {
            font.glyphs.iter().map(|g| g.char_class).collect()
        } else {
            cfg.target_classes.clone()
        };
        let out = synthesize(model, &refs, &imgs, &classes, &cfg.synth)?;
        for s in out {
            let gt = font.glyph(s.char_class).ok_or_else(|| {
                PipelineError::Config(format!(
                    "font {} has no class {}",
                    font.style_id, s.char_class
                ))
            })?;
            let l1 = l1_error(
                &render(&s.glyph, cfg.resolution)?,
                &render(gt, cfg.resolution)?,
            )?;
            glyphs.push(GlyphEval {
                style_id: font.style_id.clone(),
                char_class: s.char_class,
                l1,
                gaps: s.relaxed.junction_gaps()?,
            });
        }
    }
    if glyphs.is_empty() {
        return Err(PipelineError::Config("nothing to evaluate".into()));
    }
    let mean_l1 = glyphs.iter().map(|g| g.l1).sum::<f64>() / glyphs.len() as f64;
    let gaps: Vec<f64> = glyphs.iter().flat_map(|g| g.gaps.iter().copied()).collect();
    let mean_gap = if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    Ok(EvalReport {
        mean_l1,
        mean_gap,
        max_gap: gaps.iter().copied().fold(0.0, f64::max),
        glyphs,
    })
}

/// Teacher-forced cross-entropy of the initial and refined predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeComparison {
    pub init: f64,
    pub refined: f64,
}

/// Mean sequence CE over every glyph of `fonts`, with the deterministic
/// style of each font's references.
pub fn ce_comparison(model: &Model, fonts: &[Font], ref_classes: &[usize]) -> Result<CeComparison> {
    let n = model.config.n_max;
    let (mut init, mut refined, mut count) = (0.0, 0.0, 0usize);
    for font in fonts {
        let (refs, imgs) = references(model, font, ref_classes)?;
        let targets: Vec<Glyph> = font
            .glyphs
            .iter()
            .map(|g| g.to_relaxed())
            .collect::<Result<_, _>>()?;
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let out = model.forward_train(&mut g, &b, &refs, &imgs, &targets, None)?;
        let pi = split_predictions(&g, out.init, targets.len(), n);
        let pr = split_predictions(&g, out.refined, targets.len(), n);
        for (t, (a, r)) in targets.iter().zip(pi.iter().zip(&pr)) {
            let q = quantize_glyph(&t.padded(n)?)?;
            init += loss_ce(a, &q, 1.0)?;
            refined += loss_ce(r, &q, 1.0)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(PipelineError::Config("nothing to evaluate".into()));
    }
    Ok(CeComparison {
        init: init / count as f64,
        refined: refined / count as f64,
    })
}
