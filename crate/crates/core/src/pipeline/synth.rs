use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::glyph::{Glyph, RepKind};
use crate::net::{Model, SeqPrediction, StyleFeature};
use crate::raster::{iou, rasterize, FillRule, RasterImage};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of noisy candidates decoded per target (at least 1).
    pub candidates: usize,
    /// Standard deviation of the noise added to the sequence style token.
    pub noise_std: f64,
    pub refine: bool,
    /// Binarization threshold for the IOU selection.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            candidates: 10,
            noise_std: 1.0,
            refine: true,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// One noise-free candidate.
    pub fn deterministic(refine: bool) -> Self {
        Self {
            candidates: 1,
            noise_std: 0.0,
            refine,
            ..Self::default()
        }
    }
}

/// Selected output for one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub char_class: usize,
    /// Merged compact glyph.
    pub glyph: Glyph,
    /// The relaxed sequence it was merged from.
    pub relaxed: Glyph,
    /// Sigmoid output of the image decoder.
    pub image: RasterImage,
    pub chosen: usize,
    /// IOU of every candidate with `image`.
    pub ious: Vec<f64>,
}

fn sigmoid_image(logits: &Tensor, resolution: usize) -> Result<RasterImage> {
    let px = logits
        .data()
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    Ok(RasterImage::new(resolution, px)?)
}

/// Index of the largest score; ties go to the lower index.
fn select(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Decodes each class from `memories` (one `[n_max + 1, d]` memory per
/// candidate), optionally refines, and picks the candidate whose raster
/// best matches the image decoded from `f`.
fn decode_and_select(
    model: &Model,
    f: &[f64],
    memories: &[Tensor],
    classes: &[usize],
    cfg: &SynthConfig,
) -> Result<Vec<Synthesis>> {
    let res = model.config.resolution;
    let d = model.config.d_model;
    let n_c = memories.len();
    let mut images = Vec::with_capacity(classes.len());
    {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let fv = g.constant(Tensor::new(&[1, d], f.to_vec())?);
        for &c in classes {
            let logits = model.decode_image(&mut g, &b, fv, c)?;
            images.push(sigmoid_image(g.value(logits), res)?);
        }
    }
    // Sequence k * n_c + i is class k decoded from candidate i.
    let mut stacked = Vec::with_capacity(classes.len() * n_c * memories[0].numel());
    let mut seq_classes = Vec::with_capacity(classes.len() * n_c);
    for &c in classes {
        for m in memories {
            stacked.extend_from_slice(m.data());
            seq_classes.push(c);
        }
    }
    let rows = seq_classes.len() * (model.config.n_max + 1);
    let memory = Tensor::new(&[rows, d], stacked)?;
    let initial = model.decode_ar(&memory, &seq_classes, model.config.n_max)?;
    let finals: Vec<SeqPrediction> = if cfg.refine {
        model.refine(&memory, &initial, &seq_classes)?
    } else {
        initial
    };
    let mut out = Vec::with_capacity(classes.len());
    for (k, &c) in classes.iter().enumerate() {
        let mut relaxed = Vec::with_capacity(n_c);
        let mut merged = Vec::with_capacity(n_c);
        let mut ious = Vec::with_capacity(n_c);
        for p in &finals[k * n_c..(k + 1) * n_c] {
            let r = p.to_glyph(c);
            let m = r.merge_relaxed()?;
            ious.push(iou(
                &rasterize(&m, res, FillRule::NonZero)?,
                &images[k],
                cfg.threshold,
            )?);
            relaxed.push(r);
            merged.push(m);
        }
        if merged.iter().all(Glyph::is_empty) {
            log::warn!("every candidate for class {c} is empty");
        }
        let chosen = select(&ious);
        out.push(Synthesis {
            char_class: c,
            glyph: merged.swap_remove(chosen),
            relaxed: relaxed.swap_remove(chosen),
            image: images[k].clone(),
            chosen,
            ious,
        });
    }
    Ok(out)
}

/// Few-shot synthesis of `classes` from relaxed reference glyphs and their
/// images.
pub fn synthesize(
    model: &Model,
    refs: &[Glyph],
    ref_images: &[RasterImage],
    classes: &[usize],
    cfg: &SynthConfig,
) -> Result<Vec<Synthesis>> {
    if cfg.candidates == 0 {
        return Err(PipelineError::Config(
            "at least one candidate is required".into(),
        ));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(PipelineError::Domain(format!(
            "noise std {}",
            cfg.noise_std
        )));
    }
    if let Some(r) = refs.iter().find(|r| r.rep_kind != RepKind::Relaxed) {
        return Err(PipelineError::Config(format!(
            "reference of class {} is not relaxed",
            r.char_class
        )));
    }
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let (f_seq, f_img) = model.encode_refs(&mut g, &b, refs, ref_images)?;
    let f0 = g.slice(f_seq, 0, 0, 1)?;
    let clean = model.fuse(&mut g, &b, f_img, f0, None)?;
    let f = g.value(clean.f).data().to_vec();
    let mut memories = Vec::with_capacity(cfg.candidates);
    for _ in 0..cfg.candidates {
        let token = if cfg.noise_std > 0.0 {
            let noise: Vec<f64> = (0..d)
                .map(|_| cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let nv = g.constant(Tensor::new(&[1, d], noise)?);
            g.add(f0, nv)?
        } else {
            f0
        };
        let s = model.fuse(&mut g, &b, f_img, token, None)?;
        let m = model.memory(&mut g, s.f, f_seq)?;
        memories.push(g.value(m).clone());
    }
    decode_and_select(model, &f, &memories, classes, cfg)
}

/// Decodes `classes` from the blend `(1 - lambda) * a + lambda * b` of two
/// deterministic style features.
pub fn interpolate(
    model: &Model,
    a: &StyleFeature,
    b: &StyleFeature,
    lambda: f64,
    classes: &[usize],
    refine: bool,
) -> Result<(StyleFeature, Vec<Synthesis>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PipelineError::Domain(format!(
            "interpolation weight {lambda}"
        )));
    }
    let s = StyleFeature::blend(a, b, lambda)?;
    let out = decode_and_select(
        model,
        &s.f,
        std::slice::from_ref(&s.memory),
        classes,
        &SynthConfig::deterministic(refine),
    )?;
    Ok((s, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::pipeline::{gen_dataset, render};

    fn setup() -> (Model, Vec<Glyph>, Vec<RasterImage>) {
        let cfg = ModelConfig {
            n_max: 24,
            n_classes: 8,
            ..ModelConfig::tiny()
        };
        let model = Model::new(cfg, 5).unwrap();
        let font = &gen_dataset(8, 2).unwrap().train[0];
        let refs: Vec<Glyph> = font.glyphs[..2]
            .iter()
            .map(|g| g.to_relaxed().unwrap())
            .collect();
        let imgs = font.glyphs[..2]
            .iter()
            .map(|g| render(g, 16).unwrap())
            .collect();
        (model, refs, imgs)
    }

    #[test]
    fn single_candidate_is_returned_and_output_is_compact() {
        let (m, refs, imgs) = setup();
        let cfg = SynthConfig {
            candidates: 1,
            ..SynthConfig::default()
        };
        let out = synthesize(&m, &refs, &imgs, &[3, 6], &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for s in &out {
            assert_eq!(s.chosen, 0);
            assert_eq!(s.ious.len(), 1);
            assert_eq!(s.glyph.rep_kind, RepKind::Compact);
            s.glyph.validate().unwrap();
        }
        assert_eq!(out, synthesize(&m, &refs, &imgs, &[3, 6], &cfg).unwrap());
        let zero = SynthConfig {
            candidates: 0,
            ..cfg
        };
        assert!(synthesize(&m, &refs, &imgs, &[3], &zero).is_err());
    }

    #[test]
    fn identical_candidates_tie_to_first_index() {
        let (m, refs, imgs) = setup();
        let cfg = SynthConfig {
            candidates: 4,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let out = synthesize(&m, &refs, &imgs, &[1], &cfg).unwrap();
        assert_eq!(out[0].chosen, 0);
        assert!(out[0].ious.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(select(&[0.2, 0.7, 0.7, 0.1]), 1);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let (m, refs, imgs) = setup();
        let font_b = &gen_dataset(9, 2).unwrap().train[0];
        let refs_b: Vec<Glyph> = font_b.glyphs[..2]
            .iter()
            .map(|g| g.to_relaxed().unwrap())
            .collect();
        let imgs_b: Vec<RasterImage> = font_b.glyphs[..2]
            .iter()
            .map(|g| render(g, 16).unwrap())
            .collect();
        let a = m.style(&refs, &imgs, None, None).unwrap();
        let b = m.style(&refs_b, &imgs_b, None, None).unwrap();
        let (s0, out0) = interpolate(&m, &a, &b, 0.0, &[2], true).unwrap();
        let (s1, _) = interpolate(&m, &a, &b, 1.0, &[2], true).unwrap();
        assert_eq!(s0, a);
        assert_eq!(s1, b);
        let direct = synthesize(&m, &refs, &imgs, &[2], &SynthConfig::deterministic(true)).unwrap();
        assert_eq!(out0, direct);
        assert!(matches!(
            interpolate(&m, &a, &b, 1.5, &[2], true),
            Err(PipelineError::Domain(_))
        ));
    }
}
