use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{render, PipelineError, Result};
use crate::bezier::AuxParams;
use crate::embedding::quantize_glyph;
use crate::glyph::{Font, Glyph};
use crate::net::{Model, ModelConfig};
use crate::objective::{training_loss, LossReport, LossWeights, ObjectiveError, PerceptualNet};
use crate::raster::RasterImage;
use crate::tensor::{Adam, AdamConfig, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Interior Bezier samples per command for the alignment loss.
    pub aux_points: usize,
    pub perceptual: bool,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Targets decoded per step; 0 means every glyph of the font.
    pub targets_per_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 5000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            aux_points: 3,
            perceptual: true,
            clip_norm: Some(1.0),
            targets_per_step: 0,
            seed: 0,
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

struct Prepared {
    relaxed: Vec<Glyph>,
    images: Vec<RasterImage>,
}

/// Stateful training loop over a fixed set of fonts.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    fonts: Vec<Prepared>,
    aux: AuxParams,
    perceptual: Option<PerceptualNet>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, fonts: &[Font]) -> Result<Self> {
        let model = Model::new(config.model.clone(), config.seed)?;
        Self::with_model(model, config, fonts)
    }

    /// Continues from an existing model; `config.model` is replaced by the
    /// model's own configuration.
    pub fn with_model(model: Model, mut config: TrainConfig, fonts: &[Font]) -> Result<Self> {
        config.model = model.config.clone();
        let mc = &config.model;
        if fonts.is_empty() {
            return Err(PipelineError::Config("training set is empty".into()));
        }
        let mut prepared = Vec::with_capacity(fonts.len());
        for font in fonts {
            if font.glyphs.len() < mc.n_refs {
                return Err(PipelineError::Config(format!(
                    "font {} has {} glyphs, fewer than {} references",
                    font.style_id,
                    font.glyphs.len(),
                    mc.n_refs
                )));
            }
            let mut relaxed = Vec::new();
            let mut images = Vec::new();
            for g in &font.glyphs {
                if g.char_class >= mc.n_classes || g.len() > mc.n_max {
                    return Err(PipelineError::Config(format!(
                        "glyph {} of {} does not fit the model (class or length)",
                        g.char_class, font.style_id
                    )));
                }
                relaxed.push(g.to_relaxed()?);
                images.push(render(g, mc.resolution)?);
            }
            prepared.push(Prepared { relaxed, images });
        }
        let adam = Adam::new(config.adam, model.store.tensors());
        Ok(Self {
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e),
            fonts: prepared,
            aux: AuxParams::uniform(config.aux_points),
            perceptual: config.perceptual.then(|| PerceptualNet::new(config.seed)),
            step: 0,
            model,
            config,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One teacher-forced update on a random font. On a non-finite loss or
    /// gradient the parameters are left untouched.
    pub fn step(&mut self) -> Result<StepLog> {
        let mc = &self.config.model;
        let font = &self.fonts[self.rng.gen_range(0..self.fonts.len())];
        let n_glyphs = font.relaxed.len();
        let ref_idx = sample(&mut self.rng, n_glyphs, mc.n_refs).into_vec();
        let tgt_idx: Vec<usize> = match self.config.targets_per_step {
            0 => (0..n_glyphs).collect(),
            k => sample(&mut self.rng, n_glyphs, k.min(n_glyphs)).into_vec(),
        };
        let eps: Vec<f64> = (0..mc.d_model)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();

        let refs: Vec<Glyph> = ref_idx.iter().map(|&i| font.relaxed[i].clone()).collect();
        let ref_images: Vec<RasterImage> =
            ref_idx.iter().map(|&i| font.images[i].clone()).collect();
        let targets: Vec<Glyph> = tgt_idx.iter().map(|&i| font.relaxed[i].clone()).collect();
        let target_images: Vec<RasterImage> =
            tgt_idx.iter().map(|&i| font.images[i].clone()).collect();
        let quant = targets
            .iter()
            .map(|t| Ok(quantize_glyph(&t.padded(mc.n_max)?)?))
            .collect::<Result<Vec<_>>>()?;

        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let out = self
            .model
            .forward_train(&mut g, &b, &refs, &ref_images, &targets, Some(&eps))?;
        let lv = training_loss(
            &mut g,
            &out,
            &quant,
            &target_images,
            &self.config.weights,
            &self.aux,
            self.perceptual.as_ref(),
        )?;
        let report = match lv.report(&g, &self.config.weights) {
            Ok(r) => r,
            Err(ObjectiveError::NonFinite { term, .. }) => {
                return Err(PipelineError::NonFinite {
                    step: self.step,
                    term: term.to_string(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        g.backward(lv.total)?;
        let mut grads: Vec<Option<Vec<f64>>> = b
            .vars
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec))
            .collect();
        let sq: f64 = grads.iter().flatten().flatten().map(|x| x * x).sum();
        if !sq.is_finite() {
            return Err(PipelineError::NonFinite {
                step: self.step,
                term: "gradient".into(),
            });
        }
        if let Some(max) = self.config.clip_norm {
            let norm = sq.sqrt();
            if norm > max {
                let s = max / norm;
                grads.iter_mut().flatten().flatten().for_each(|x| *x *= s);
            }
        }
        self.adam.update(self.model.store.tensors_mut(), &grads);
        let log = StepLog {
            step: self.step,
            loss: report,
        };
        self.step += 1;
        Ok(log)
    }
}

/// Runs `config.steps` updates, writing one JSON line per step to `log`.
/// When `checkpoint` is given the final model is saved there; on a
/// non-finite loss the last good parameters are saved instead and the
/// error is returned.
pub fn train<W: Write>(
    config: TrainConfig,
    fonts: &[Font],
    mut log: W,
    checkpoint: Option<&Path>,
) -> Result<(Model, Vec<StepLog>)> {
    let steps = config.steps;
    let mut trainer = Trainer::new(config, fonts)?;
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        match trainer.step() {
            Ok(entry) => {
                serde_json::to_writer(&mut log, &entry)
                    .map_err(|e| PipelineError::Format(e.to_string()))?;
                log.write_all(b"\n")?;
                history.push(entry);
            }
            Err(e @ PipelineError::NonFinite { .. }) => {
                if let Some(path) = checkpoint {
                    log::warn!("{e}; saving last good parameters to {}", path.display());
                    trainer.model.save(path, checkpoint_meta(&trainer))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    log.flush()?;
    if let Some(path) = checkpoint {
        trainer.model.save(path, checkpoint_meta(&trainer))?;
    }
    Ok((trainer.model, history))
}

fn checkpoint_meta(t: &Trainer) -> serde_json::Value {
    serde_json::json!({ "step": t.steps_done(), "train": t.config })
}
