use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render, Result};
use crate::bezier::AuxParams;
use crate::embedding::{quantize_glyph, QuantizedCommand};
use crate::glyph::{parse_svg_path, Glyph};
use crate::net::{Model, ModelConfig, SeqVars, StyleVars, TrainOutputs};
use crate::objective::{training_loss, LossWeights, PerceptualNet};
use crate::raster::RasterImage;
use crate::tensor::{
    gradient_pairs, op_suite, relative_error, vector_relative_error, Graph, Tensor, TensorError,
    Var,
};

/// Comparison of the sampled gradient entries of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    /// Relative error of the sampled gradient vector.
    pub rel_error: f64,
    /// Largest per-coordinate relative error.
    pub coord_error: f64,
    pub coordinates: usize,
}

impl TensorCheck {
    fn new(name: String, analytic: &[f64], numeric: &[f64]) -> Self {
        Self {
            name,
            rel_error: vector_relative_error(analytic, numeric),
            coord_error: analytic
                .iter()
                .zip(numeric)
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0, f64::max),
            coordinates: analytic.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradReport {
    /// Largest per-tensor relative error.
    pub max_rel_error: f64,
    pub max_coord_error: f64,
    pub per_tensor: Vec<TensorCheck>,
    pub coordinates: usize,
    pub parameters: usize,
}

fn worst(checks: &[TensorCheck]) -> (f64, f64) {
    checks.iter().fold((0.0, 0.0), |(r, c), t| {
        (f64::max(r, t.rel_error), f64::max(c, t.coord_error))
    })
}

struct Batch {
    refs: Vec<Glyph>,
    ref_images: Vec<RasterImage>,
    targets: Vec<Glyph>,
    target_images: Vec<RasterImage>,
    quant: Vec<Vec<QuantizedCommand>>,
    eps: Vec<f64>,
}

/// Short glyphs that fit `N_max = 6`, one per class of the tiny config.
const TINY_GLYPHS: [&str; 3] = [
    "M 2 2 L 14 3 L 13 14 L 3 13 Z",
    "M 8 1 C 15 1 15 15 8 15 C 1 15 1 1 8 1",
    "M 1 15 L 8 2 L 15 15 Z",
];

fn tiny_batch(cfg: &ModelConfig) -> Result<Batch> {
    let mut glyphs = Vec::new();
    for (c, text) in TINY_GLYPHS.iter().enumerate().take(cfg.n_classes) {
        let mut g = parse_svg_path(text, 16.0)?;
        g.char_class = c;
        glyphs.push(g);
    }
    let images = glyphs
        .iter()
        .map(|g| render(g, cfg.resolution))
        .collect::<Result<Vec<_>>>()?;
    let relaxed = glyphs
        .iter()
        .map(|g| g.to_relaxed())
        .collect::<Result<Vec<_>, _>>()?;
    let quant = relaxed
        .iter()
        .map(|g| Ok(quantize_glyph(&g.padded(cfg.n_max)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        refs: relaxed[..cfg.n_refs].to_vec(),
        ref_images: images[..cfg.n_refs].to_vec(),
        targets: relaxed,
        target_images: images,
        quant,
        eps: (0..cfg.d_model).map(|i| ((i as f64) * 0.7).sin()).collect(),
    })
}

/// What the check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    /// The weighted training loss.
    TrainingLoss,
    /// A fixed random linear functional of every model output (image
    /// logits, both sequence logit sets, f, mu and logvar).
    OutputProbe,
}

struct Objective {
    batch: Batch,
    weights: LossWeights,
    aux: AuxParams,
    perceptual: PerceptualNet,
    target: CheckTarget,
    probe_seed: u64,
}

impl Objective {
    /// Scalar objective, with parameter gradients when `grads` is set.
    fn eval(&self, model: &Model, grads: bool) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let b = &self.batch;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, grads);
        let out = model.forward_train(
            &mut g,
            &bound,
            &b.refs,
            &b.ref_images,
            &b.targets,
            Some(&b.eps),
        )?;
        let total = match self.target {
            CheckTarget::TrainingLoss => {
                training_loss(
                    &mut g,
                    &out,
                    &b.quant,
                    &b.target_images,
                    &self.weights,
                    &self.aux,
                    Some(&self.perceptual),
                )?
                .total
            }
            CheckTarget::OutputProbe => {
                let rng = &mut ChaCha8Rng::seed_from_u64(self.probe_seed);
                let mut outputs = out.img_logits.clone();
                outputs.extend([
                    out.init.cmd,
                    out.init.args,
                    out.refined.cmd,
                    out.refined.args,
                    out.style.f,
                    out.style.mu,
                    out.style.logvar,
                ]);
                let mut acc = g.constant(Tensor::scalar(0.0));
                for y in outputs {
                    let r = g.constant(Tensor::randn(g.shape(y), 1.0, rng));
                    let p = g.mul(y, r)?;
                    let s = g.sum(p);
                    acc = g.add(acc, s)?;
                }
                acc
            }
        };
        let value = g.value(total).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(total)?;
        Ok((
            value,
            bound
                .vars
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec))
                .collect(),
        ))
    }
}

/// Central-difference check of the tiny model with respect to its
/// parameters. `per_tensor` coordinates are drawn from every parameter
/// tensor (all of them when the tensor is smaller; 0 means all); the
/// weights are optionally perturbed by Gaussian noise first.
pub fn model_grad_check(
    target: CheckTarget,
    seed: u64,
    eps: f64,
    per_tensor: usize,
    weight_noise: f64,
) -> Result<ModelGradReport> {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(cfg.clone(), seed)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    if weight_noise > 0.0 {
        for t in model.store.tensors_mut() {
            let noise = Tensor::randn(t.shape(), weight_noise, rng);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(w, n)| *w += n);
        }
    }
    let obj = Objective {
        batch: tiny_batch(&cfg)?,
        weights: LossWeights::default(),
        aux: AuxParams::uniform(3),
        perceptual: PerceptualNet::new(seed),
        target,
        probe_seed: seed ^ 0x5eed,
    };
    let (_, analytic) = obj.eval(&model, true)?;
    let mut per = Vec::new();
    for ti in 0..model.store.len() {
        let n = model.store.get(ti).numel();
        let coords = if per_tensor == 0 || per_tensor >= n {
            (0..n).collect::<Vec<_>>()
        } else {
            sample(rng, n, per_tensor).into_vec()
        };
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for k in coords {
            let orig = model.store.get(ti).data()[k];
            model.store.tensors_mut()[ti].data_mut()[k] = orig + eps;
            let (plus, _) = obj.eval(&model, false)?;
            model.store.tensors_mut()[ti].data_mut()[k] = orig - eps;
            let (minus, _) = obj.eval(&model, false)?;
            model.store.tensors_mut()[ti].data_mut()[k] = orig;
            num.push((plus - minus) / (2.0 * eps));
            a.push(analytic[ti].as_ref().map_or(0.0, |g| g[k]));
        }
        per.push(TensorCheck::new(model.store.names()[ti].clone(), &a, &num));
    }
    let (max_rel_error, max_coord_error) = worst(&per);
    Ok(ModelGradReport {
        max_rel_error,
        max_coord_error,
        coordinates: per.iter().map(|t| t.coordinates).sum(),
        per_tensor: per,
        parameters: model.store.numel(),
    })
}

/// Central-difference check of the training loss with respect to every
/// model output it reads (image logits, both logit sets, mu, logvar), at
/// up to `samples` random coordinates of each output.
pub fn objective_grad_check(seed: u64, eps: f64, samples: usize) -> Result<Vec<TensorCheck>> {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone(), seed)?;
    let batch = tiny_batch(&cfg)?;
    let weights = LossWeights::default();
    let aux = AuxParams::uniform(3);
    let perceptual = PerceptualNet::new(seed);

    // Reference outputs, and the refiner input lengths they imply.
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let out = model.forward_train(
        &mut g,
        &bound,
        &batch.refs,
        &batch.ref_images,
        &batch.targets,
        Some(&batch.eps),
    )?;
    let mut parts: Vec<Var> = out.img_logits.clone();
    parts.extend([
        out.init.cmd,
        out.init.args,
        out.refined.cmd,
        out.refined.args,
        out.style.mu,
        out.style.logvar,
    ]);
    let shapes: Vec<Vec<usize>> = parts.iter().map(|&v| g.shape(v).to_vec()).collect();
    let mut flat = Vec::new();
    for &v in &parts {
        flat.extend_from_slice(g.value(v).data());
    }
    let x = Tensor::from_vec(flat);
    let n_img = out.img_logits.len();
    let init_lengths = out.init_lengths.clone();

    let f = |g: &mut Graph, x: Var| -> crate::tensor::Result<Var> {
        let mut vars = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            let piece = g.slice(x, 0, at, at + n)?;
            vars.push(g.reshape(piece, s)?);
            at += n;
        }
        let (mu, logvar) = (vars[n_img + 4], vars[n_img + 5]);
        // The reparameterized f only feeds the image decoder, whose output
        // is already an input here.
        let outputs = TrainOutputs {
            img_logits: vars[..n_img].to_vec(),
            init: SeqVars {
                cmd: vars[n_img],
                args: vars[n_img + 1],
            },
            refined: SeqVars {
                cmd: vars[n_img + 2],
                args: vars[n_img + 3],
            },
            style: StyleVars { f: mu, mu, logvar },
            init_lengths: init_lengths.clone(),
        };
        let lv = training_loss(
            g,
            &outputs,
            &batch.quant,
            &batch.target_images,
            &weights,
            &aux,
            Some(&perceptual),
        )
        .map_err(|e| TensorError::Invalid {
            op: "training_loss",
            msg: e.to_string(),
        })?;
        Ok(lv.total)
    };
    let mut names: Vec<String> = (0..n_img).map(|c| format!("img_logits.{c}")).collect();
    names.extend(
        [
            "init.cmd",
            "init.args",
            "refined.cmd",
            "refined.args",
            "mu",
            "logvar",
        ]
        .map(String::from),
    );
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    let mut spans = Vec::new();
    let mut at = 0;
    for s in &shapes {
        let n: usize = s.iter().product();
        let picked = sample(rng, n, samples.min(n)).into_vec();
        spans.push(coords.len()..coords.len() + picked.len());
        coords.extend(picked.into_iter().map(|k| at + k));
        at += n;
    }
    let (a, num) = gradient_pairs(f, &x, eps, &coords)?;
    Ok(names
        .into_iter()
        .zip(spans)
        .map(|(name, r)| TensorCheck::new(name, &a[r.clone()], &num[r]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub ops: Vec<(String, f64)>,
    pub model: ModelGradReport,
    pub objective: Vec<TensorCheck>,
    /// Largest error over the op suite and the per-tensor model and
    /// objective checks.
    pub max_rel_error: f64,
}

/// Every gradient check behind the tiny-model gate: the op suite per
/// coordinate, then per tensor the Jacobian of every model output with
/// respect to the parameters (through a random probe) and the training loss
/// with respect to the outputs. Together the two cover the training-loss
/// gradient by the chain rule without differencing a loss of order 50.
pub fn grad_check_suite(
    seed: u64,
    eps: f64,
    per_tensor: usize,
    objective_samples: usize,
) -> Result<GradSuiteReport> {
    let ops = op_suite(seed, eps)?;
    let model = model_grad_check(CheckTarget::OutputProbe, seed, eps, per_tensor, 0.0)?;
    let objective = objective_grad_check(seed, eps, objective_samples)?;
    let max_rel_error = ops
        .iter()
        .map(|(_, e)| *e)
        .chain([model.max_rel_error, worst(&objective).0])
        .fold(0.0, f64::max);
    Ok(GradSuiteReport {
        ops,
        model,
        objective,
        max_rel_error,
    })
}
