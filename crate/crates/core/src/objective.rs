//! Loss terms and their weighted total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bezier::{bernstein, AuxParams};
use crate::embedding::{dequantize, QuantizedCommand, BINS};
use crate::glyph::CommandType;
use crate::net::{SeqPrediction, SeqVars, StyleVars, TrainOutputs};
use crate::raster::RasterImage;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// Weights of the six terms, plus the command-type weight inside both
/// cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub img: f64,
    pub ce_init: f64,
    pub ce_refine: f64,
    pub cons: f64,
    pub bezier: f64,
    pub kl: f64,
    pub cmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            img: 1.0,
            ce_init: 1.0,
            ce_refine: 1.0,
            cons: 10.0,
            bezier: 1.0,
            kl: 0.01,
            cmd: 1.0,
        }
    }
}

/// Unweighted terms in the order img, ce_init, ce_refine, cons, bezier, kl.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_img: f64,
    pub l_ce_init: f64,
    pub l_ce_refine: f64,
    pub l_cons: f64,
    pub l_bezier: f64,
    pub l_kl: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 6] = [
        "l_img",
        "l_ce_init",
        "l_ce_refine",
        "l_cons",
        "l_bezier",
        "l_kl",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.l_img,
            self.l_ce_init,
            self.l_ce_refine,
            self.l_cons,
            self.l_bezier,
            self.l_kl,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
}

impl LossWeights {
    pub fn values(&self) -> [f64; 6] {
        [
            self.img,
            self.ce_init,
            self.ce_refine,
            self.cons,
            self.bezier,
            self.kl,
        ]
    }
}

/// Weighted sum, accumulated left to right.
pub fn total(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let mut sum = 0.0;
    for ((name, v), w) in LossTerms::NAMES
        .iter()
        .zip(terms.values())
        .zip(weights.values())
    {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite {
                term: name,
                value: v,
            });
        }
        sum += w * v;
    }
    Ok(LossReport {
        terms: *terms,
        total: sum,
    })
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` in closed form.
pub fn loss_kl(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(ObjectiveError::Mismatch(format!(
            "mu {} vs logvar {}",
            mu.len(),
            logvar.len()
        )));
    }
    Ok(-0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, l)| 1.0 + l - m * m - l.exp())
            .sum::<f64>())
}

pub fn loss_kl_var(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let e = g.exp(logvar);
    let m2 = g.square(mu)?;
    let s = g.add(e, m2)?;
    let s = g.sub(s, logvar)?;
    let s = g.sum(s);
    let n = g.value(mu).numel() as f64;
    let c = g.constant(Tensor::scalar(-n));
    let s = g.add(s, c)?;
    Ok(g.scale(s, 0.5))
}

/// Frozen random convolution stack used as the feature extractor of the
/// perceptual term.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let widths = [1, 4, 8, 8];
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                (
                    Tensor::randn(&[cout, cin, 4, 4], 1.0 / ((cin * 16) as f64).sqrt(), rng),
                    Tensor::randn(&[cout], 0.1, rng),
                )
            })
            .collect();
        Self { layers }
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = x;
        for (w, b) in &self.layers {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.gelu(x);
            out.push(x);
        }
        Ok(out)
    }

    /// Sum over blocks of the mean squared feature difference.
    pub fn distance(&self, g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
        let fp = self.features(g, pred)?;
        let ft = self.features(g, target)?;
        let mut acc: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(ft) {
            let d = g.sub(a, b)?;
            let d = g.square(d)?;
            let m = g.mean(d);
            acc = Some(match acc {
                Some(s) => g.add(s, m)?,
                None => m,
            });
        }
        Ok(acc.expect("at least one block"))
    }
}

fn abs(g: &mut Graph, x: Var) -> Var {
    let pos = g.relu(x);
    let neg = g.scale(x, -1.0);
    let neg = g.relu(neg);
    g.add(pos, neg).expect("same shape")
}

/// Mean absolute difference of `sigmoid(logits)` against the target plus,
/// when `perceptual` is given, the feature distance.
pub fn loss_img_var(
    g: &mut Graph,
    logits: Var,
    target: &RasterImage,
    perceptual: Option<&PerceptualNet>,
) -> Result<Var> {
    let r = target.resolution();
    if g.value(logits).numel() != r * r {
        return Err(ObjectiveError::Mismatch(format!(
            "logits {:?} vs {r}x{r} target",
            g.shape(logits)
        )));
    }
    let logits = g.reshape(logits, &[1, r, r])?;
    let pred = g.sigmoid(logits);
    let t = g.constant(Tensor::new(&[1, r, r], target.pixels().to_vec())?);
    let d = g.sub(pred, t)?;
    let a = abs(g, d);
    let l1 = g.mean(a);
    match perceptual {
        Some(p) => {
            let pd = p.distance(g, pred, t)?;
            Ok(g.add(l1, pd)?)
        }
        None => Ok(l1),
    }
}

/// Number of supervised steps: the commands plus the first EOS.
fn valid_steps(target: &[QuantizedCommand]) -> usize {
    let n = target
        .iter()
        .position(|q| q.cmd() == CommandType::Eos)
        .unwrap_or(target.len());
    (n + 1).min(target.len())
}

/// Cross-entropy over stacked sequences. For each sequence,
/// `sum_j [w_cmd * CE(type) + sum_{used args} CE(bin)]` over the supervised
/// steps, divided by their count; then averaged over sequences.
pub fn loss_ce_var(
    g: &mut Graph,
    pred: SeqVars,
    targets: &[Vec<QuantizedCommand>],
    w_cmd: f64,
) -> Result<Var> {
    let (cmd_w, arg_w, cmd_t, arg_t) = ce_weights(targets, w_cmd, 1.0, 1.0);
    let rows = g.value(pred.cmd).numel() / 4;
    if rows != cmd_t.len() {
        return Err(ObjectiveError::Mismatch(format!(
            "{rows} predicted steps vs {} target steps",
            cmd_t.len()
        )));
    }
    let c = g.cross_entropy_with_logits(pred.cmd, &cmd_t, &cmd_w)?;
    let a = g.cross_entropy_with_logits(pred.args, &arg_t, &arg_w)?;
    Ok(g.add(c, a)?)
}

fn ce_weights(
    targets: &[Vec<QuantizedCommand>],
    w_cmd: f64,
    cmd_scale: f64,
    arg_scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<usize>, Vec<usize>) {
    let b = targets.len() as f64;
    let mut cmd_w = Vec::new();
    let mut arg_w = Vec::new();
    let mut cmd_t = Vec::new();
    let mut arg_t = Vec::new();
    for t in targets {
        let nv = valid_steps(t);
        let unit = 1.0 / (nv as f64 * b);
        for (j, q) in t.iter().enumerate() {
            let on = j < nv;
            cmd_t.push(q.cmd_id);
            cmd_w.push(if on { w_cmd * unit * cmd_scale } else { 0.0 });
            for a in 0..8 {
                arg_t.push(q.arg_bins[a]);
                arg_w.push(if on && q.mask[a] {
                    unit * arg_scale
                } else {
                    0.0
                });
            }
        }
    }
    (cmd_w, arg_w, cmd_t, arg_t)
}

/// Value of the cross-entropy term for one decoded sequence.
pub fn loss_ce(pred: &SeqPrediction, target: &[QuantizedCommand], w_cmd: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = SeqVars {
        cmd: g.constant(pred.cmd_logits.clone()),
        args: g.constant(pred.arg_logits.clone()),
    };
    let v = loss_ce_var(&mut g, s, &[target.to_vec()], w_cmd)?;
    Ok(g.value(v).item())
}

/// Mean cross-entropy per supervised command step and per used argument,
/// reported separately.
pub fn ce_breakdown(pred: &SeqPrediction, target: &[QuantizedCommand]) -> Result<(f64, f64)> {
    let nv = valid_steps(target);
    let used: usize = target[..nv]
        .iter()
        .map(|q| q.mask.iter().filter(|&&m| m).count())
        .sum();
    let mut g = Graph::new();
    let s = SeqVars {
        cmd: g.constant(pred.cmd_logits.clone()),
        args: g.constant(pred.arg_logits.clone()),
    };
    // Undo the per-step averaging so each part becomes a plain mean.
    let (cmd_w, arg_w, cmd_t, arg_t) =
        ce_weights(&[target.to_vec()], 1.0, 1.0, nv as f64 / used.max(1) as f64);
    let c = g.cross_entropy_with_logits(s.cmd, &cmd_t, &cmd_w)?;
    let a = g.cross_entropy_with_logits(s.args, &arg_t, &arg_w)?;
    Ok((g.value(c).item(), g.value(a).item()))
}

/// Expected coordinates `sum_b softmax(logits)_b * b / 255`, `[rows / 8, 8]`.
pub fn soft_coords(g: &mut Graph, args: Var) -> Result<Var> {
    let rows = g.value(args).numel() / BINS;
    let p = g.softmax(args);
    let centers = g.constant(Tensor::new(
        &[BINS, 1],
        (0..BINS).map(dequantize).collect(),
    )?);
    let c = g.matmul(p, centers)?;
    Ok(g.reshape(c, &[rows / 8, 8])?)
}

/// Rows `j` (of stacked length-`n` sequences) whose command is a Line or
/// Curve following a command of the same sequence.
fn junction_rows(types: &[CommandType], n: usize) -> Vec<bool> {
    (0..types.len())
        .map(|j| j % n != 0 && types[j].is_drawing() && types[j - 1] != CommandType::Eos)
        .collect()
}

fn junction_gap_sum(
    g: &mut Graph,
    soft: Var,
    types: &[CommandType],
    n: usize,
) -> Result<Option<Var>> {
    let m = types.len();
    let rows = junction_rows(types, n);
    if m < 2 || !rows.iter().any(|&r| r) {
        return Ok(None);
    }
    let prev = g.slice(soft, 0, 0, m - 1)?;
    let prev_end = g.slice(prev, 1, 6, 8)?;
    let next = g.slice(soft, 0, 1, m)?;
    let next_start = g.slice(next, 1, 0, 2)?;
    let d = g.sub(next_start, prev_end)?;
    let d2 = g.square(d)?;
    let mask: Vec<f64> = rows[1..]
        .iter()
        .flat_map(|&r| [r as u8 as f64; 2])
        .collect();
    let mask = g.constant(Tensor::new(&[m - 1, 2], mask)?);
    let d2 = g.mul(d2, mask)?;
    Ok(Some(g.sum(d2)))
}

/// Squared start/end gaps at every junction, summed over both soft
/// sequences and averaged over the stacked sequences. `types` decides where
/// junctions are.
pub fn loss_cons_var(
    g: &mut Graph,
    init_soft: Var,
    refined_soft: Var,
    types: &[CommandType],
    n: usize,
) -> Result<Var> {
    let n_seq = (types.len() / n).max(1) as f64;
    let mut acc = g.constant(Tensor::scalar(0.0));
    for s in [init_soft, refined_soft] {
        if let Some(v) = junction_gap_sum(g, s, types, n)? {
            acc = g.add(acc, v)?;
        }
    }
    Ok(g.scale(acc, 1.0 / n_seq))
}

/// Value of the consistency term for two coordinate sequences.
pub fn loss_cons(init: &[[f64; 8]], refined: &[[f64; 8]], types: &[CommandType]) -> Result<f64> {
    if init.len() != types.len() || refined.len() != types.len() {
        return Err(ObjectiveError::Mismatch("sequence lengths differ".into()));
    }
    let n = types.len().max(1);
    let mut g = Graph::new();
    let to = |g: &mut Graph, s: &[[f64; 8]]| -> Result<Var> {
        Ok(g.constant(Tensor::new(&[s.len().max(1), 8], {
            let mut v: Vec<f64> = s.iter().flatten().copied().collect();
            v.resize(s.len().max(1) * 8, 0.0);
            v
        })?))
    };
    let a = to(&mut g, init)?;
    let b = to(&mut g, refined)?;
    let v = loss_cons_var(&mut g, a, b, types, n)?;
    Ok(g.value(v).item())
}

/// Linear maps from the 8 relaxed coordinates to the interleaved `(x, y)`
/// positions at each auxiliary parameter: `(curve, line)`, each `[8, 2R]`.
fn aux_operators(aux: &AuxParams) -> (Tensor, Tensor) {
    let r = aux.len();
    let mut curve = vec![0.0; 8 * 2 * r];
    let mut line = vec![0.0; 8 * 2 * r];
    for (k, &t) in aux.values().iter().enumerate() {
        let b = bernstein(t);
        // A line lifted with control points at its thirds.
        let lb = [
            b[0] + b[1] * 2.0 / 3.0 + b[2] / 3.0,
            0.0,
            0.0,
            b[1] / 3.0 + b[2] * 2.0 / 3.0 + b[3],
        ];
        for i in 0..4 {
            for axis in 0..2 {
                let (row, col) = (2 * i + axis, 2 * k + axis);
                curve[row * 2 * r + col] = b[i];
                line[row * 2 * r + col] = lb[i];
            }
        }
    }
    (
        Tensor::new(&[8, 2 * r], curve).expect("8 x 2R"),
        Tensor::new(&[8, 2 * r], line).expect("8 x 2R"),
    )
}

/// Squared distance between predicted and target curves at the auxiliary
/// parameters, summed over Line/Curve steps of both soft sequences and
/// averaged over the stacked sequences. Predictions are lifted with the
/// target's command type.
pub fn loss_bezier_var(
    g: &mut Graph,
    init_soft: Var,
    refined_soft: Var,
    targets: &[Vec<QuantizedCommand>],
    aux: &AuxParams,
) -> Result<Var> {
    let n_seq = targets.len().max(1) as f64;
    if aux.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (ac, al) = aux_operators(aux);
    let w = 2 * aux.len();
    let flat: Vec<&QuantizedCommand> = targets.iter().flatten().collect();
    let m = flat.len();
    let mut mask_c = vec![0.0; m * w];
    let mut mask_l = vec![0.0; m * w];
    let mut coords = vec![0.0; m * 8];
    for (j, q) in flat.iter().enumerate() {
        match q.cmd() {
            CommandType::CurveFromTo => mask_c[j * w..(j + 1) * w].fill(1.0),
            CommandType::LineFromTo => mask_l[j * w..(j + 1) * w].fill(1.0),
            _ => continue,
        }
        for (c, &b) in coords[j * 8..(j + 1) * 8].iter_mut().zip(&q.arg_bins) {
            *c = dequantize(b);
        }
    }
    let (ac, al) = (g.constant(ac), g.constant(al));
    let mask_c = g.constant(Tensor::new(&[m, w], mask_c)?);
    let mask_l = g.constant(Tensor::new(&[m, w], mask_l)?);
    // Targets go through the same ops as predictions, so equal inputs give
    // exactly zero.
    let positions = |g: &mut Graph, s: Var| -> Result<Var> {
        let pc = g.matmul(s, ac)?;
        let pc = g.mul(pc, mask_c)?;
        let pl = g.matmul(s, al)?;
        let pl = g.mul(pl, mask_l)?;
        Ok(g.add(pc, pl)?)
    };
    let gt = g.constant(Tensor::new(&[m, 8], coords)?);
    let gt = positions(g, gt)?;
    let mut acc = g.constant(Tensor::scalar(0.0));
    for s in [init_soft, refined_soft] {
        let p = positions(g, s)?;
        let d = g.sub(p, gt)?;
        let d2 = g.square(d)?;
        let s = g.sum(d2);
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 1.0 / n_seq))
}

/// Term handles of one forward pass and the weighted total.
pub struct LossVars {
    pub terms: [Var; 6],
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph, weights: &LossWeights) -> Result<LossReport> {
        let v: Vec<f64> = self.terms.iter().map(|&t| g.value(t).item()).collect();
        total(
            &LossTerms {
                l_img: v[0],
                l_ce_init: v[1],
                l_ce_refine: v[2],
                l_cons: v[3],
                l_bezier: v[4],
                l_kl: v[5],
            },
            weights,
        )
    }
}

/// Every term of the training objective for one teacher-forced pass.
pub fn training_loss(
    g: &mut Graph,
    out: &TrainOutputs,
    targets: &[Vec<QuantizedCommand>],
    target_images: &[RasterImage],
    weights: &LossWeights,
    aux: &AuxParams,
    perceptual: Option<&PerceptualNet>,
) -> Result<LossVars> {
    if targets.len() != out.img_logits.len() || target_images.len() != targets.len() {
        return Err(ObjectiveError::Mismatch(
            "targets, images and outputs differ in count".into(),
        ));
    }
    let n = targets.first().map_or(1, Vec::len);
    let mut l_img = g.constant(Tensor::scalar(0.0));
    for (&logits, img) in out.img_logits.iter().zip(target_images) {
        let l = loss_img_var(g, logits, img, perceptual)?;
        l_img = g.add(l_img, l)?;
    }
    let l_img = g.scale(l_img, 1.0 / targets.len() as f64);
    let l_ce_init = loss_ce_var(g, out.init, targets, weights.cmd)?;
    let l_ce_refine = loss_ce_var(g, out.refined, targets, weights.cmd)?;
    let si = soft_coords(g, out.init.args)?;
    let sr = soft_coords(g, out.refined.args)?;
    let types: Vec<CommandType> = targets.iter().flatten().map(|q| q.cmd()).collect();
    let l_cons = loss_cons_var(g, si, sr, &types, n)?;
    let l_bezier = loss_bezier_var(g, si, sr, targets, aux)?;
    let StyleVars { mu, logvar, .. } = out.style;
    let l_kl = loss_kl_var(g, mu, logvar)?;
    let terms = [l_img, l_ce_init, l_ce_refine, l_cons, l_bezier, l_kl];
    let mut acc = g.constant(Tensor::scalar(0.0));
    for (&t, w) in terms.iter().zip(weights.values()) {
        let s = g.scale(t, w);
        acc = g.add(acc, s)?;
    }
    Ok(LossVars { terms, total: acc })
}

#[cfg(test)]
mod tests;
