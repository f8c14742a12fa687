//! The dual-branch generator: sequence and image encoders, style fusion,
//! autoregressive sequence decoder, image decoder and the parallel
//! refinement decoder.

mod layers;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{
    embed_commands, embed_sequence, EmbedError, EmbeddingVars, QuantizedCommand, BINS,
};
use crate::glyph::{CommandType, DrawCommand, Glyph, GlyphError, RepKind};
use crate::raster::RasterImage;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor, TensorError, Var};

use layers::{Conv, ConvUp, DecoderBlock, EncoderBlock, Head, Linear, Norm};
pub use params::ParamStore;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} {what}, got {found}")]
    Arity {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

/// Architecture hyperparameters. Stored next to the weights in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub refine_layers: usize,
    pub n_max: usize,
    pub n_refs: usize,
    pub n_classes: usize,
    pub resolution: usize,
    /// Channel widths of the four image-encoder stages; the decoder mirrors
    /// them.
    pub channels: [usize; 4],
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            ff_mult: 4,
            enc_layers: 6,
            dec_layers: 4,
            refine_layers: 2,
            n_max: 24,
            n_refs: 4,
            n_classes: 8,
            resolution: 64,
            channels: [8, 16, 32, 32],
            head_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for whole-model gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            ff_mult: 2,
            enc_layers: 6,
            dec_layers: 1,
            refine_layers: 2,
            n_max: 6,
            n_refs: 2,
            n_classes: 3,
            resolution: 16,
            channels: [2, 2, 2, 2],
            head_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return bad(format!(
                "resolution {} must be a power of two >= 16",
                self.resolution
            ));
        }
        if self.n_max == 0 || self.n_refs == 0 || self.n_classes == 0 {
            return bad("n_max, n_refs and n_classes must be positive".into());
        }
        if self.channels.contains(&0) || self.ff_mult == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// Fused style code with its Gaussian parameters and the decoder memory
/// built from it (`f` in row 0, aggregated sequence tokens after).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeature {
    pub f: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub memory: Tensor,
}

impl StyleFeature {
    /// `(1 - lambda) * a + lambda * b`, applied to `f` and to the whole
    /// decoder memory.
    pub fn blend(a: &StyleFeature, b: &StyleFeature, lambda: f64) -> Result<StyleFeature> {
        if a.memory.shape() != b.memory.shape() {
            return Err(TensorError::Shape {
                op: "blend",
                lhs: a.memory.shape().to_vec(),
                rhs: b.memory.shape().to_vec(),
            }
            .into());
        }
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            // Endpoints are copied so signed zeros survive.
            if lambda == 0.0 {
                x.to_vec()
            } else if lambda == 1.0 {
                y.to_vec()
            } else {
                x.iter()
                    .zip(y)
                    .map(|(p, q)| (1.0 - lambda) * p + lambda * q)
                    .collect()
            }
        };
        let memory = Tensor::new(a.memory.shape(), mix(a.memory.data(), b.memory.data()))?;
        Ok(StyleFeature {
            f: mix(&a.f, &b.f),
            mu: mix(&a.mu, &b.mu),
            logvar: mix(&a.logvar, &b.logvar),
            memory,
        })
    }
}

/// Style code on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StyleVars {
    pub f: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Logits of a batch of stacked sequences on a tape: `cmd` is
/// `[b * n, 4]`, `args` is `[b * n * 8, 256]`.
#[derive(Clone, Copy, Debug)]
pub struct SeqVars {
    pub cmd: Var,
    pub args: Var,
}

/// Decoded sequence with its logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqPrediction {
    /// `[n, 4]`
    pub cmd_logits: Tensor,
    /// `[n * 8, 256]`
    pub arg_logits: Tensor,
    /// Argmax commands, one per step.
    pub commands: Vec<QuantizedCommand>,
    /// Index of the first predicted EOS, or `n`.
    pub length: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy command for one step: argmax type, then argmax bin for each
/// argument the type uses.
fn greedy_command(cmd_logits: &[f64], arg_logits: &[f64]) -> QuantizedCommand {
    let cmd = CommandType::from_index(argmax(cmd_logits)).expect("4 command logits");
    let mut bins = [0; 8];
    for (a, b) in bins.iter_mut().enumerate() {
        *b = argmax(&arg_logits[a * BINS..(a + 1) * BINS]);
    }
    QuantizedCommand::new(cmd, bins, 0, 0).expect("argmax bins are in range")
}

impl SeqPrediction {
    pub fn from_logits(cmd_logits: Tensor, arg_logits: Tensor) -> Self {
        let n = cmd_logits.numel() / 4;
        let commands: Vec<QuantizedCommand> = (0..n)
            .map(|j| {
                greedy_command(
                    cmd_logits.row(j),
                    &arg_logits.data()[j * 8 * BINS..(j + 1) * 8 * BINS],
                )
            })
            .collect();
        let length = commands
            .iter()
            .position(|q| q.cmd() == CommandType::Eos)
            .unwrap_or(n);
        Self {
            cmd_logits,
            arg_logits,
            commands,
            length,
        }
    }

    pub fn steps(&self) -> usize {
        self.commands.len()
    }

    /// Relaxed glyph of the first `length` commands at bin centers. A
    /// leading drawing command is turned into a Move to its end point so
    /// the result is well formed.
    pub fn to_glyph(&self, char_class: usize) -> Glyph {
        let mut cmds: Vec<DrawCommand> = self.commands[..self.length]
            .iter()
            .map(|q| q.to_command())
            .collect();
        if let Some(first) = cmds.first_mut() {
            if first.cmd != CommandType::MoveFromTo {
                *first = DrawCommand::relaxed_move(first.end(), first.end());
            }
        }
        Glyph::new(cmds, char_class, RepKind::Relaxed)
    }
}

/// Handles of every model parameter on one tape.
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Everything the training objective needs from one forward pass.
pub struct TrainOutputs {
    /// One `[1, R, R]` logit image per target.
    pub img_logits: Vec<Var>,
    pub init: SeqVars,
    pub refined: SeqVars,
    pub style: StyleVars,
    /// Refiner input lengths (first argmax EOS of the initial prediction).
    pub init_lengths: Vec<usize>,
}

/// Block-diagonal mask for `n_seq` stacked sequences of `len` rows, with an
/// optional causal constraint inside each block.
pub fn stacked_self_mask(n_seq: usize, len: usize, causal: bool) -> Vec<bool> {
    let t = n_seq * len;
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = i / len != j / len || (causal && j % len > i % len);
        }
    }
    m
}

/// Block-diagonal mask that also hides keys at or beyond `valid[b]` inside
/// block `b`.
pub fn stacked_key_mask(valid: &[usize], len: usize) -> Vec<bool> {
    let t = valid.len() * len;
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = i / len != j / len || j % len >= valid[j / len];
        }
    }
    m
}

/// Lets each of `n_seq` query blocks see only its own memory block.
fn cross_block_mask(n_seq: usize, q_len: usize, m_len: usize) -> Vec<bool> {
    let (tq, tk) = (n_seq * q_len, n_seq * m_len);
    let mut m = vec![false; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            m[i * tk + j] = i / q_len != j / m_len;
        }
    }
    m
}

/// How stacked query sequences map onto the decoder memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryLayout {
    /// One memory shared by every sequence.
    Shared,
    /// Sequence `b` reads rows `b * (n_max + 1)..(b + 1) * (n_max + 1)`.
    PerSequence,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    emb: [usize; 6],
    bos: usize,
    cls_seq: usize,
    cls_img: usize,
    encoder: Vec<EncoderBlock>,
    enc_norm: Norm,
    aggregator: Linear,
    img_enc: Vec<Conv>,
    img_enc_out: Linear,
    img_dec_in: Linear,
    img_dec: Vec<ConvUp>,
    fusion: Linear,
    decoder: Vec<DecoderBlock>,
    dec_norm: Norm,
    head: Head,
    refiner: Vec<DecoderBlock>,
    refine_norm: Norm,
    refine_head: Head,
}

impl Model {
    /// Randomly initialized model; the seed fixes every weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.d_model;
        let ff = c.ff_mult * d;
        let mut s = ParamStore::new();
        let e = crate::embedding::EmbeddingParams::init(d, rng);
        let emb_ids: Vec<usize> = crate::embedding::EmbeddingParams::NAMES
            .iter()
            .zip(e.tensors())
            .map(|(n, t)| s.add(format!("emb.{n}"), t.clone()))
            .collect();
        let emb = [
            emb_ids[0], emb_ids[1], emb_ids[2], emb_ids[3], emb_ids[4], emb_ids[5],
        ];
        let sd = 1.0 / (d as f64).sqrt();
        let bos = s.add("bos", Tensor::randn(&[1, d], sd, rng));
        let cls_seq = s.add("cls_seq", Tensor::randn(&[c.n_classes, d], sd, rng));
        let cls_img = s.add("cls_img", Tensor::randn(&[c.n_classes, d], sd, rng));
        let encoder = (0..c.enc_layers)
            .map(|i| EncoderBlock::new(&mut s, &format!("enc.{i}"), d, c.n_heads, ff, rng))
            .collect();
        let enc_norm = Norm::new(&mut s, "enc.norm", d);
        let aggregator = Linear::new(&mut s, "agg", c.n_refs * d, d, 1.0, rng);
        let ch = c.channels;
        let side = c.resolution / 16;
        let ins = [c.n_refs, ch[0], ch[1], ch[2]];
        let img_enc = (0..4)
            .map(|i| Conv::new(&mut s, &format!("img_enc.{i}"), ins[i], ch[i], rng))
            .collect();
        let img_enc_out = Linear::new(&mut s, "img_enc.out", ch[3] * side * side, d, 1.0, rng);
        let img_dec_in = Linear::new(&mut s, "img_dec.in", d, ch[3] * side * side, 1.0, rng);
        let outs = [ch[2], ch[1], ch[0], 1];
        let dins = [ch[3], ch[2], ch[1], ch[0]];
        let img_dec = (0..4)
            .map(|i| ConvUp::new(&mut s, &format!("img_dec.{i}"), dins[i], outs[i], rng))
            .collect();
        let fusion = Linear::new(&mut s, "fusion", 2 * d, 2 * d, 1.0, rng);
        let decoder = (0..c.dec_layers)
            .map(|i| DecoderBlock::new(&mut s, &format!("dec.{i}"), d, c.n_heads, ff, rng))
            .collect();
        let dec_norm = Norm::new(&mut s, "dec.norm", d);
        let head = Head::new(&mut s, "head", d, c.head_hidden, BINS, rng);
        let refiner = (0..c.refine_layers)
            .map(|i| DecoderBlock::new(&mut s, &format!("ref.{i}"), d, c.n_heads, ff, rng))
            .collect();
        let refine_norm = Norm::new(&mut s, "ref.norm", d);
        let refine_head = Head::new(&mut s, "ref.head", d, c.head_hidden, BINS, rng);
        Ok(Self {
            config,
            store: s,
            emb,
            bos,
            cls_seq,
            cls_img,
            encoder,
            enc_norm,
            aggregator,
            img_enc,
            img_enc_out,
            img_dec_in,
            img_dec,
            fusion,
            decoder,
            dec_norm,
            head,
            refiner,
            refine_norm,
            refine_head,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.store.bind(g, trainable),
        }
    }

    fn emb_vars(&self, b: &Bound) -> EmbeddingVars {
        let v = |i: usize| b.vars[self.emb[i]];
        EmbeddingVars {
            w_cmd: v(0),
            w_args_b: v(1),
            w_args_a: v(2),
            w_w: v(3),
            w_h: v(4),
            token: v(5),
        }
    }

    fn check_image(&self, img: &RasterImage) -> Result<()> {
        if img.resolution() != self.config.resolution {
            return Err(NetError::Arity {
                what: "pixels per side",
                expected: self.config.resolution,
                found: img.resolution(),
            });
        }
        Ok(())
    }

    /// CNN encoding of the stacked reference images, `[1, d]`.
    pub fn encode_image(&self, g: &mut Graph, b: &Bound, images: &[RasterImage]) -> Result<Var> {
        let (nr, r) = (self.config.n_refs, self.config.resolution);
        if images.len() != nr {
            return Err(NetError::Arity {
                what: "reference images",
                expected: nr,
                found: images.len(),
            });
        }
        let mut data = Vec::with_capacity(nr * r * r);
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(img.pixels());
        }
        let mut x = g.constant(Tensor::new(&[nr, r, r], data)?);
        for conv in &self.img_enc {
            x = conv.forward(g, &b.vars, x)?;
            x = g.gelu(x);
        }
        let n = g.value(x).numel();
        let flat = g.reshape(x, &[1, n])?;
        Ok(self.img_enc_out.forward(g, &b.vars, flat)?)
    }

    /// Logits `[1, R, R]` of the target image for `class`.
    pub fn decode_image(&self, g: &mut Graph, b: &Bound, f: Var, class: usize) -> Result<Var> {
        let cls = g.embedding_lookup(b.vars[self.cls_img], &[class])?;
        let x = g.add(f, cls)?;
        let x = self.img_dec_in.forward(g, &b.vars, x)?;
        let x = g.gelu(x);
        let side = self.config.resolution / 16;
        let mut x = g.reshape(x, &[self.config.channels[3], side, side])?;
        for (i, up) in self.img_dec.iter().enumerate() {
            x = up.forward(g, &b.vars, x)?;
            if i + 1 < self.img_dec.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    /// Encodes the references. Returns the aggregated sequence feature
    /// `[n_max + 1, d]` and the image feature `[1, d]`.
    pub fn encode_refs(
        &self,
        g: &mut Graph,
        b: &Bound,
        refs: &[Glyph],
        images: &[RasterImage],
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        if refs.len() != c.n_refs {
            return Err(NetError::Arity {
                what: "reference glyphs",
                expected: c.n_refs,
                found: refs.len(),
            });
        }
        let e = self.emb_vars(b);
        let mut rows = Vec::with_capacity(refs.len());
        for r in refs {
            let padded = r.padded(c.n_max)?;
            rows.push(embed_sequence(g, &e, &padded, c.n_max)?);
        }
        let len = c.n_max + 1;
        let mut x = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat(&rows, 0)?
        };
        let mask = (refs.len() > 1).then(|| stacked_self_mask(refs.len(), len, false));
        for blk in &self.encoder {
            x = blk.forward(g, &b.vars, x, mask.as_deref())?;
        }
        x = self.enc_norm.forward(g, &b.vars, x)?;
        let per_ref: Vec<Var> = (0..refs.len())
            .map(|i| g.slice(x, 0, i * len, (i + 1) * len))
            .collect::<std::result::Result<_, _>>()?;
        let cat = if per_ref.len() == 1 {
            per_ref[0]
        } else {
            g.concat(&per_ref, 1)?
        };
        let f_seq = self.aggregator.forward(g, &b.vars, cat)?;
        let f_img = self.encode_image(g, b, images)?;
        Ok((f_seq, f_img))
    }

    /// Linear fusion of `[f_img ; f0_seq]` into `(mu, logvar)`, then
    /// `f = mu + exp(logvar / 2) * eps`; `eps = None` gives `f = mu`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        b: &Bound,
        f_img: Var,
        f0_seq: Var,
        eps: Option<&[f64]>,
    ) -> Result<StyleVars> {
        let d = self.config.d_model;
        let cat = g.concat(&[f_img, f0_seq], 1)?;
        let h = self.fusion.forward(g, &b.vars, cat)?;
        let mu = g.slice(h, 1, 0, d)?;
        let logvar = g.slice(h, 1, d, 2 * d)?;
        let f = match eps {
            None => mu,
            Some(eps) => {
                let eps = g.constant(Tensor::new(&[1, d], eps.to_vec())?);
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let noise = g.mul(std, eps)?;
                g.add(mu, noise)?
            }
        };
        Ok(StyleVars { f, mu, logvar })
    }

    /// Decoder memory: `f` followed by rows `1..` of the sequence feature.
    pub fn memory(&self, g: &mut Graph, f: Var, f_seq: Var) -> Result<Var> {
        let rest = g.slice(f_seq, 0, 1, self.config.n_max + 1)?;
        Ok(g.concat(&[f, rest], 0)?)
    }

    /// Sequence feature, optional additive noise on its style token, fusion.
    pub fn style_vars(
        &self,
        g: &mut Graph,
        b: &Bound,
        refs: &[Glyph],
        images: &[RasterImage],
        token_noise: Option<&[f64]>,
        eps: Option<&[f64]>,
    ) -> Result<(StyleVars, Var)> {
        let (f_seq, f_img) = self.encode_refs(g, b, refs, images)?;
        let mut f0 = g.slice(f_seq, 0, 0, 1)?;
        if let Some(noise) = token_noise {
            let n = g.constant(Tensor::new(&[1, self.config.d_model], noise.to_vec())?);
            f0 = g.add(f0, n)?;
        }
        let style = self.fuse(g, b, f_img, f0, eps)?;
        let memory = self.memory(g, style.f, f_seq)?;
        Ok((style, memory))
    }

    /// Inference-time style feature (no gradients).
    pub fn style(
        &self,
        refs: &[Glyph],
        images: &[RasterImage],
        token_noise: Option<&[f64]>,
        eps: Option<&[f64]>,
    ) -> Result<StyleFeature> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (s, memory) = self.style_vars(&mut g, &b, refs, images, token_noise, eps)?;
        Ok(StyleFeature {
            f: g.value(s.f).data().to_vec(),
            mu: g.value(s.mu).data().to_vec(),
            logvar: g.value(s.logvar).data().to_vec(),
            memory: g.value(memory).clone(),
        })
    }

    fn add_class(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        classes: &[usize],
        len: usize,
    ) -> Result<Var> {
        let rows: Vec<usize> = classes
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, len))
            .collect();
        let cls = g.embedding_lookup(b.vars[self.cls_seq], &rows)?;
        Ok(g.add(x, cls)?)
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.config.n_classes) {
            return Err(NetError::Arity {
                what: "classes at most",
                expected: self.config.n_classes,
                found: c + 1,
            });
        }
        Ok(())
    }

    fn cross_mask(&self, layout: MemoryLayout, n_seq: usize, q_len: usize) -> Option<Vec<bool>> {
        match layout {
            MemoryLayout::PerSequence if n_seq > 1 => {
                Some(cross_block_mask(n_seq, q_len, self.config.n_max + 1))
            }
            _ => None,
        }
    }

    /// Decoder input rows for `prefixes` (BOS, then each prefix command at
    /// positions `1..`), stacked, with class embeddings added.
    fn decoder_inputs(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefixes: &[&[QuantizedCommand]],
        classes: &[usize],
        len: usize,
    ) -> Result<Var> {
        let e = self.emb_vars(b);
        let d = self.config.d_model;
        let pe0 = g.constant(Tensor::new(
            &[1, d],
            crate::embedding::positional_encoding(0, d),
        )?);
        let bos = g.add(b.vars[self.bos], pe0)?;
        let mut parts = Vec::with_capacity(prefixes.len() * 2);
        for p in prefixes {
            parts.push(bos);
            if len > 1 {
                let positions: Vec<usize> = (1..len).collect();
                parts.push(embed_commands(g, &e, &p[..len - 1], &positions, false)?);
            }
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        self.add_class(g, b, x, classes, len)
    }

    fn run_decoder(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        memory: Var,
        layout: MemoryLayout,
        n_seq: usize,
        len: usize,
    ) -> Result<Var> {
        let self_mask = stacked_self_mask(n_seq, len, true);
        let cross = self.cross_mask(layout, n_seq, len);
        let mut x = x;
        for blk in &self.decoder {
            x = blk
                .forward(g, &b.vars, x, memory, Some(&self_mask), cross.as_deref())?
                .0;
        }
        Ok(self.dec_norm.forward(g, &b.vars, x)?)
    }

    /// Teacher-forced decoding of stacked targets (each exactly `n_max`
    /// commands).
    pub fn decode_tf(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        layout: MemoryLayout,
        targets: &[&[QuantizedCommand]],
        classes: &[usize],
    ) -> Result<SeqVars> {
        let n = self.config.n_max;
        if targets.len() != classes.len() {
            return Err(NetError::Arity {
                what: "classes",
                expected: targets.len(),
                found: classes.len(),
            });
        }
        self.check_classes(classes)?;
        if let Some(t) = targets.iter().find(|t| t.len() != n) {
            return Err(GlyphError::Length {
                len: t.len(),
                max: n,
            }
            .into());
        }
        let x = self.decoder_inputs(g, b, targets, classes, n)?;
        let h = self.run_decoder(g, b, x, memory, layout, targets.len(), n)?;
        let (cmd, args) = self.head.forward(g, &b.vars, h)?;
        Ok(SeqVars { cmd, args })
    }

    /// Parallel refinement of stacked initial predictions (each `n_max`
    /// commands). Queries attend only to the first `max(valid[i], 1)`
    /// positions of their own sequence. Also returns the self-attention
    /// weights of every refiner block and head.
    pub fn refine_vars(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        layout: MemoryLayout,
        initial: &[&[QuantizedCommand]],
        valid: &[usize],
        classes: &[usize],
    ) -> Result<(SeqVars, Vec<Var>)> {
        let n = self.config.n_max;
        if initial.len() != classes.len() || initial.len() != valid.len() {
            return Err(NetError::Arity {
                what: "sequences",
                expected: initial.len(),
                found: classes.len().min(valid.len()),
            });
        }
        self.check_classes(classes)?;
        if let Some(t) = initial.iter().find(|t| t.len() != n) {
            return Err(GlyphError::Length {
                len: t.len(),
                max: n,
            }
            .into());
        }
        let e = self.emb_vars(b);
        let positions: Vec<usize> = (1..=n).collect();
        let mut parts = Vec::with_capacity(initial.len());
        for p in initial {
            parts.push(embed_commands(g, &e, p, &positions, false)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        let mut x = self.add_class(g, b, x, classes, n)?;
        let valid: Vec<usize> = valid.iter().map(|&v| v.clamp(1, n)).collect();
        let mask = stacked_key_mask(&valid, n);
        let cross = self.cross_mask(layout, initial.len(), n);
        let mut weights = Vec::new();
        for blk in &self.refiner {
            let (y, trace) = blk.forward(g, &b.vars, x, memory, Some(&mask), cross.as_deref())?;
            x = y;
            weights.extend(trace.self_weights);
        }
        let h = self.refine_norm.forward(g, &b.vars, x)?;
        let (cmd, args) = self.refine_head.forward(g, &b.vars, h)?;
        Ok((SeqVars { cmd, args }, weights))
    }

    /// Greedy autoregressive decoding of one sequence per class. `memory`
    /// holds one `[n_max + 1, d]` block per sequence (`PerSequence`) or a
    /// single shared block. Stops when every sequence has emitted EOS or
    /// after `max_len` steps.
    pub fn decode_ar(
        &self,
        memory: &Tensor,
        classes: &[usize],
        max_len: usize,
    ) -> Result<Vec<SeqPrediction>> {
        self.check_classes(classes)?;
        let n_seq = classes.len();
        let mrows = self.config.n_max + 1;
        let layout = if memory.shape()[0] == mrows {
            MemoryLayout::Shared
        } else if memory.shape()[0] == n_seq * mrows {
            MemoryLayout::PerSequence
        } else {
            return Err(NetError::Arity {
                what: "memory rows",
                expected: n_seq * mrows,
                found: memory.shape()[0],
            });
        };
        let mut out = Vec::with_capacity(n_seq);
        for (lo, hi) in chunks(n_seq) {
            let mem = chunk_memory(memory, layout, mrows, lo, hi)?;
            out.extend(self.decode_ar_chunk(&mem, layout, &classes[lo..hi], max_len)?);
        }
        Ok(out)
    }

    fn decode_ar_chunk(
        &self,
        memory: &Tensor,
        layout: MemoryLayout,
        classes: &[usize],
        max_len: usize,
    ) -> Result<Vec<SeqPrediction>> {
        let n_seq = classes.len();
        let max_len = max_len.min(self.config.n_max);
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mem = g.constant(memory.clone());
        let mut seqs: Vec<Vec<QuantizedCommand>> = vec![Vec::new(); n_seq];
        let mut cmd_logits: Vec<Vec<f64>> = vec![Vec::new(); n_seq];
        let mut arg_logits: Vec<Vec<f64>> = vec![Vec::new(); n_seq];
        let mut done = vec![false; n_seq];
        let eos = QuantizedCommand::from_command(&DrawCommand::eos(), 0.0, 0.0);
        for t in 0..max_len {
            if done.iter().all(|&x| x) {
                break;
            }
            let len = t + 1;
            let mut padded = seqs.clone();
            padded.iter_mut().for_each(|s| s.push(eos));
            let refs: Vec<&[QuantizedCommand]> = padded.iter().map(|s| s.as_slice()).collect();
            let x = self.decoder_inputs(&mut g, &b, &refs, classes, len)?;
            let h = self.run_decoder(&mut g, &b, x, mem, layout, n_seq, len)?;
            let last: Vec<Var> = (0..n_seq)
                .map(|s| g.slice(h, 0, s * len + t, s * len + t + 1))
                .collect::<std::result::Result<_, _>>()?;
            let h = if last.len() == 1 {
                last[0]
            } else {
                g.concat(&last, 0)?
            };
            let (c, a) = self.head.forward(&mut g, &b.vars, h)?;
            let (cv, av) = (g.value(c).clone(), g.value(a).clone());
            for s in 0..n_seq {
                let arow = &av.data()[s * 8 * BINS..(s + 1) * 8 * BINS];
                cmd_logits[s].extend_from_slice(cv.row(s));
                arg_logits[s].extend_from_slice(arow);
                let q = if done[s] {
                    eos
                } else {
                    greedy_command(cv.row(s), arow)
                };
                if q.cmd() == CommandType::Eos {
                    done[s] = true;
                }
                seqs[s].push(q);
            }
        }
        let steps = seqs[0].len();
        Ok((0..n_seq)
            .map(|s| {
                let cl = Tensor::new(&[steps, 4], std::mem::take(&mut cmd_logits[s]))
                    .expect("steps x 4");
                let al = Tensor::new(&[steps * 8, BINS], std::mem::take(&mut arg_logits[s]))
                    .expect("steps x 8 x bins");
                let mut p = SeqPrediction::from_logits(cl, al);
                // Steps after EOS keep EOS regardless of their logits.
                p.commands = std::mem::take(&mut seqs[s]);
                p.length = p
                    .commands
                    .iter()
                    .position(|q| q.cmd() == CommandType::Eos)
                    .unwrap_or(steps);
                p
            })
            .collect())
    }

    /// Inference-time refinement. Each initial prediction is padded with EOS
    /// to `n_max` steps and masked to its own length.
    pub fn refine(
        &self,
        memory: &Tensor,
        initial: &[SeqPrediction],
        classes: &[usize],
    ) -> Result<Vec<SeqPrediction>> {
        let n = self.config.n_max;
        let mrows = n + 1;
        let layout = if memory.shape()[0] == mrows || initial.len() == 1 {
            MemoryLayout::Shared
        } else {
            MemoryLayout::PerSequence
        };
        let eos = QuantizedCommand::from_command(&DrawCommand::eos(), 0.0, 0.0);
        let inputs: Vec<Vec<QuantizedCommand>> = initial
            .iter()
            .map(|p| {
                let mut v: Vec<QuantizedCommand> = p.commands[..p.length].to_vec();
                v.resize(n, eos);
                v
            })
            .collect();
        let valid: Vec<usize> = initial.iter().map(|p| p.length).collect();
        self.refine_commands(memory, layout, &inputs, &valid, classes)
    }

    /// Refinement of raw command sequences with explicit valid lengths.
    pub fn refine_commands(
        &self,
        memory: &Tensor,
        layout: MemoryLayout,
        inputs: &[Vec<QuantizedCommand>],
        valid: &[usize],
        classes: &[usize],
    ) -> Result<Vec<SeqPrediction>> {
        let n = self.config.n_max;
        if valid.len() != inputs.len() || classes.len() != inputs.len() {
            return Err(NetError::Arity {
                what: "valid lengths and classes",
                expected: inputs.len(),
                found: valid.len().min(classes.len()),
            });
        }
        let mut preds = Vec::with_capacity(inputs.len());
        for (lo, hi) in chunks(inputs.len()) {
            let chunk = chunk_memory(memory, layout, n + 1, lo, hi)?;
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let mem = g.constant(chunk);
            let refs: Vec<&[QuantizedCommand]> =
                inputs[lo..hi].iter().map(|s| s.as_slice()).collect();
            let (out, _) = self.refine_vars(
                &mut g,
                &b,
                mem,
                layout,
                &refs,
                &valid[lo..hi],
                &classes[lo..hi],
            )?;
            preds.extend(split_predictions(&g, out, hi - lo, n));
        }
        Ok(preds)
    }

    /// Teacher-forced forward pass for one font: references, and targets
    /// given as padded relaxed glyphs with their images. `eps` is the
    /// reparameterization noise.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        b: &Bound,
        refs: &[Glyph],
        ref_images: &[RasterImage],
        targets: &[Glyph],
        eps: Option<&[f64]>,
    ) -> Result<TrainOutputs> {
        let n = self.config.n_max;
        let (style, memory) = self.style_vars(g, b, refs, ref_images, None, eps)?;
        let classes: Vec<usize> = targets.iter().map(|t| t.char_class).collect();
        let mut img_logits = Vec::with_capacity(targets.len());
        for &c in &classes {
            img_logits.push(self.decode_image(g, b, style.f, c)?);
        }
        let quant: Vec<Vec<QuantizedCommand>> = targets
            .iter()
            .map(|t| crate::embedding::quantize_glyph(&t.padded(n)?))
            .collect::<std::result::Result<_, EmbedError>>()?;
        let refs_q: Vec<&[QuantizedCommand]> = quant.iter().map(|q| q.as_slice()).collect();
        let init = self.decode_tf(g, b, memory, MemoryLayout::Shared, &refs_q, &classes)?;
        let preds = split_predictions(g, init, targets.len(), n);
        let init_lengths: Vec<usize> = preds.iter().map(|p| p.length).collect();
        let init_cmds: Vec<&[QuantizedCommand]> =
            preds.iter().map(|p| p.commands.as_slice()).collect();
        let (refined, _) = self.refine_vars(
            g,
            b,
            memory,
            MemoryLayout::Shared,
            &init_cmds,
            &init_lengths,
            &classes,
        )?;
        Ok(TrainOutputs {
            img_logits,
            init,
            refined,
            style,
            init_lengths,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "extra": extra });
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &self.store.to_checkpoint(meta))?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`]; returns the model and
    /// the extra metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt = read_checkpoint(file)?;
        let config: ModelConfig =
            serde_json::from_value(ckpt.meta.get("config").cloned().unwrap_or_default())
                .map_err(|e| NetError::Checkpoint(format!("model config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        model
            .store
            .load_checkpoint(&ckpt)
            .map_err(NetError::Checkpoint)?;
        let extra = ckpt
            .meta
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}

/// Sequences per inference batch. Stacked attention is quadratic in the
/// number of sequences, so large requests are decoded in groups.
const INFER_CHUNK: usize = 8;

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n)
        .step_by(INFER_CHUNK)
        .map(move |lo| (lo, (lo + INFER_CHUNK).min(n)))
}

/// Memory rows of sequences `lo..hi`.
fn chunk_memory(
    memory: &Tensor,
    layout: MemoryLayout,
    mrows: usize,
    lo: usize,
    hi: usize,
) -> Result<Tensor> {
    match layout {
        MemoryLayout::Shared => Ok(memory.clone()),
        MemoryLayout::PerSequence => {
            let d = memory.last_dim();
            let data =
                memory
                    .data()
                    .get(lo * mrows * d..hi * mrows * d)
                    .ok_or(NetError::Arity {
                        what: "memory rows",
                        expected: hi * mrows,
                        found: memory.shape()[0],
                    })?;
            Ok(Tensor::new(&[(hi - lo) * mrows, d], data.to_vec())?)
        }
    }
}

/// Splits stacked logits into per-sequence argmax predictions.
pub fn split_predictions(g: &Graph, s: SeqVars, n_seq: usize, n: usize) -> Vec<SeqPrediction> {
    let (c, a) = (g.value(s.cmd), g.value(s.args));
    (0..n_seq)
        .map(|i| {
            let cl =
                Tensor::new(&[n, 4], c.data()[i * n * 4..(i + 1) * n * 4].to_vec()).expect("n x 4");
            let al = Tensor::new(
                &[n * 8, BINS],
                a.data()[i * n * 8 * BINS..(i + 1) * n * 8 * BINS].to_vec(),
            )
            .expect("n x 8 x bins");
            SeqPrediction::from_logits(cl, al)
        })
        .collect()
}
