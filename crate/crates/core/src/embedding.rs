//! Coordinate quantization and the additive command embedding.
//!
//! Lookup tables are stored one row per symbol (`[vocab, d]`), so an
//! embedding is a row lookup rather than a matrix-times-one-hot product.

use rand::Rng;
use thiserror::Error;

use crate::glyph::{CommandType, DrawCommand, Glyph, GlyphError, RepKind};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Number of quantization levels per coordinate.
pub const BINS: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("bin {0} outside [0, {BINS})")]
    Bin(usize),
    #[error("command id {0} outside [0, 4)")]
    Command(usize),
    #[error("argument bins do not match the mask of {0:?}")]
    Mask(CommandType),
    #[error("position {pos} outside [0, {max}]")]
    Position { pos: usize, max: usize },
    #[error(transparent)]
    Glyph(#[from] GlyphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// `round(x * 255)` with halves rounded away from zero, after clamping to
/// `[0, 1]`. NaN maps to bin 0.
pub fn quantize(x: f64) -> usize {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * (BINS - 1) as f64).round() as usize
}

pub fn dequantize(bin: usize) -> f64 {
    bin as f64 / (BINS - 1) as f64
}

/// A relaxed command with every coordinate replaced by its bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedCommand {
    pub cmd_id: usize,
    pub arg_bins: [usize; 8],
    pub mask: [bool; 8],
    pub w_bin: usize,
    pub h_bin: usize,
}

impl QuantizedCommand {
    /// Builds a command from raw ids, zeroing bins the command does not use.
    pub fn new(cmd: CommandType, arg_bins: [usize; 8], w_bin: usize, h_bin: usize) -> Result<Self> {
        let mask = cmd.mask(RepKind::Relaxed);
        let mut bins = [0; 8];
        for i in 0..8 {
            if arg_bins[i] >= BINS {
                return Err(EmbedError::Bin(arg_bins[i]));
            }
            if mask[i] {
                bins[i] = arg_bins[i];
            }
        }
        for b in [w_bin, h_bin] {
            if b >= BINS {
                return Err(EmbedError::Bin(b));
            }
        }
        Ok(Self {
            cmd_id: cmd.index(),
            arg_bins: bins,
            mask,
            w_bin,
            h_bin,
        })
    }

    pub fn from_command(c: &DrawCommand, width: f64, height: f64) -> Self {
        let coords = c.coords();
        let mut bins = [0; 8];
        for i in 0..8 {
            if c.mask[i] {
                bins[i] = quantize(coords[i]);
            }
        }
        Self {
            cmd_id: c.cmd.index(),
            arg_bins: bins,
            mask: c.mask,
            w_bin: quantize(width),
            h_bin: quantize(height),
        }
    }

    pub fn cmd(&self) -> CommandType {
        CommandType::from_index(self.cmd_id).unwrap_or(CommandType::Eos)
    }

    pub fn validate(&self) -> Result<()> {
        let cmd = CommandType::from_index(self.cmd_id).ok_or(EmbedError::Command(self.cmd_id))?;
        if self.mask != cmd.mask(RepKind::Relaxed) {
            return Err(EmbedError::Mask(cmd));
        }
        for (&b, &m) in self.arg_bins.iter().zip(&self.mask) {
            if b >= BINS {
                return Err(EmbedError::Bin(b));
            }
            if !m && b != 0 {
                return Err(EmbedError::Mask(cmd));
            }
        }
        for b in [self.w_bin, self.h_bin] {
            if b >= BINS {
                return Err(EmbedError::Bin(b));
            }
        }
        Ok(())
    }

    /// Relaxed command at the bin centers.
    pub fn to_command(&self) -> DrawCommand {
        let mut coords = [0.0; 8];
        for i in 0..8 {
            coords[i] = dequantize(self.arg_bins[i]);
        }
        DrawCommand::from_coords(self.cmd(), &coords, RepKind::Relaxed)
    }
}

/// Quantizes every command of a relaxed glyph, padding included.
pub fn quantize_glyph(g: &Glyph) -> Result<Vec<QuantizedCommand>> {
    if g.rep_kind != RepKind::Relaxed {
        return Err(GlyphError::Representation {
            expected: RepKind::Relaxed,
            found: g.rep_kind,
        }
        .into());
    }
    Ok(g.commands
        .iter()
        .map(|c| QuantizedCommand::from_command(c, g.width, g.height))
        .collect())
}

/// Sinusoidal absolute position code of length `d`.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(k / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Learnable embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    /// `[4, d]`
    pub w_cmd: Tensor,
    /// `[256, d]`, one row per coordinate bin.
    pub w_args_b: Tensor,
    /// `[8 d, d]`, mixes the eight per-argument rows.
    pub w_args_a: Tensor,
    /// `[256, d]`
    pub w_w: Tensor,
    /// `[256, d]`
    pub w_h: Tensor,
    /// `[1, d]` modality token.
    pub token: Tensor,
}

impl EmbeddingParams {
    pub const NAMES: [&'static str; 6] = ["w_cmd", "w_args_b", "w_args_a", "w_w", "w_h", "token"];

    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            w_cmd: Tensor::randn(&[4, d], s, rng),
            w_args_b: Tensor::randn(&[BINS, d], s, rng),
            w_args_a: Tensor::randn(&[8 * d, d], 1.0 / (8.0 * d as f64).sqrt(), rng),
            w_w: Tensor::randn(&[BINS, d], s, rng),
            w_h: Tensor::randn(&[BINS, d], s, rng),
            token: Tensor::randn(&[1, d], s, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_cmd.last_dim()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.w_cmd,
            &self.w_args_b,
            &self.w_args_a,
            &self.w_w,
            &self.w_h,
            &self.token,
        ]
    }

    /// Puts the tables on a tape, as gradient-receiving leaves when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EmbeddingVars {
        let mut put = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        EmbeddingVars {
            w_cmd: put(&self.w_cmd),
            w_args_b: put(&self.w_args_b),
            w_args_a: put(&self.w_args_a),
            w_w: put(&self.w_w),
            w_h: put(&self.w_h),
            token: put(&self.token),
        }
    }
}

/// Embedding tables living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub w_cmd: Var,
    pub w_args_b: Var,
    pub w_args_a: Var,
    pub w_w: Var,
    pub w_h: Var,
    pub token: Var,
}

/// Rows `e_cmd + e_args (+ e_wh) + e_pos` for each command, `[n, d]`.
///
/// Unused arguments contribute zero rows before the mixing matrix.
pub fn embed_commands(
    g: &mut Graph,
    e: &EmbeddingVars,
    cmds: &[QuantizedCommand],
    positions: &[usize],
    with_wh: bool,
) -> Result<Var> {
    let d = g.shape(e.w_cmd)[1];
    let n = cmds.len();
    if positions.len() != n {
        return Err(TensorError::Shape {
            op: "embed_commands",
            lhs: vec![n],
            rhs: vec![positions.len()],
        }
        .into());
    }
    for q in cmds {
        q.validate()?;
    }
    let ids: Vec<usize> = cmds.iter().map(|q| q.cmd_id).collect();
    let e_cmd = g.embedding_lookup(e.w_cmd, &ids)?;

    let bins: Vec<usize> = cmds.iter().flat_map(|q| q.arg_bins).collect();
    let rows = g.embedding_lookup(e.w_args_b, &bins)?;
    let unused: Vec<bool> = cmds
        .iter()
        .flat_map(|q| q.mask)
        .flat_map(|m| std::iter::repeat_n(!m, d))
        .collect();
    let rows = g.masked_fill(rows, &unused, 0.0)?;
    let flat = g.reshape(rows, &[n, 8 * d])?;
    let e_args = g.matmul(flat, e.w_args_a)?;

    let mut out = g.add(e_cmd, e_args)?;
    if with_wh {
        let wb: Vec<usize> = cmds.iter().map(|q| q.w_bin).collect();
        let hb: Vec<usize> = cmds.iter().map(|q| q.h_bin).collect();
        let ew = g.embedding_lookup(e.w_w, &wb)?;
        let eh = g.embedding_lookup(e.w_h, &hb)?;
        out = g.add(out, ew)?;
        out = g.add(out, eh)?;
    }
    let pe: Vec<f64> = positions
        .iter()
        .flat_map(|&p| positional_encoding(p, d))
        .collect();
    let pe = g.constant(Tensor::new(&[n, d], pe)?);
    Ok(g.add(out, pe)?)
}

/// Embedding of one command at `position`, evaluated without gradients.
pub fn embed_command(
    q: &QuantizedCommand,
    position: usize,
    params: &EmbeddingParams,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let e = params.bind(&mut g, false);
    let v = embed_commands(&mut g, &e, std::slice::from_ref(q), &[position], true)?;
    Ok(g.value(v).data().to_vec())
}

/// `[n_max + 1, d]`: the modality token followed by the embeddings of all
/// `n_max` padded commands at positions `1..=n_max`.
pub fn embed_sequence(
    g: &mut Graph,
    e: &EmbeddingVars,
    glyph: &Glyph,
    n_max: usize,
) -> Result<Var> {
    if glyph.commands.len() != n_max {
        return Err(GlyphError::Length {
            len: glyph.commands.len(),
            max: n_max,
        }
        .into());
    }
    let q = quantize_glyph(glyph)?;
    let positions: Vec<usize> = (1..=n_max).collect();
    let body = embed_commands(g, e, &q, &positions, true)?;
    Ok(g.concat(&[e.token, body], 0)?)
}
