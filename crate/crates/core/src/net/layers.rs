//! Building blocks. Each layer records parameter ids into a [`ParamStore`]
//! and reads the matching tape variables at forward time.

use rand::Rng;

use super::params::ParamStore;
use crate::tensor::{Graph, Result, Tensor, Var, MASK_NEG};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b) }
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
        );
        Self { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        g.linear(x, v[self.w], self.b.map(|b| v[b]))
    }
}

/// Layer norm over the last axis with a learned gain and bias.
#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: usize,
    bias: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let n = g.mul(n, v[self.gain])?;
        g.add(n, v[self.bias])
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, 1.0, rng),
            // A key bias shifts every score of a query equally, so it is omitted.
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, 1.0, rng),
            heads,
        }
    }

    /// `mask[i * keys + j]` set means query `i` may not attend to key `j`.
    /// Returns the output and the per-head attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        v: &[Var],
        xq: Var,
        xkv: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, v, xq)?;
        let k = self.k.forward(g, v, xkv)?;
        let val = self.v.forward(g, v, xkv)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, val)
            } else {
                (
                    g.slice(q, 1, h * dh, (h + 1) * dh)?,
                    g.slice(k, 1, h * dh, (h + 1) * dh)?,
                    g.slice(val, 1, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.masked_fill(s, m, MASK_NEG)?;
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        Ok((self.o.forward(g, v, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, hidden, 1.0, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        let h = self.l1.forward(g, v, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, v, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub(crate) struct EncoderBlock {
    n1: Norm,
    attn: Attention,
    n2: Norm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            n1: Norm::new(store, &format!("{name}.n1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            n2: Norm::new(store, &format!("{name}.n2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.n1.forward(g, v, x)?;
        let (a, _) = self.attn.forward(g, v, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.n2.forward(g, v, x)?;
        let f = self.ff.forward(g, v, h)?;
        g.add(x, f)
    }
}

/// Pre-norm block with masked self-attention, cross-attention over a
/// memory, and a feed-forward layer.
#[derive(Clone, Debug)]
pub(crate) struct DecoderBlock {
    n1: Norm,
    self_attn: Attention,
    n2: Norm,
    cross: Attention,
    n3: Norm,
    ff: FeedForward,
}

pub(crate) struct BlockTrace {
    pub self_weights: Vec<Var>,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            n1: Norm::new(store, &format!("{name}.n1"), d),
            self_attn: Attention::new(store, &format!("{name}.self"), d, heads, rng),
            n2: Norm::new(store, &format!("{name}.n2"), d),
            cross: Attention::new(store, &format!("{name}.cross"), d, heads, rng),
            n3: Norm::new(store, &format!("{name}.n3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        v: &[Var],
        x: Var,
        memory: Var,
        self_mask: Option<&[bool]>,
        cross_mask: Option<&[bool]>,
    ) -> Result<(Var, BlockTrace)> {
        let h = self.n1.forward(g, v, x)?;
        let (a, self_weights) = self.self_attn.forward(g, v, h, h, self_mask)?;
        let x = g.add(x, a)?;
        let h = self.n2.forward(g, v, x)?;
        let (c, _) = self.cross.forward(g, v, h, memory, cross_mask)?;
        let x = g.add(x, c)?;
        let h = self.n3.forward(g, v, x)?;
        let f = self.ff.forward(g, v, h)?;
        Ok((g.add(x, f)?, BlockTrace { self_weights }))
    }
}

/// Per-step MLP producing 4 command logits and 8 x 256 argument logits.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    norm: Norm,
    hidden: Linear,
    cmd: Linear,
    args: Linear,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        bins: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), d),
            hidden: Linear::new(store, &format!("{name}.hidden"), d, hidden, 1.0, rng),
            // Small output weights keep initial predictions near uniform.
            cmd: Linear::new(store, &format!("{name}.cmd"), hidden, 4, 0.01, rng),
            args: Linear::new(store, &format!("{name}.args"), hidden, 8 * bins, 0.01, rng),
        }
    }

    /// Returns `([n, 4], [n * 8, bins])`.
    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<(Var, Var)> {
        let n = g.shape(x)[0];
        let h = self.norm.forward(g, v, x)?;
        let h = self.hidden.forward(g, v, h)?;
        let h = g.gelu(h);
        let cmd = self.cmd.forward(g, v, h)?;
        let args = self.args.forward(g, v, h)?;
        let bins = g.shape(args)[1] / 8;
        let args = g.reshape(args, &[n * 8, bins])?;
        Ok((cmd, args))
    }
}

/// Stride-2 convolution (kernel 4, padding 1) that halves the image side.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::randn(&[cout, cin, 4, 4], 1.0 / ((cin * 16) as f64).sqrt(), rng),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, v[self.w], Some(v[self.b]), 2, 1)
    }
}

/// Stride-2 transposed convolution (kernel 4, padding 1) that doubles the
/// image side.
#[derive(Clone, Debug)]
pub(crate) struct ConvUp {
    w: usize,
    b: usize,
}

impl ConvUp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::randn(&[cin, cout, 4, 4], 1.0 / ((cin * 4) as f64).sqrt(), rng),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        g.transposed_conv2d(x, v[self.w], Some(v[self.b]), 2, 1)
    }
}
