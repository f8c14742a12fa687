use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Stand-in for −∞ in attention masks. Finite so that a fully masked row
/// softmaxes to a uniform distribution instead of NaN, and large enough that
/// `exp(MASK_NEG - max)` underflows to exactly zero next to any real logit.
pub const MASK_NEG: f64 = -1e30;

const LN_EPS: f64 = 1e-10;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Dynamic tape. Every op appends a node; [`Graph::backward`] walks the tape
/// in reverse creation order, which is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `b` broadcasts against `a` when shapes match, `b` is a single element, or
/// `b`'s shape is a trailing suffix of `a`'s.
fn broadcasts(a: &Tensor, b: &Tensor) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sa == sb || b.numel() == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums `g` (shaped like the broadcast output) down to `n` trailing elements.
fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Adds a leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward ops ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, ta.data(), false, tb.data(), false, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcasts(ta, tb) {
            return Err(shape_err(op, ta, tb));
        }
        let nb = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data,
        })
    }

    /// Elementwise `a + b`, broadcasting `b` over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(out, rg, Op::Softmax(a))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let rows = t.numel() / c;
        let mut xhat = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in xhat.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: xhat.clone(),
        };
        let rg = self.rg(a);
        self.push(
            out,
            rg,
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, rg, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::gelu);
        let rg = self.rg(a);
        self.push(t, rg, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, kernels::sigmoid);
        let rg = self.rg(a);
        self.push(t, rg, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        let rg = self.rg(a);
        self.push(t, rg, Op::Log(a))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), rg, Op::Mean(a))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .clone();
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let ok = t.shape().len() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(shape_err("concat", &first, t));
            }
            total += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let blk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape().len() || start >= end || end > t.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {:?}", t.shape()),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = w;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, rg, Op::Slice { x: a, axis, start }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            rg,
            Op::Transpose(a),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// Gathers rows of a `[vocab, d]` table: output `[indices.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("index {bad} out of range for vocab {vocab}"),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: "no indices".into(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data,
            },
            rg,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Convolution of a `[C, H, W]` image with `[O, C, k, k]` weights and an
    /// optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", tx, tw));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[2], stride, pad)
            .ok_or_else(|| shape_err("conv2d", tx, tw))?;
        let o = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d", tw, self.value(b)));
            }
        }
        let cols = kernels::im2col(tx.data(), &geom);
        let n = geom.col_cols();
        let mut out = vec![0.0; o * n];
        kernels::gemm(
            o,
            geom.col_rows(),
            n,
            1.0,
            tw.data(),
            false,
            &cols,
            false,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (oc, row) in out.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[oc]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor {
                shape: vec![o, geom.out_h, geom.out_w],
                data: out,
            },
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Transposed convolution of `[C_in, H, W]` with `[C_in, C_out, k, k]`
    /// weights; output side is `(H-1)*stride - 2*pad + k`.
    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("transposed_conv2d", tx, tw));
        }
        let (cin, cout, k) = (ws[0], ws[1], ws[2]);
        let oh = ((xs[1] - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| shape_err("transposed_conv2d", tx, tw))?;
        let ow = ((xs[2] - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| shape_err("transposed_conv2d", tx, tw))?;
        // The forward pass is the adjoint of a conv over the output image.
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == xs[1] && g.out_w == xs[2])
            .ok_or_else(|| shape_err("transposed_conv2d", tx, tw))?;
        let hw = xs[1] * xs[2];
        let mut cols = vec![0.0; cout * k * k * hw];
        kernels::gemm(
            cout * k * k,
            cin,
            hw,
            1.0,
            tw.data(),
            true,
            tx.data(),
            false,
            &mut cols,
        );
        let mut out = kernels::col2im(&cols, &geom);
        if let Some(b) = b {
            let bd = self.value(b);
            if bd.shape() != [cout] {
                return Err(shape_err("transposed_conv2d", tw, bd));
            }
            for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += bd.data()[oc]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![cout, oh, ow],
                data: out,
            },
            rg,
            Op::ConvT2d { x, w, b, geom },
        ))
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`.
    ///
    /// `logits` is `[n, c]`; rows with weight 0 are masked out.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        let n = t.numel() / c;
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy_with_logits",
                msg: format!("target {bad} out of range for {c} classes"),
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Picks `x[i, indices[i]]` from a `[n, c]` tensor: output `[n]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = t.last_dim();
        let n = t.numel() / c;
        if indices.len() != n || indices.iter().any(|&k| k >= c) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("{} indices into {:?}", indices.len(), t.shape()),
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(i, &k)| t.data()[i * c + k])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            rg,
            Op::Gather {
                x: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Replaces elements where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(TensorError::Shape {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(
            out,
            rg,
            Op::MaskedFill {
                x: a,
                mask: mask.to_vec(),
            },
        ))
    }

    // ---- convenience compositions ----

    /// `x W + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// Intermediate gradients are scratch; calling this twice without
    /// [`Graph::zero_grad`] doubles the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = scratch[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(id, &g) {
                if !self.rg(parent) {
                    continue;
                }
                match &mut scratch[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut res = Vec::new();
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g, false, tb.data(), true, &mut ga);
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, ta.data(), true, g, false, &mut gb);
                    res.push((*b, gb));
                }
                res
            }
            Op::Add(a, b) => {
                let nb = val(*b).numel();
                vec![(*a, g.to_vec()), (*b, reduce_broadcast(g, nb))]
            }
            Op::Sub(a, b) => {
                let nb = val(*b).numel();
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![(*a, g.to_vec()), (*b, reduce_broadcast(&neg, nb))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nb = tb.numel();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * tb.data()[i % nb])
                    .collect();
                let full: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                vec![(*a, ga), (*b, reduce_broadcast(&full, nb))]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Softmax(a) => {
                let c = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), xr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        xr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, hr), xr)) in g
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgh = gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for i in 0..c {
                        xr[i] = inv_std[r] * (gr[i] - mg - hr[i] * mgh);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Relu(a) => {
                let gx = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, gx)]
            }
            Op::Gelu(a) => {
                let gx = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, x)| gv * kernels::gelu_grad(*x))
                    .collect();
                vec![(*a, gx)]
            }
            Op::Sigmoid(a) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                vec![(*a, gx)]
            }
            Op::Exp(a) => {
                let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                vec![(*a, gx)]
            }
            Op::Log(a) => {
                let gx = g.iter().zip(val(*a).data()).map(|(gv, x)| gv / x).collect();
                vec![(*a, gx)]
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((p, gp));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let src = val(*x);
                let (outer, len, inner) = split_axis(src.shape(), *axis);
                let w = out.shape()[*axis];
                let mut gx = vec![0.0; src.numel()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gx[dst..dst + w * inner]
                        .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                vec![(*a, gx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Embedding { table, indices } => {
                let t = val(*table);
                let d = t.last_dim();
                let mut gt = vec![0.0; t.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, src) in gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                    {
                        *dst += src;
                    }
                }
                vec![(*table, gt)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let tw = val(*w);
                let o = tw.shape()[0];
                let (kr, n) = (geom.col_rows(), geom.col_cols());
                let mut res = Vec::new();
                if self.rg(*w) {
                    let mut gw = vec![0.0; o * kr];
                    kernels::gemm(o, n, kr, 1.0, g, false, cols, true, &mut gw);
                    res.push((*w, gw));
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; kr * n];
                    kernels::gemm(kr, o, n, 1.0, tw.data(), true, g, false, &mut gcols);
                    res.push((*x, kernels::col2im(&gcols, geom)));
                }
                if let Some(b) = b {
                    res.push((*b, g.chunks(n).map(|r| r.iter().sum()).collect()));
                }
                res
            }
            Op::ConvT2d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let cin = tw.shape()[0];
                let (kr, hw) = (geom.col_rows(), geom.col_cols());
                let gcols = kernels::im2col(g, geom);
                let mut res = Vec::new();
                if self.rg(*x) {
                    let mut gx = vec![0.0; cin * hw];
                    kernels::gemm(cin, kr, hw, 1.0, tw.data(), false, &gcols, false, &mut gx);
                    res.push((*x, gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; cin * kr];
                    kernels::gemm(cin, hw, kr, 1.0, tx.data(), false, &gcols, true, &mut gw);
                    res.push((*w, gw));
                }
                if let Some(b) = b {
                    let plane = geom.height * geom.width;
                    res.push((*b, g.chunks(plane).map(|r| r.iter().sum()).collect()));
                }
                res
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = val(*logits).last_dim();
                let mut gx = probs.clone();
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    let wv = weights[i] * g[0];
                    for v in row.iter_mut() {
                        *v *= wv;
                    }
                    row[targets[i]] -= wv;
                }
                vec![(*logits, gx)]
            }
            Op::Gather { x, indices } => {
                let t = val(*x);
                let c = t.last_dim();
                let mut gx = vec![0.0; t.numel()];
                for (i, &k) in indices.iter().enumerate() {
                    gx[i * c + k] = g[i];
                }
                vec![(*x, gx)]
            }
            Op::MaskedFill { x, mask } => {
                let gx = g
                    .iter()
                    .zip(mask)
                    .map(|(gv, m)| if *m { 0.0 } else { *gv })
                    .collect();
                vec![(*x, gx)]
            }
        }
    }
}
