//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn numeric_grad<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares reverse-mode gradients of the scalar `f` at `x` with central
/// differences and returns the largest per-coordinate relative error.
///
/// `f` receives a fresh graph and the input handle and must build the same
/// computation every time; two evaluations that differ in any bit are
/// reported as [`TensorError::NonDeterministic`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to the coordinates in `coords`.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let (analytic, numeric) = gradient_pairs(f, x, eps, coords)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Analytic and central-difference gradients at `coords`, in that order.
pub fn gradient_pairs<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("coordinate {bad} out of range for {} elements", x.numel()),
        });
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let loss = f(&mut g, v)?;
    g.backward(loss)?;
    let full = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.clone();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        analytic.push(full[i]);
        numeric.push((plus - minus) / (2.0 * eps));
    }
    Ok((analytic, numeric))
}

/// `|a - n|_2 / max(|a|_2, |n|_2)` over whole gradient vectors, 0 when both
/// vanish.
pub fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Random inputs for the op suite, uniform in `[lo, hi)`.
fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape and data agree")
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate
/// contributes with a distinct weight.
fn probe(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

/// Finite-difference check of every differentiable graph op (each operand
/// of binary ops separately). Returns `(op, max relative error)` pairs.
pub fn op_suite(seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str,
                     x: Tensor,
                     out_shape: &[usize],
                     f: &dyn Fn(&mut Graph, Var) -> Result<Var>,
                     rng: &mut ChaCha8Rng|
     -> Result<()> {
        let r = uniform(out_shape, -1.0, 1.0, rng);
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                probe(g, y, &r)
            },
            &x,
            eps,
        )?;
        out.push((name.to_string(), err));
        Ok(())
    };

    let a = uniform(&[3, 4], -1.0, 1.0, rng);
    let b = uniform(&[4, 5], -1.0, 1.0, rng);
    let (ac, bc) = (a.clone(), b.clone());
    check(
        "matmul.lhs",
        a.clone(),
        &[3, 5],
        &move |g, v| {
            let w = g.constant(bc.clone());
            g.matmul(v, w)
        },
        rng,
    )?;
    check(
        "matmul.rhs",
        b.clone(),
        &[3, 5],
        &move |g, v| {
            let x = g.constant(ac.clone());
            g.matmul(x, v)
        },
        rng,
    )?;

    let c = uniform(&[3, 4], -1.0, 1.0, rng);
    let row = uniform(&[4], -1.0, 1.0, rng);
    let cc = c.clone();
    check(
        "add.lhs",
        a.clone(),
        &[3, 4],
        &move |g, v| {
            let w = g.constant(cc.clone());
            g.add(v, w)
        },
        rng,
    )?;
    let ac = a.clone();
    check(
        "add.broadcast",
        row.clone(),
        &[3, 4],
        &move |g, v| {
            let x = g.constant(ac.clone());
            g.add(x, v)
        },
        rng,
    )?;
    let cc = c.clone();
    check(
        "sub.lhs",
        a.clone(),
        &[3, 4],
        &move |g, v| {
            let w = g.constant(cc.clone());
            g.sub(v, w)
        },
        rng,
    )?;
    let ac = a.clone();
    check(
        "sub.rhs",
        c.clone(),
        &[3, 4],
        &move |g, v| {
            let x = g.constant(ac.clone());
            g.sub(x, v)
        },
        rng,
    )?;
    let cc = c.clone();
    check(
        "mul.lhs",
        a.clone(),
        &[3, 4],
        &move |g, v| {
            let w = g.constant(cc.clone());
            g.mul(v, w)
        },
        rng,
    )?;
    let ac = a.clone();
    check(
        "mul.broadcast",
        row.clone(),
        &[3, 4],
        &move |g, v| {
            let x = g.constant(ac.clone());
            g.mul(x, v)
        },
        rng,
    )?;
    check(
        "scale",
        a.clone(),
        &[3, 4],
        &|g, v| Ok(g.scale(v, -2.5)),
        rng,
    )?;
    check("square", a.clone(), &[3, 4], &|g, v| g.square(v), rng)?;
    check("softmax", a.clone(), &[3, 4], &|g, v| Ok(g.softmax(v)), rng)?;
    check(
        "layer_norm",
        a.clone(),
        &[3, 4],
        &|g, v| Ok(g.layer_norm(v)),
        rng,
    )?;
    // Kinks of relu are avoided by keeping inputs away from 0.
    let away = Tensor::new(
        &[3, 4],
        a.data()
            .iter()
            .map(|&x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
            .collect(),
    )?;
    check("relu", away, &[3, 4], &|g, v| Ok(g.relu(v)), rng)?;
    check("gelu", a.clone(), &[3, 4], &|g, v| Ok(g.gelu(v)), rng)?;
    check("sigmoid", a.clone(), &[3, 4], &|g, v| Ok(g.sigmoid(v)), rng)?;
    check("exp", a.clone(), &[3, 4], &|g, v| Ok(g.exp(v)), rng)?;
    check(
        "log",
        uniform(&[3, 4], 0.5, 2.0, rng),
        &[3, 4],
        &|g, v| Ok(g.log(v)),
        rng,
    )?;
    check("mean", a.clone(), &[1], &|g, v| Ok(g.mean(v)), rng)?;
    check("sum", a.clone(), &[1], &|g, v| Ok(g.sum(v)), rng)?;
    let cc = c.clone();
    check(
        "concat.axis0",
        a.clone(),
        &[6, 4],
        &move |g, v| {
            let w = g.constant(cc.clone());
            g.concat(&[v, w], 0)
        },
        rng,
    )?;
    let cc = c.clone();
    check(
        "concat.axis1",
        a.clone(),
        &[3, 8],
        &move |g, v| {
            let w = g.constant(cc.clone());
            g.concat(&[w, v], 1)
        },
        rng,
    )?;
    check(
        "slice.axis0",
        a.clone(),
        &[2, 4],
        &|g, v| g.slice(v, 0, 1, 3),
        rng,
    )?;
    check(
        "slice.axis1",
        a.clone(),
        &[3, 2],
        &|g, v| g.slice(v, 1, 1, 3),
        rng,
    )?;
    check("transpose", a.clone(), &[4, 3], &|g, v| g.transpose(v), rng)?;
    check(
        "reshape",
        a.clone(),
        &[2, 6],
        &|g, v| g.reshape(v, &[2, 6]),
        rng,
    )?;
    check(
        "embedding_lookup",
        a.clone(),
        &[4, 4],
        &|g, v| g.embedding_lookup(v, &[2, 0, 2, 1]),
        rng,
    )?;
    check(
        "gather",
        a.clone(),
        &[3],
        &|g, v| g.gather(v, &[3, 0, 1]),
        rng,
    )?;
    check(
        "masked_fill",
        a.clone(),
        &[3, 4],
        &|g, v| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
            g.masked_fill(v, &mask, -5.0)
        },
        rng,
    )?;
    let logits = uniform(&[4, 5], -2.0, 2.0, rng);
    check(
        "cross_entropy_with_logits",
        logits,
        &[1],
        &|g, v| g.cross_entropy_with_logits(v, &[1, 4, 0, 2], &[1.0, 0.5, 0.0, 2.0]),
        rng,
    )?;
    let bias = uniform(&[5], -1.0, 1.0, rng);
    let (bc, biasc) = (b.clone(), bias.clone());
    check(
        "linear.x",
        a.clone(),
        &[3, 5],
        &move |g, v| {
            let w = g.constant(bc.clone());
            let bb = g.constant(biasc.clone());
            g.linear(v, w, Some(bb))
        },
        rng,
    )?;
    let ac = a.clone();
    check(
        "linear.bias",
        bias,
        &[3, 5],
        &move |g, v| {
            let x = g.constant(ac.clone());
            let w = g.constant(b.clone());
            g.linear(x, w, Some(v))
        },
        rng,
    )?;

    let img = uniform(&[2, 6, 6], -1.0, 1.0, rng);
    let w = uniform(&[3, 2, 4, 4], -0.5, 0.5, rng);
    let cb = uniform(&[3], -0.5, 0.5, rng);
    let (wc, cbc) = (w.clone(), cb.clone());
    check(
        "conv2d.x",
        img.clone(),
        &[3, 3, 3],
        &move |g, v| {
            let (w, b) = (g.constant(wc.clone()), g.constant(cbc.clone()));
            g.conv2d(v, w, Some(b), 2, 1)
        },
        rng,
    )?;
    let (ic, cbc) = (img.clone(), cb.clone());
    check(
        "conv2d.w",
        w,
        &[3, 3, 3],
        &move |g, v| {
            let (x, b) = (g.constant(ic.clone()), g.constant(cbc.clone()));
            g.conv2d(x, v, Some(b), 2, 1)
        },
        rng,
    )?;
    let ic = img.clone();
    let wc = uniform(&[3, 2, 4, 4], -0.5, 0.5, rng);
    check(
        "conv2d.bias",
        cb,
        &[3, 3, 3],
        &move |g, v| {
            let (x, w) = (g.constant(ic.clone()), g.constant(wc.clone()));
            g.conv2d(x, w, Some(v), 2, 1)
        },
        rng,
    )?;
    let small = uniform(&[2, 3, 3], -1.0, 1.0, rng);
    let tw = uniform(&[2, 3, 4, 4], -0.5, 0.5, rng);
    let tb = uniform(&[3], -0.5, 0.5, rng);
    let (twc, tbc) = (tw.clone(), tb.clone());
    check(
        "transposed_conv2d.x",
        small.clone(),
        &[3, 6, 6],
        &move |g, v| {
            let (w, b) = (g.constant(twc.clone()), g.constant(tbc.clone()));
            g.transposed_conv2d(v, w, Some(b), 2, 1)
        },
        rng,
    )?;
    let (sc, tbc) = (small.clone(), tb.clone());
    check(
        "transposed_conv2d.w",
        tw.clone(),
        &[3, 6, 6],
        &move |g, v| {
            let (x, b) = (g.constant(sc.clone()), g.constant(tbc.clone()));
            g.transposed_conv2d(x, v, Some(b), 2, 1)
        },
        rng,
    )?;
    check(
        "transposed_conv2d.bias",
        tb,
        &[3, 6, 6],
        &move |g, v| {
            let (x, w) = (g.constant(small.clone()), g.constant(tw.clone()));
            g.transposed_conv2d(x, w, Some(v), 2, 1)
        },
        rng,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_vec(vec![1.0]);
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.sum(v);
                Ok(g.scale(s, calls.get() as f64))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(TensorError::NonDeterministic { .. })));
    }

    #[test]
    fn every_op_passes() {
        let report = op_suite(7, 1e-5).unwrap();
        assert!(report.len() >= 30);
        for (name, err) in report {
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
