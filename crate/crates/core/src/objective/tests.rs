use super::*;
use crate::bezier::alignment_distance;
use crate::glyph::{DrawCommand, Point, RepKind};
use crate::raster::l1_error;
use crate::tensor::grad_check;
use rand::Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Logits that put essentially all mass on the given bins.
fn saturated(cmds: &[QuantizedCommand]) -> SeqPrediction {
    let n = cmds.len();
    let mut c = vec![0.0; n * 4];
    let mut a = vec![0.0; n * 8 * BINS];
    for (j, q) in cmds.iter().enumerate() {
        c[j * 4 + q.cmd_id] = 100.0;
        for k in 0..8 {
            a[(j * 8 + k) * BINS + q.arg_bins[k]] = 100.0;
        }
    }
    SeqPrediction::from_logits(
        Tensor::new(&[n, 4], c).unwrap(),
        Tensor::new(&[n * 8, BINS], a).unwrap(),
    )
}

fn q(c: DrawCommand) -> QuantizedCommand {
    QuantizedCommand::from_command(&c, 0.5, 0.5)
}

fn sample_seq() -> Vec<QuantizedCommand> {
    let p = Point::new;
    vec![
        q(DrawCommand::relaxed_move(p(0.2, 0.2), p(0.2, 0.2))),
        q(DrawCommand::relaxed_line(p(0.2, 0.2), p(0.8, 0.2))),
        q(DrawCommand::relaxed_curve(
            p(0.8, 0.2),
            p(0.9, 0.5),
            p(0.6, 0.9),
            p(0.2, 0.8),
        )),
        q(DrawCommand::relaxed_line(p(0.2, 0.8), p(0.2, 0.2))),
        q(DrawCommand::eos()),
        q(DrawCommand::eos()),
    ]
}

#[test]
fn default_weights_sum() {
    let ones = LossTerms {
        l_img: 1.0,
        l_ce_init: 1.0,
        l_ce_refine: 1.0,
        l_cons: 1.0,
        l_bezier: 1.0,
        l_kl: 1.0,
    };
    let r = total(&ones, &LossWeights::default()).unwrap();
    assert_eq!(r.total, 1.0 + 1.0 + 1.0 + 10.0 + 1.0 + 0.01);
    assert!((r.total - 14.01).abs() < 1e-12);
    assert_eq!(
        total(&LossTerms::default(), &LossWeights::default())
            .unwrap()
            .total,
        0.0
    );
    let mut r = rng(1);
    let t = LossTerms {
        l_img: r.gen(),
        l_ce_init: r.gen(),
        l_ce_refine: r.gen(),
        l_cons: r.gen(),
        l_bezier: r.gen(),
        l_kl: r.gen(),
    };
    let w = LossWeights::default();
    let dot: f64 = t.values().iter().zip(w.values()).map(|(a, b)| a * b).sum();
    assert!((total(&t, &w).unwrap().total - dot).abs() < 1e-14);
    let bad = LossTerms {
        l_cons: f64::NAN,
        ..t
    };
    match total(&bad, &w) {
        Err(ObjectiveError::NonFinite { term: "l_cons", .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn kl_closed_form() {
    assert_eq!(loss_kl(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
    assert!((loss_kl(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap() - 0.5).abs() < 1e-15);
    let mut r = rng(2);
    let mu: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
    let lv: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
    let mut g = Graph::new();
    let (m, l) = (
        g.constant(Tensor::from_vec(mu.clone())),
        g.constant(Tensor::from_vec(lv.clone())),
    );
    let v = loss_kl_var(&mut g, m, l).unwrap();
    let want: f64 = mu
        .iter()
        .zip(&lv)
        .map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l))
        .sum();
    assert!((g.value(v).item() - want).abs() < 1e-12);
    assert!((loss_kl(&mu, &lv).unwrap() - want).abs() < 1e-12);
}

#[test]
fn image_loss() {
    let mut r = rng(3);
    let px: Vec<f64> = (0..256)
        .map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    let target = RasterImage::new(16, px.clone()).unwrap();
    let mut g = Graph::new();
    let sat: Vec<f64> = px
        .iter()
        .map(|&v| if v > 0.5 { 60.0 } else { -60.0 })
        .collect();
    let logits = g.constant(Tensor::new(&[1, 16, 16], sat).unwrap());
    let l = loss_img_var(&mut g, logits, &target, None).unwrap();
    assert!(g.value(l).item() < 1e-20);

    let raw: Vec<f64> = (0..256).map(|_| r.gen_range(-3.0..3.0)).collect();
    let pred =
        RasterImage::new(16, raw.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()).unwrap();
    let logits = g.constant(Tensor::new(&[1, 16, 16], raw).unwrap());
    let l = loss_img_var(&mut g, logits, &target, None).unwrap();
    assert!((g.value(l).item() - l1_error(&pred, &target).unwrap()).abs() < 1e-12);

    let net = PerceptualNet::new(0);
    let a = g.constant(Tensor::new(&[1, 16, 16], px.clone()).unwrap());
    let b = g.constant(Tensor::new(&[1, 16, 16], px).unwrap());
    let d = net.distance(&mut g, a, b).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
    let small = RasterImage::filled(8, 0.0).unwrap();
    assert!(loss_img_var(&mut g, logits, &small, None).is_err());
}

#[test]
fn cross_entropy() {
    let t = sample_seq();
    let p = saturated(&t);
    assert!(loss_ce(&p, &t, 1.0).unwrap() < 1e-8);

    // Two steps: a Move and the first EOS.
    let t2 = vec![
        q(DrawCommand::relaxed_move(
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
        )),
        q(DrawCommand::eos()),
    ];
    let mut r = rng(4);
    let c: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..2 * 8 * BINS).map(|_| r.gen_range(-1.0..1.0)).collect();
    let pred = SeqPrediction::from_logits(
        Tensor::new(&[2, 4], c.clone()).unwrap(),
        Tensor::new(&[16, BINS], a.clone()).unwrap(),
    );
    let nll = |row: &[f64], k: usize| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        m + s.ln() - row[k]
    };
    let w_cmd = 0.7;
    let mut want = 0.0;
    for j in 0..2 {
        want += w_cmd * nll(&c[j * 4..j * 4 + 4], t2[j].cmd_id);
        for k in 0..8 {
            if t2[j].mask[k] {
                let row = &a[(j * 8 + k) * BINS..(j * 8 + k + 1) * BINS];
                want += nll(row, t2[j].arg_bins[k]);
            }
        }
    }
    want /= 2.0;
    assert!((loss_ce(&pred, &t2, w_cmd).unwrap() - want).abs() < 1e-12);

    // EOS-only supervision sees only the command term.
    let eos = vec![q(DrawCommand::eos()); 2];
    let want_eos = nll(&c[0..4], 3);
    assert!((loss_ce(&pred, &eos, 1.0).unwrap() - want_eos).abs() < 1e-12);

    // With w_cmd = 0, command logits do not matter.
    let mut other = pred.clone();
    other.cmd_logits = Tensor::full(&[2, 4], 9.0);
    assert_eq!(
        loss_ce(&pred, &t2, 0.0).unwrap(),
        loss_ce(&other, &t2, 0.0).unwrap()
    );
}

#[test]
fn consistency() {
    let types = [
        CommandType::MoveFromTo,
        CommandType::LineFromTo,
        CommandType::LineFromTo,
        CommandType::Eos,
    ];
    let seq = |gap: f64| {
        vec![
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.2],
            [0.2 + gap, 0.2, 0.0, 0.0, 0.0, 0.0, 0.8, 0.2],
            [0.8, 0.2, 0.0, 0.0, 0.0, 0.0, 0.5, 0.9],
            [0.0; 8],
        ]
    };
    assert_eq!(loss_cons(&seq(0.0), &seq(0.0), &types).unwrap(), 0.0);
    assert!((loss_cons(&seq(0.1), &seq(0.0), &types).unwrap() - 0.01).abs() < 1e-15);

    // Brute-force scan over random sequences.
    let mut r = rng(5);
    for _ in 0..20 {
        let n = 7;
        let ty: Vec<CommandType> = (0..n)
            .map(|j| {
                if j == 0 {
                    CommandType::MoveFromTo
                } else {
                    CommandType::ALL[r.gen_range(0..3)]
                }
            })
            .collect();
        let a: Vec<[f64; 8]> = (0..n).map(|_| std::array::from_fn(|_| r.gen())).collect();
        let b: Vec<[f64; 8]> = (0..n).map(|_| std::array::from_fn(|_| r.gen())).collect();
        let mut want = 0.0;
        for s in [&a, &b] {
            for j in 1..n {
                if matches!(ty[j], CommandType::LineFromTo | CommandType::CurveFromTo) {
                    want += (s[j][0] - s[j - 1][6]).powi(2) + (s[j][1] - s[j - 1][7]).powi(2);
                }
            }
        }
        assert!((loss_cons(&a, &b, &ty).unwrap() - want).abs() < 1e-12);
    }
}

fn invalid(e: ObjectiveError) -> TensorError {
    TensorError::Invalid {
        op: "loss",
        msg: e.to_string(),
    }
}

fn soft_of(g: &mut Graph, p: &SeqPrediction) -> Var {
    let a = g.constant(p.arg_logits.clone());
    soft_coords(g, a).unwrap()
}

#[test]
fn bezier_term() {
    let t = sample_seq();
    let p = saturated(&t);
    let mut g = Graph::new();
    let s = soft_of(&mut g, &p);
    let v = loss_bezier_var(
        &mut g,
        s,
        s,
        std::slice::from_ref(&t),
        &AuxParams::default(),
    )
    .unwrap();
    assert!(g.value(v).item() < 1e-24);
    let z = loss_bezier_var(
        &mut g,
        s,
        s,
        std::slice::from_ref(&t),
        &AuxParams::uniform(0),
    )
    .unwrap();
    assert_eq!(g.value(z).item(), 0.0);

    // A shifted prediction matches alignment_distance on both sequences.
    let mut shifted = t.clone();
    for qc in shifted.iter_mut() {
        for k in 0..8 {
            if qc.mask[k] {
                qc.arg_bins[k] = (qc.arg_bins[k] + 3 + k).min(255);
            }
        }
    }
    let ps = saturated(&shifted);
    let s2 = soft_of(&mut g, &ps);
    let v = loss_bezier_var(
        &mut g,
        s2,
        s,
        std::slice::from_ref(&t),
        &AuxParams::default(),
    )
    .unwrap();
    let mut want = 0.0;
    for (a, b) in shifted.iter().zip(&t) {
        if b.cmd().is_drawing() {
            want += alignment_distance(&a.to_command(), &b.to_command(), &AuxParams::default())
                .unwrap();
        }
    }
    assert!(
        (g.value(v).item() - want).abs() < 1e-12,
        "{} vs {want}",
        g.value(v).item()
    );
}

#[test]
fn bezier_term_is_differentiable() {
    let t = sample_seq();
    let mut r = rng(6);
    let pred = Tensor::new(&[t.len(), 8], (0..t.len() * 8).map(|_| r.gen()).collect()).unwrap();
    let gt = t.clone();
    let err = grad_check(
        |g, x| {
            let z = g.constant(Tensor::zeros(g.shape(x)));
            loss_bezier_var(g, x, z, std::slice::from_ref(&gt), &AuxParams::default())
                .map_err(invalid)
        },
        &pred,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cross_entropy_is_differentiable() {
    let t = sample_seq();
    let mut r = rng(7);
    let logits = Tensor::randn(&[t.len(), 4], 1.0, &mut r);
    let err = grad_check(
        |g, x| {
            let args = g.constant(Tensor::zeros(&[t.len() * 8, BINS]));
            loss_ce_var(g, SeqVars { cmd: x, args }, std::slice::from_ref(&t), 1.0).map_err(invalid)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn ground_truth_fed_as_prediction_has_zero_geometry_losses() {
    let t = sample_seq();
    let coords: Vec<[f64; 8]> = t.iter().map(|q| q.to_command().coords()).collect();
    let types: Vec<CommandType> = t.iter().map(|q| q.cmd()).collect();
    assert_eq!(loss_cons(&coords, &coords, &types).unwrap(), 0.0);
    let relaxed = t.iter().map(|q| q.to_command()).collect::<Vec<_>>();
    assert!(relaxed
        .iter()
        .all(|c| c.mask == c.cmd.mask(RepKind::Relaxed)));
}
