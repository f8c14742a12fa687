use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn vecfont(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vecfont"))
        .args(args)
        .output()
        .expect("spawn vecfont")
}

fn ok(args: &[&str]) -> Output {
    let out = vecfont(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unit_square_render_scores_zero_against_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("square.pgm");
    ok(&["render", s(&fixture("unit_square.svg")), "-o", s(&pgm)]);
    let v = json(&ok(&["score", s(&pgm), s(&fixture("ones_64.pgm"))]));
    assert_eq!(v["l1"], 0.0);
    assert_eq!(v["iou"], 1.0);
    assert_eq!(v["resolution"], 64);
    // A glyph operand is rasterized at the image's resolution.
    let v = json(&ok(&[
        "score",
        s(&fixture("unit_square.svg")),
        s(&fixture("ones_64.pgm")),
    ]));
    assert_eq!(v["l1"], 0.0);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        vecfont(&["score", "a.pgm", "b.pgm", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(vecfont(&["frobnicate"]).status.code(), Some(2));
    let missing = dir.path().join("missing.pgm");
    assert_eq!(
        vecfont(&["score", s(&missing), s(&fixture("ones_64.pgm"))])
            .status
            .code(),
        Some(5)
    );
    let bad = dir.path().join("bad.svg");
    std::fs::write(&bad, "M 0 0 Q 1 1 1 0").unwrap();
    assert_eq!(
        vecfont(&["render", s(&bad), "-o", s(&dir.path().join("x.pgm"))])
            .status
            .code(),
        Some(3)
    );
    let out = vecfont(&["render", s(&fixture("unit_square.svg")), "-o", "x.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert_eq!(
        vecfont(&["--threads", "0", "grad-check"]).status.code(),
        Some(2)
    );
}

#[test]
fn convert_round_trips_through_jsonl_and_relaxed() {
    let dir = tempfile::tempdir().unwrap();
    let relaxed = dir.path().join("g.jsonl");
    let back = dir.path().join("g.svg");
    ok(&[
        "convert",
        s(&fixture("unit_square.svg")),
        "-o",
        s(&relaxed),
        "--to",
        "relaxed",
        "--class",
        "3",
    ]);
    let line = std::fs::read_to_string(&relaxed).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(rec["rep_kind"], "Relaxed");
    assert_eq!(rec["char_class"], 3);
    ok(&["convert", s(&relaxed), "-o", s(&back)]);
    let v = json(&ok(&["score", s(&back), s(&fixture("ones_64.pgm"))]));
    assert_eq!(v["l1"], 0.0);
}

#[test]
fn grad_check_tiny_passes() {
    let out = ok(&["grad-check", "--tiny"]);
    let v = json(&out);
    let max = v["max_rel_error"].as_f64().unwrap();
    assert!(max < 1e-4, "{max}");
    assert_eq!(v["passed"], true);
}

#[test]
fn data_train_synth_interp_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.json");
    ok(&[
        "--seed",
        "3",
        "gen-data",
        "-o",
        s(&data),
        "--fonts",
        "4",
        "--resolution",
        "16",
    ]);
    ok(&[
        "--seed",
        "1",
        "train",
        "--data",
        s(&data),
        "--config",
        s(&fixture("train_smoke.json")),
        "-o",
        s(&ckpt),
        "--steps",
        "5",
    ]);
    let log = std::fs::read_to_string(ckpt.with_extension("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "l_img",
        "l_ce_init",
        "l_ce_refine",
        "l_cons",
        "l_bezier",
        "l_kl",
        "total",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let train = data.join("train.jsonl");
    let fonts: Vec<String> = std::fs::read_to_string(&train)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["style_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    let synth = dir.path().join("synth.jsonl");
    let run_synth = || {
        ok(&[
            "--seed",
            "5",
            "synth",
            "--checkpoint",
            s(&ckpt),
            "--refs",
            s(&train),
            "--style",
            &fonts[0],
            "--classes",
            "4,6",
            "--candidates",
            "3",
            "-o",
            s(&synth),
        ]);
        std::fs::read_to_string(&synth).unwrap()
    };
    let a = run_synth();
    assert_eq!(a.lines().count(), 2);
    assert_eq!(a, run_synth());

    // Interpolation takes one font per file.
    let split = |id: &str, name: &str| {
        let p = dir.path().join(name);
        let text: String = std::fs::read_to_string(&train)
            .unwrap()
            .lines()
            .filter(|l| l.contains(&format!("\"style_id\":\"{id}\"")))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(!text.is_empty());
        std::fs::write(&p, text).unwrap();
        p
    };
    let fa = split(&fonts[0], "a.jsonl");
    let last = fonts.last().unwrap().clone();
    let fb = split(&last, "b.jsonl");
    let out = dir.path().join("interp.jsonl");
    let interp = |lambda: &str| {
        vecfont(&[
            "interp",
            "--checkpoint",
            s(&ckpt),
            "--a",
            s(&fa),
            "--b",
            s(&fb),
            "--lambda",
            lambda,
            "--classes",
            "1",
            "-o",
            s(&out),
        ])
    };
    assert!(interp("0.5").status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);
    assert_eq!(interp("1.5").status.code(), Some(2));
}

#[test]
fn ablate_emits_one_summary_entry_per_aux_count() {
    let args = |threads: &'static str| {
        vec![
            "--seed",
            "2",
            "--threads",
            threads,
            "ablate",
            "--fonts",
            "4",
            "--config",
            fixture("ablate_smoke.json")
                .to_str()
                .unwrap()
                .to_string()
                .leak(),
            "--aux",
            "0,3",
            "--seeds",
            "1",
        ]
    };
    let one = ok(&args("1"));
    let v = json(&one);
    let summary = v["summary"].as_array().unwrap();
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0]["aux_points"], 0);
    assert_eq!(summary[1]["aux_points"], 3);
    for e in summary {
        let l1 = e["l1_refined"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&l1));
    }
    // Runs are seeded individually, so threading does not change the output.
    assert_eq!(one.stdout, ok(&args("2")).stdout);
}
