//! Parametric toy fonts.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::glyph::{read_fonts_jsonl, write_fonts_jsonl, DrawCommand, Font, Glyph, Point, RepKind};
use crate::raster::{rasterize, FillRule, RasterImage};

/// Character classes of the toy alphabet, in class-index order.
pub const CLASS_NAMES: [&str; 8] = ["box", "ring", "L", "T", "S", "triangle", "U", "H"];

pub const N_CLASSES: usize = CLASS_NAMES.len();

/// Style parameters shared by every glyph of one toy font.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFontSpec {
    /// Stroke thickness, canvas units, in `[0.08, 0.2]`.
    pub stroke: f64,
    /// Horizontal shear per unit of height, in `[-0.25, 0.25]`.
    pub slant: f64,
    /// Width of the glyph box relative to its height, in `[0.7, 1.0]`.
    pub aspect: f64,
    /// Corner radius of the box glyph, in `[0.03, 0.12]`.
    pub roundness: f64,
}

impl ToyFontSpec {
    pub const STROKE: (f64, f64) = (0.08, 0.2);
    pub const SLANT: (f64, f64) = (-0.25, 0.25);
    pub const ASPECT: (f64, f64) = (0.7, 1.0);
    pub const ROUNDNESS: (f64, f64) = (0.03, 0.12);

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            stroke: rng.gen_range(Self::STROKE.0..=Self::STROKE.1),
            slant: rng.gen_range(Self::SLANT.0..=Self::SLANT.1),
            aspect: rng.gen_range(Self::ASPECT.0..=Self::ASPECT.1),
            roundness: rng.gen_range(Self::ROUNDNESS.0..=Self::ROUNDNESS.1),
        }
    }

    /// All eight glyphs of this style, compact and subpath-sorted.
    pub fn font(&self, style_id: &str) -> Font {
        Font {
            style_id: style_id.to_string(),
            glyphs: (0..N_CLASSES).map(|c| self.glyph(c)).collect(),
        }
    }

    pub fn glyph(&self, class: usize) -> Glyph {
        let b = Builder::new(self);
        let paths = match class {
            0 => b.boxed(),
            1 => b.ring(),
            2 => b.ell(),
            3 => b.tee(),
            4 => b.ess(),
            5 => b.triangle(),
            6 => b.you(),
            7 => b.aitch(),
            _ => panic!("class {class} outside the toy alphabet"),
        };
        let mut cmds = Vec::new();
        for p in paths {
            cmds.extend(p.into_commands(self.slant));
        }
        Glyph::new(cmds, class, RepKind::Compact)
            .sort_subpaths()
            .expect("compact glyph")
    }
}

const MARGIN: f64 = 0.1;
/// Cubic handle length for a quarter ellipse.
const KAPPA: f64 = 0.552_284_749_830_793_4;

enum Seg {
    Line(Point),
    Curve(Point, Point, Point),
}

/// Closed contour in unsheared coordinates.
struct Contour {
    start: Point,
    segs: Vec<Seg>,
}

impl Contour {
    fn polygon(pts: &[(f64, f64)]) -> Self {
        let p = |(x, y): (f64, f64)| Point::new(x, y);
        let mut segs: Vec<Seg> = pts[1..].iter().map(|&q| Seg::Line(p(q))).collect();
        segs.push(Seg::Line(p(pts[0])));
        Self {
            start: p(pts[0]),
            segs,
        }
    }

    fn into_commands(self, slant: f64) -> Vec<DrawCommand> {
        // Shear about the vertical center, clamped to the canvas.
        let t = |q: Point| {
            Point::new(
                (q.x + slant * (0.5 - q.y)).clamp(0.0, 1.0),
                q.y.clamp(0.0, 1.0),
            )
        };
        let mut out = vec![DrawCommand::compact_move(t(self.start))];
        for s in self.segs {
            out.push(match s {
                Seg::Line(p) => DrawCommand::compact_line(t(p)),
                Seg::Curve(a, b, c) => DrawCommand::compact_curve(t(a), t(b), t(c)),
            });
        }
        out
    }

    /// The same contour traversed backwards.
    fn reversed(self) -> Self {
        let mut pts = vec![self.start];
        let mut ctrl = Vec::new();
        for s in &self.segs {
            match s {
                Seg::Line(p) => {
                    ctrl.push(None);
                    pts.push(*p);
                }
                Seg::Curve(a, b, c) => {
                    ctrl.push(Some((*a, *b)));
                    pts.push(*c);
                }
            }
        }
        let n = self.segs.len();
        let mut segs = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let to = pts[i];
            segs.push(match ctrl[i] {
                None => Seg::Line(to),
                Some((a, b)) => Seg::Curve(b, a, to),
            });
        }
        Self {
            start: pts[n],
            segs,
        }
    }
}

struct Builder {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    s: f64,
    r: f64,
}

impl Builder {
    fn new(spec: &ToyFontSpec) -> Self {
        let h = 1.0 - 2.0 * MARGIN;
        let w = spec.aspect * h;
        Self {
            x0: 0.5 - w / 2.0,
            x1: 0.5 + w / 2.0,
            y0: MARGIN,
            y1: 1.0 - MARGIN,
            s: spec.stroke,
            r: spec.roundness,
        }
    }

    fn w(&self) -> f64 {
        self.x1 - self.x0
    }

    fn h(&self) -> f64 {
        self.y1 - self.y0
    }

    fn rounded_rect(x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> Contour {
        let r = r.min((x1 - x0) / 2.0).min((y1 - y0) / 2.0);
        let k = r * (1.0 - KAPPA);
        let p = Point::new;
        Contour {
            start: p(x0 + r, y0),
            segs: vec![
                Seg::Line(p(x1 - r, y0)),
                Seg::Curve(p(x1 - k, y0), p(x1, y0 + k), p(x1, y0 + r)),
                Seg::Line(p(x1, y1 - r)),
                Seg::Curve(p(x1, y1 - k), p(x1 - k, y1), p(x1 - r, y1)),
                Seg::Line(p(x0 + r, y1)),
                Seg::Curve(p(x0 + k, y1), p(x0, y1 - k), p(x0, y1 - r)),
                Seg::Line(p(x0, y0 + r)),
                Seg::Curve(p(x0, y0 + k), p(x0 + k, y0), p(x0 + r, y0)),
            ],
        }
    }

    fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Contour {
        let (kx, ky) = (rx * KAPPA, ry * KAPPA);
        let p = Point::new;
        Contour {
            start: p(cx, cy - ry),
            segs: vec![
                Seg::Curve(p(cx + kx, cy - ry), p(cx + rx, cy - ky), p(cx + rx, cy)),
                Seg::Curve(p(cx + rx, cy + ky), p(cx + kx, cy + ry), p(cx, cy + ry)),
                Seg::Curve(p(cx - kx, cy + ry), p(cx - rx, cy + ky), p(cx - rx, cy)),
                Seg::Curve(p(cx - rx, cy - ky), p(cx - kx, cy - ry), p(cx, cy - ry)),
            ],
        }
    }

    fn boxed(&self) -> Vec<Contour> {
        let (s, r) = (self.s, self.r);
        vec![
            Self::rounded_rect(self.x0, self.y0, self.x1, self.y1, r),
            Self::rounded_rect(
                self.x0 + s,
                self.y0 + s,
                self.x1 - s,
                self.y1 - s,
                (r - s).max(0.0),
            )
            .reversed(),
        ]
    }

    fn ring(&self) -> Vec<Contour> {
        let (cx, cy) = (0.5, 0.5);
        let (rx, ry) = (self.w() / 2.0, self.h() / 2.0);
        vec![
            Self::ellipse(cx, cy, rx, ry),
            Self::ellipse(cx, cy, rx - self.s, ry - self.s).reversed(),
        ]
    }

    fn ell(&self) -> Vec<Contour> {
        let (x0, x1, y0, y1, s) = (self.x0, self.x1, self.y0, self.y1, self.s);
        vec![Contour::polygon(&[
            (x0, y0),
            (x0 + s, y0),
            (x0 + s, y1 - s),
            (x1, y1 - s),
            (x1, y1),
            (x0, y1),
        ])]
    }

    fn tee(&self) -> Vec<Contour> {
        let (x0, x1, y0, y1, s) = (self.x0, self.x1, self.y0, self.y1, self.s);
        let (a, b) = (0.5 - s / 2.0, 0.5 + s / 2.0);
        vec![Contour::polygon(&[
            (x0, y0),
            (x1, y0),
            (x1, y0 + s),
            (b, y0 + s),
            (b, y1),
            (a, y1),
            (a, y0 + s),
            (x0, y0 + s),
        ])]
    }

    /// A band of constant offset around one S-shaped cubic.
    fn ess(&self) -> Vec<Contour> {
        let (w, h) = (self.w(), self.h());
        let p = Point::new;
        let half = self.s / 2.0;
        let c = [
            p(self.x1 - half, self.y0 + 0.15 * h),
            p(self.x0 - 0.35 * w, self.y0 - 0.05 * h),
            p(self.x1 + 0.35 * w, self.y1 + 0.05 * h),
            p(self.x0 + half, self.y1 - 0.15 * h),
        ];
        let (dx, dy) = (c[3].x - c[0].x, c[3].y - c[0].y);
        let len = (dx * dx + dy * dy).sqrt();
        let (nx, ny) = (-dy / len * half, dx / len * half);
        let shift = |q: Point, k: f64| p(q.x + k * nx, q.y + k * ny);
        vec![Contour {
            start: shift(c[0], 1.0),
            segs: vec![
                Seg::Curve(shift(c[1], 1.0), shift(c[2], 1.0), shift(c[3], 1.0)),
                Seg::Line(shift(c[3], -1.0)),
                Seg::Curve(shift(c[2], -1.0), shift(c[1], -1.0), shift(c[0], -1.0)),
                Seg::Line(shift(c[0], 1.0)),
            ],
        }]
    }

    fn triangle(&self) -> Vec<Contour> {
        let a = (0.5, self.y0);
        let b = (self.x1, self.y1);
        let c = (self.x0, self.y1);
        let side =
            |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        let (la, lb, lc) = (side(b, c), side(c, a), side(a, b));
        let per = la + lb + lc;
        let inc = (
            (la * a.0 + lb * b.0 + lc * c.0) / per,
            (la * a.1 + lb * b.1 + lc * c.1) / per,
        );
        let area = 0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs();
        let inradius = 2.0 * area / per;
        let k = (inradius - self.s.min(0.5 * inradius)) / inradius;
        let shrink = |p: (f64, f64)| (inc.0 + k * (p.0 - inc.0), inc.1 + k * (p.1 - inc.1));
        vec![
            Contour::polygon(&[a, b, c]),
            Contour::polygon(&[shrink(a), shrink(b), shrink(c)]).reversed(),
        ]
    }

    fn you(&self) -> Vec<Contour> {
        let (x0, x1, y0, y1, s) = (self.x0, self.x1, self.y0, self.y1, self.s);
        let xc = 0.5;
        let ro = (x1 - x0) / 2.0;
        let ym = y1 - ro.min(0.6 * self.h());
        let ri = ro - s;
        let (ko, ki) = (KAPPA * ro, KAPPA * ri);
        let kyo = KAPPA * (y1 - ym);
        let kyi = KAPPA * (y1 - s - ym);
        let p = Point::new;
        vec![Contour {
            start: p(x0, y0),
            segs: vec![
                Seg::Line(p(x0, ym)),
                Seg::Curve(p(x0, ym + kyo), p(xc - ko, y1), p(xc, y1)),
                Seg::Curve(p(xc + ko, y1), p(x1, ym + kyo), p(x1, ym)),
                Seg::Line(p(x1, y0)),
                Seg::Line(p(x1 - s, y0)),
                Seg::Line(p(x1 - s, ym)),
                Seg::Curve(p(x1 - s, ym + kyi), p(xc + ki, y1 - s), p(xc, y1 - s)),
                Seg::Curve(p(xc - ki, y1 - s), p(x0 + s, ym + kyi), p(x0 + s, ym)),
                Seg::Line(p(x0 + s, y0)),
                Seg::Line(p(x0, y0)),
            ],
        }]
    }

    fn aitch(&self) -> Vec<Contour> {
        let (x0, x1, y0, y1, s) = (self.x0, self.x1, self.y0, self.y1, self.s);
        let (a, b) = (0.5 - s / 2.0, 0.5 + s / 2.0);
        vec![Contour::polygon(&[
            (x0, y0),
            (x0 + s, y0),
            (x0 + s, a),
            (x1 - s, a),
            (x1 - s, y0),
            (x1, y0),
            (x1, y1),
            (x1 - s, y1),
            (x1 - s, b),
            (x0 + s, b),
            (x0 + s, y1),
            (x0, y1),
        ])]
    }
}

/// Fonts split by style into train and test sets, with their style
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub seed: u64,
    pub train: Vec<Font>,
    pub test: Vec<Font>,
    pub specs: Vec<ToyFontSpec>,
}

/// Samples `n_fonts` styles from `seed`. The last `max(1, round(n / 10))`
/// fonts form the test split.
pub fn gen_dataset(seed: u64, n_fonts: usize) -> Result<ToyDataset> {
    if n_fonts < 2 {
        return Err(PipelineError::Config(format!(
            "need at least 2 fonts, got {n_fonts}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<ToyFontSpec> = (0..n_fonts)
        .map(|_| ToyFontSpec::sample(&mut rng))
        .collect();
    let n_test = ((n_fonts as f64 / 10.0).round() as usize).max(1);
    let fonts: Vec<Font> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| s.font(&format!("toy{seed}-{i:04}")))
        .collect();
    let (train, test) = fonts.split_at(n_fonts - n_test);
    Ok(ToyDataset {
        seed,
        train: train.to_vec(),
        test: test.to_vec(),
        specs,
    })
}

pub fn render(g: &Glyph, resolution: usize) -> Result<RasterImage> {
    Ok(rasterize(g, resolution, FillRule::NonZero)?)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    n_fonts: usize,
    resolution: usize,
    classes: Vec<String>,
    specs: Vec<ToyFontSpec>,
    splits: Vec<(String, usize)>,
}

impl ToyDataset {
    /// Writes `train.jsonl`, `test.jsonl`, `manifest.json` and
    /// `images/<split>/<style>_<class>.pgm` under `dir`.
    pub fn write(&self, dir: &Path, resolution: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (split, fonts) in [("train", &self.train), ("test", &self.test)] {
            let f = BufWriter::new(fs::File::create(dir.join(format!("{split}.jsonl")))?);
            write_fonts_jsonl(f, fonts)?;
            let img_dir = dir.join("images").join(split);
            fs::create_dir_all(&img_dir)?;
            for font in fonts.iter() {
                for g in &font.glyphs {
                    let img = render(g, resolution)?;
                    let path = img_dir.join(format!("{}_{}.pgm", font.style_id, g.char_class));
                    img.write_pgm(BufWriter::new(fs::File::create(path)?))?;
                }
            }
        }
        let manifest = Manifest {
            seed: self.seed,
            n_fonts: self.specs.len(),
            resolution,
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            specs: self.specs.clone(),
            splits: vec![
                ("train".into(), self.train.len()),
                ("test".into(), self.test.len()),
            ],
        };
        let mut f = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut f, &manifest)
            .map_err(|e| PipelineError::Format(e.to_string()))?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Reads a directory written by [`ToyDataset::write`]. Images are
    /// re-rendered from the glyphs when needed.
    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_reader(BufReader::new(fs::File::open(dir.join("manifest.json"))?))
                .map_err(|e| PipelineError::Format(format!("manifest.json: {e}")))?;
        let load = |split: &str| -> Result<Vec<Font>> {
            let f = BufReader::new(fs::File::open(dir.join(format!("{split}.jsonl")))?);
            let fonts = read_fonts_jsonl(f)?;
            for font in &fonts {
                font.validate(N_CLASSES)?;
            }
            Ok(fonts)
        };
        Ok(Self {
            seed: manifest.seed,
            train: load("train")?,
            test: load("test")?,
            specs: manifest.specs,
        })
    }
}
