//! Scanline rasterization of compact glyphs and image metrics.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::bezier::CubicBezier;
use crate::glyph::{CommandType, Glyph, Point, RepKind};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("resolution mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("image format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FillRule {
    #[default]
    NonZero,
    EvenOdd,
}

impl FillRule {
    pub fn inside(self, winding: i32) -> bool {
        match self {
            FillRule::NonZero => winding != 0,
            FillRule::EvenOdd => winding % 2 != 0,
        }
    }
}

/// Square grayscale image, row-major, origin at the top left.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    resolution: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(resolution: usize, pixels: Vec<f64>) -> Result<Self> {
        if resolution == 0 || pixels.len() != resolution * resolution {
            return Err(RasterError::Domain(format!(
                "{} pixels for resolution {resolution}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RasterError::Domain(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { resolution, pixels })
    }

    pub fn filled(resolution: usize, value: f64) -> Result<Self> {
        Self::new(resolution, vec![value; resolution * resolution])
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.resolution + col]
    }

    /// Fraction of pixels at or above `threshold`.
    pub fn fill_ratio(&self, threshold: f64) -> f64 {
        self.pixels.iter().filter(|&&v| v >= threshold).count() as f64 / self.pixels.len() as f64
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.resolution, self.resolution)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Self> {
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(RasterError::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" || fields.len() != 4 {
            return Err(RasterError::Format(format!(
                "unsupported PGM header {fields:?}"
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| RasterError::Format(format!("bad header field {s}")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if w != h {
            return Err(RasterError::Format(format!("non-square image {w}x{h}")));
        }
        if maxval == 0 || maxval > 255 {
            return Err(RasterError::Format(format!("unsupported maxval {maxval}")));
        }
        let mut buf = vec![0u8; w * h];
        r.read_exact(&mut buf)?;
        Self::new(w, buf.iter().map(|&b| b as f64 / maxval as f64).collect())
    }

    pub fn write_png<W: Write>(&self, mut w: W) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.resolution as u32, self.resolution as u32, bytes)
            .ok_or_else(|| RasterError::Format("pixel buffer size".into()))?;
        let mut cursor = std::io::Cursor::new(Vec::new());
        img.write_to(&mut cursor, image::ImageOutputFormat::Png)
            .map_err(|e| RasterError::Format(e.to_string()))?;
        w.write_all(cursor.get_ref())?;
        Ok(())
    }
}

/// Closed polylines (in canvas units) for every subpath of a compact glyph.
pub fn outline_polygons(g: &Glyph, tol: f64) -> Vec<Vec<Point>> {
    let mut polys = Vec::new();
    for path in g.subpaths() {
        let mut poly: Vec<Point> = Vec::new();
        let mut pen = Point::ORIGIN;
        for c in &path {
            match c.cmd {
                CommandType::MoveFromTo => {
                    pen = c.end();
                    poly.push(pen);
                }
                CommandType::LineFromTo => {
                    if poly.is_empty() {
                        poly.push(pen);
                    }
                    pen = c.end();
                    poly.push(pen);
                }
                CommandType::CurveFromTo => {
                    if poly.is_empty() {
                        poly.push(pen);
                    }
                    let b = CubicBezier::new(pen, c.points[1], c.points[2], c.end());
                    poly.extend(b.flatten(tol).into_iter().skip(1));
                    pen = c.end();
                }
                CommandType::Eos => {}
            }
        }
        if poly.len() >= 3 {
            polys.push(poly);
        }
    }
    polys
}

/// Signed crossings of the horizontal line `y` with closed polygons, as
/// `(x, direction)` sorted by `x`. Edges are half-open in `y`.
fn crossings(polys: &[Vec<Point>], y: f64, out: &mut Vec<(f64, i32)>) {
    out.clear();
    for poly in polys {
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            let dir = if a.y <= y && y < b.y {
                1
            } else if b.y <= y && y < a.y {
                -1
            } else {
                continue;
            };
            let t = (y - a.y) / (b.y - a.y);
            out.push((a.x + t * (b.x - a.x), dir));
        }
    }
    out.sort_by(|p, q| p.0.total_cmp(&q.0));
}

fn scan_fill(polys: &[Vec<Point>], res: usize, samples: usize, rule: FillRule) -> Vec<f64> {
    let mut pixels = vec![0.0; res * res];
    let mut xs = Vec::new();
    let sub = (res * samples) as f64;
    let weight = 1.0 / (samples * samples) as f64;
    for srow in 0..res * samples {
        let y = (srow as f64 + 0.5) / sub;
        crossings(polys, y, &mut xs);
        if xs.is_empty() {
            continue;
        }
        let row = srow / samples;
        let mut winding = 0;
        let mut k = 0;
        for scol in 0..res * samples {
            let x = (scol as f64 + 0.5) / sub;
            while k < xs.len() && xs[k].0 <= x {
                winding += xs[k].1;
                k += 1;
            }
            if rule.inside(winding) {
                pixels[row * res + scol / samples] += weight;
            }
        }
    }
    pixels.iter_mut().for_each(|v| *v = v.min(1.0));
    pixels
}

fn check_input(g: &Glyph, resolution: usize) -> Result<()> {
    if resolution == 0 {
        return Err(RasterError::Domain("resolution must be positive".into()));
    }
    if g.rep_kind != RepKind::Compact {
        return Err(RasterError::Domain(
            "rasterize expects a compact glyph".into(),
        ));
    }
    Ok(())
}

/// Binary coverage sampled at pixel centers. Curves are flattened to a
/// quarter of a pixel.
pub fn rasterize(g: &Glyph, resolution: usize, fill_rule: FillRule) -> Result<RasterImage> {
    check_input(g, resolution)?;
    let polys = outline_polygons(g, 0.25 / resolution as f64);
    Ok(RasterImage {
        resolution,
        pixels: scan_fill(&polys, resolution, 1, fill_rule),
    })
}

/// Grayscale coverage from a 4×4 supersampling grid. Export only.
pub fn rasterize_supersampled(
    g: &Glyph,
    resolution: usize,
    fill_rule: FillRule,
) -> Result<RasterImage> {
    check_input(g, resolution)?;
    let polys = outline_polygons(g, 0.25 / (4 * resolution) as f64);
    Ok(RasterImage {
        resolution,
        pixels: scan_fill(&polys, resolution, 4, fill_rule),
    })
}

fn same_size(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.resolution != b.resolution {
        return Err(RasterError::Shape(a.resolution, b.resolution));
    }
    Ok(())
}

/// Mean absolute per-pixel difference.
pub fn l1_error(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    same_size(a, b)?;
    let s: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.pixels.len() as f64)
}

/// Intersection over union of the foregrounds `{v >= threshold}`; 1 when
/// both are empty.
pub fn iou(a: &RasterImage, b: &RasterImage, threshold: f64) -> Result<f64> {
    same_size(a, b)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RasterError::Domain(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let (fa, fb) = (*x >= threshold, *y >= threshold);
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::parse_svg_path;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> String {
        format!("M {x0} {y0} L {x1} {y0} L {x1} {y1} L {x0} {y1} Z")
    }

    #[test]
    fn unit_square_fills_everything() {
        let g = parse_svg_path(&rect(0.0, 0.0, 64.0, 64.0), 64.0).unwrap();
        let img = rasterize(&g, 64, FillRule::NonZero).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_glyph_is_blank() {
        let g = parse_svg_path("", 64.0).unwrap();
        let img = rasterize(&g, 64, FillRule::NonZero).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
        assert!(rasterize(&g, 0, FillRule::NonZero).is_err());
    }

    #[test]
    fn left_half() {
        let g = parse_svg_path(&rect(0.0, 0.0, 32.0, 64.0), 64.0).unwrap();
        let img = rasterize(&g, 64, FillRule::NonZero).unwrap();
        assert!((img.fill_ratio(0.5) - 0.5).abs() <= 1.0 / 64.0);
    }

    #[test]
    fn hole_with_both_rules() {
        // Outer clockwise, inner counter-clockwise: a hole under both rules.
        let text = format!(
            "{} M 16 16 L 16 48 L 48 48 L 48 16 Z",
            rect(0.0, 0.0, 64.0, 64.0)
        );
        let g = parse_svg_path(&text, 64.0).unwrap();
        for rule in [FillRule::NonZero, FillRule::EvenOdd] {
            let img = rasterize(&g, 64, rule).unwrap();
            assert_eq!(img.get(32, 32), 0.0);
            assert_eq!(img.get(4, 4), 1.0);
        }
        // Same orientation: nonzero fills the hole, even-odd does not.
        let text = format!(
            "{} {}",
            rect(0.0, 0.0, 64.0, 64.0),
            rect(16.0, 16.0, 48.0, 48.0)
        );
        let g = parse_svg_path(&text, 64.0).unwrap();
        assert_eq!(
            rasterize(&g, 64, FillRule::NonZero).unwrap().get(32, 32),
            1.0
        );
        assert_eq!(
            rasterize(&g, 64, FillRule::EvenOdd).unwrap().get(32, 32),
            0.0
        );
    }

    #[test]
    fn metrics() {
        let ones = RasterImage::filled(8, 1.0).unwrap();
        let zeros = RasterImage::filled(8, 0.0).unwrap();
        assert_eq!(l1_error(&ones, &ones).unwrap(), 0.0);
        assert_eq!(l1_error(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(iou(&ones, &ones, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&zeros, &zeros, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&ones, &zeros, 0.5).unwrap(), 0.0);
        let small = RasterImage::filled(4, 1.0).unwrap();
        assert!(matches!(
            l1_error(&ones, &small),
            Err(RasterError::Shape(8, 4))
        ));
        assert!(iou(&ones, &small, 0.5).is_err());
    }

    #[test]
    fn half_overlapping_rectangles_iou_is_one_third() {
        let a = parse_svg_path(&rect(0.0, 0.0, 32.0, 16.0), 64.0).unwrap();
        let b = parse_svg_path(&rect(16.0, 0.0, 48.0, 16.0), 64.0).unwrap();
        let ia = rasterize(&a, 64, FillRule::NonZero).unwrap();
        let ib = rasterize(&b, 64, FillRule::NonZero).unwrap();
        assert!((iou(&ia, &ib, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<f64> = (0..16).map(|i| (i * 17) as f64 / 255.0).collect();
        let img = RasterImage::new(4, px).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n4 4\n255\n"));
        let back = RasterImage::read_pgm(&buf[..]).unwrap();
        assert!(back
            .pixels()
            .iter()
            .zip(img.pixels())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let mut png = Vec::new();
        img.write_png(&mut png).unwrap();
        assert!(png.starts_with(&[0x89, b'P', b'N', b'G']));
    }

    #[test]
    fn supersampled_edges_are_gray() {
        let g = parse_svg_path(&rect(0.0, 0.0, 10.5, 10.5), 64.0).unwrap();
        let img = rasterize_supersampled(&g, 64, FillRule::NonZero).unwrap();
        assert_eq!(img.get(0, 0), 1.0);
        let edge = img.get(0, 10);
        assert!(edge > 0.0 && edge < 1.0, "{edge}");
    }
}
