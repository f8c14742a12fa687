//! Cubic Bézier geometry: evaluation, auxiliary-point alignment distance and
//! flattening.

use thiserror::Error;

use crate::glyph::{CommandType, DrawCommand, Point};

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("{0:?} has no curve geometry")]
    UnsupportedCommand(CommandType),
    #[error("curve parameter {0} outside [0, 1]")]
    Domain(f64),
    #[error("auxiliary parameters must be strictly increasing inside (0, 1): {0:?}")]
    AuxParams(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicBezier {
    pub points: [Point; 4],
}

/// Cubic Bernstein basis at `r`.
pub fn bernstein(r: f64) -> [f64; 4] {
    let s = 1.0 - r;
    [s * s * s, 3.0 * r * s * s, 3.0 * r * r * s, r * r * r]
}

impl CubicBezier {
    pub fn new(p1: Point, p2: Point, p3: Point, p4: Point) -> Self {
        Self {
            points: [p1, p2, p3, p4],
        }
    }

    /// A straight segment with its control points at the thirds.
    pub fn line(a: Point, b: Point) -> Self {
        Self::new(a, a.lerp(b, 1.0 / 3.0), a.lerp(b, 2.0 / 3.0), b)
    }

    /// Lifts a relaxed Line or Curve command to a cubic.
    pub fn from_command(c: &DrawCommand) -> Result<Self, GeomError> {
        match c.cmd {
            CommandType::CurveFromTo => Ok(Self { points: c.points }),
            CommandType::LineFromTo => Ok(Self::line(c.start(), c.end())),
            other => Err(GeomError::UnsupportedCommand(other)),
        }
    }

    pub fn eval(&self, r: f64) -> Result<Point, GeomError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(GeomError::Domain(r));
        }
        Ok(self.eval_unchecked(r))
    }

    fn eval_unchecked(&self, r: f64) -> Point {
        let b = bernstein(r);
        let mut out = Point::ORIGIN;
        for (w, p) in b.iter().zip(&self.points) {
            out.x += w * p.x;
            out.y += w * p.y;
        }
        out
    }

    /// de Casteljau split at `t`.
    pub fn split(&self, t: f64) -> (CubicBezier, CubicBezier) {
        let [p0, p1, p2, p3] = self.points;
        let p01 = p0.lerp(p1, t);
        let p12 = p1.lerp(p2, t);
        let p23 = p2.lerp(p3, t);
        let a = p01.lerp(p12, t);
        let b = p12.lerp(p23, t);
        let m = a.lerp(b, t);
        (Self::new(p0, p01, a, m), Self::new(m, b, p23, p3))
    }

    /// Largest distance of the inner control points from the chord.
    fn flatness(&self) -> f64 {
        let [a, b, c, d] = self.points;
        seg_distance(b, a, d).max(seg_distance(c, a, d))
    }

    /// Polyline approximation whose control polygon deviates from each
    /// chord by less than `tol`. Endpoints are reproduced exactly.
    pub fn flatten(&self, tol: f64) -> Vec<Point> {
        self.flatten_with_params(tol)
            .into_iter()
            .map(|(_, p)| p)
            .collect()
    }

    /// Like [`CubicBezier::flatten`], pairing each vertex with its curve
    /// parameter.
    pub fn flatten_with_params(&self, tol: f64) -> Vec<(f64, Point)> {
        let mut out = vec![(0.0, self.points[0])];
        self.flatten_into(tol, 0.0, 1.0, 0, &mut out);
        out
    }

    fn flatten_into(&self, tol: f64, t0: f64, t1: f64, depth: u32, out: &mut Vec<(f64, Point)>) {
        if depth >= 24 || self.flatness() < tol {
            out.push((t1, self.points[3]));
            return;
        }
        let (l, r) = self.split(0.5);
        let tm = 0.5 * (t0 + t1);
        l.flatten_into(tol, t0, tm, depth + 1, out);
        r.flatten_into(tol, tm, t1, depth + 1, out);
    }
}

fn seg_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Interior curve parameters at which predicted and target curves are
/// compared.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxParams {
    r_values: Vec<f64>,
}

impl AuxParams {
    pub fn new(r_values: Vec<f64>) -> Result<Self, GeomError> {
        let inside = r_values.iter().all(|r| *r > 0.0 && *r < 1.0);
        let increasing = r_values.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(GeomError::AuxParams(r_values));
        }
        Ok(Self { r_values })
    }

    /// `k` evenly spaced parameters `i / (k + 1)`, `i = 1..=k`.
    pub fn uniform(k: usize) -> Self {
        Self {
            r_values: (1..=k).map(|i| i as f64 / (k + 1) as f64).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.r_values
    }

    pub fn len(&self) -> usize {
        self.r_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_values.is_empty()
    }
}

impl Default for AuxParams {
    fn default() -> Self {
        Self::uniform(3)
    }
}

/// Sum over the auxiliary parameters of the squared Euclidean distance
/// between the two lifted cubics.
pub fn alignment_distance(
    pred: &DrawCommand,
    gt: &DrawCommand,
    aux: &AuxParams,
) -> Result<f64, GeomError> {
    let a = CubicBezier::from_command(pred)?;
    let b = CubicBezier::from_command(gt)?;
    Ok(aux
        .values()
        .iter()
        .map(|&r| a.eval_unchecked(r).distance_sq(b.eval_unchecked(r)))
        .sum())
}
