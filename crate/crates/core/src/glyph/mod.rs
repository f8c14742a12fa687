//! Glyph outlines as sequences of drawing commands.
//!
//! Every command stores four coordinate pairs. In the *relaxed* form a
//! command carries its own starting point in slot 1 and its ending point in
//! slot 4; curves use the two middle slots for control points. The *compact*
//! form is the usual SVG convention where the starting point is implied by
//! the previous command's end, so slot 1 is unused.
//!
//! All coordinates live on the unit canvas `[0, 1]²` with the origin at the
//! top left and `y` growing downward.

mod io;
mod svg;

pub use io::{read_fonts_jsonl, write_fonts_jsonl, GlyphRecord};
pub use svg::{parse_svg_path, serialize_svg};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlyphError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unsupported path command '{command}' at byte {offset}")]
    Unsupported { command: char, offset: usize },
    #[error("malformed glyph: {0}")]
    Structure(String),
    #[error("expected {expected:?} representation, found {found:?}")]
    Representation { expected: RepKind, found: RepKind },
    #[error("sequence of {len} commands exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GlyphError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_sq(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandType {
    MoveFromTo,
    LineFromTo,
    CurveFromTo,
    #[serde(rename = "EOS")]
    Eos,
}

impl CommandType {
    pub const ALL: [CommandType; 4] = [
        CommandType::MoveFromTo,
        CommandType::LineFromTo,
        CommandType::CurveFromTo,
        CommandType::Eos,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Line or curve: a command that draws.
    pub fn is_drawing(self) -> bool {
        matches!(self, CommandType::LineFromTo | CommandType::CurveFromTo)
    }

    /// Argument mask of this command in the given representation, in
    /// `x1 y1 x2 y2 x3 y3 x4 y4` order.
    pub fn mask(self, rep: RepKind) -> [bool; 8] {
        const T: bool = true;
        const F: bool = false;
        match (self, rep) {
            (CommandType::Eos, _) => [F; 8],
            (CommandType::CurveFromTo, RepKind::Relaxed) => [T; 8],
            (CommandType::CurveFromTo, RepKind::Compact) => [F, F, T, T, T, T, T, T],
            (_, RepKind::Relaxed) => [T, T, F, F, F, F, T, T],
            (_, RepKind::Compact) => [F, F, F, F, F, F, T, T],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepKind {
    Compact,
    Relaxed,
}

/// One drawing command. Unused coordinates are stored as zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrawCommand {
    pub cmd: CommandType,
    pub points: [Point; 4],
    pub mask: [bool; 8],
}

impl DrawCommand {
    /// Builds a command, zeroing every coordinate the mask does not use.
    pub fn new(cmd: CommandType, points: [Point; 4], rep: RepKind) -> Self {
        let mask = cmd.mask(rep);
        let mut points = points;
        for (i, p) in points.iter_mut().enumerate() {
            if !mask[2 * i] {
                p.x = 0.0;
            }
            if !mask[2 * i + 1] {
                p.y = 0.0;
            }
        }
        Self { cmd, points, mask }
    }

    pub fn eos() -> Self {
        Self::new(CommandType::Eos, [Point::ORIGIN; 4], RepKind::Relaxed)
    }

    pub fn compact_move(to: Point) -> Self {
        Self::new(
            CommandType::MoveFromTo,
            [Point::ORIGIN, Point::ORIGIN, Point::ORIGIN, to],
            RepKind::Compact,
        )
    }

    pub fn compact_line(to: Point) -> Self {
        Self::new(
            CommandType::LineFromTo,
            [Point::ORIGIN, Point::ORIGIN, Point::ORIGIN, to],
            RepKind::Compact,
        )
    }

    pub fn compact_curve(c1: Point, c2: Point, to: Point) -> Self {
        Self::new(
            CommandType::CurveFromTo,
            [Point::ORIGIN, c1, c2, to],
            RepKind::Compact,
        )
    }

    pub fn relaxed_move(from: Point, to: Point) -> Self {
        Self::new(
            CommandType::MoveFromTo,
            [from, Point::ORIGIN, Point::ORIGIN, to],
            RepKind::Relaxed,
        )
    }

    pub fn relaxed_line(from: Point, to: Point) -> Self {
        Self::new(
            CommandType::LineFromTo,
            [from, Point::ORIGIN, Point::ORIGIN, to],
            RepKind::Relaxed,
        )
    }

    pub fn relaxed_curve(p1: Point, p2: Point, p3: Point, p4: Point) -> Self {
        Self::new(CommandType::CurveFromTo, [p1, p2, p3, p4], RepKind::Relaxed)
    }

    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn end(&self) -> Point {
        self.points[3]
    }

    /// Coordinates in `x1 y1 .. x4 y4` order.
    pub fn coords(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    pub fn from_coords(cmd: CommandType, coords: &[f64; 8], rep: RepKind) -> Self {
        let pts = std::array::from_fn(|i| Point::new(coords[2 * i], coords[2 * i + 1]));
        Self::new(cmd, pts, rep)
    }

    fn used_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.points
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask[2 * i])
            .map(|(_, p)| *p)
    }
}

/// An ordered command sequence for one character.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub commands: Vec<DrawCommand>,
    pub char_class: usize,
    pub width: f64,
    pub height: f64,
    pub rep_kind: RepKind,
}

impl Glyph {
    /// Builds a glyph and derives its width and height from the used
    /// coordinates.
    pub fn new(commands: Vec<DrawCommand>, char_class: usize, rep_kind: RepKind) -> Self {
        let mut g = Self {
            commands,
            char_class,
            width: 0.0,
            height: 0.0,
            rep_kind,
        };
        g.update_extent();
        g
    }

    pub fn empty(char_class: usize, rep_kind: RepKind) -> Self {
        Self::new(Vec::new(), char_class, rep_kind)
    }

    pub fn update_extent(&mut self) {
        let (mut x0, mut y0, mut x1, mut y1) = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for p in self.commands.iter().flat_map(|c| c.used_points()) {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        if x0.is_finite() {
            self.width = x1 - x0;
            self.height = y1 - y0;
        } else {
            self.width = 0.0;
            self.height = 0.0;
        }
    }

    /// Number of non-EOS commands (`N_c`).
    pub fn len(&self) -> usize {
        self.commands
            .iter()
            .position(|c| c.cmd == CommandType::Eos)
            .unwrap_or(self.commands.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Commands before the EOS padding.
    pub fn active(&self) -> &[DrawCommand] {
        &self.commands[..self.len()]
    }

    /// Pads (or re-pads) with EOS commands to exactly `n_max` entries.
    pub fn padded(&self, n_max: usize) -> Result<Glyph> {
        let n = self.len();
        if n > n_max {
            return Err(GlyphError::Length { len: n, max: n_max });
        }
        let mut commands = self.commands[..n].to_vec();
        commands.resize(n_max, DrawCommand::eos());
        Ok(Glyph { commands, ..*self })
    }

    /// Drops the EOS padding.
    pub fn trimmed(&self) -> Glyph {
        Glyph {
            commands: self.active().to_vec(),
            ..*self
        }
    }

    /// Checks structural invariants: leading Move, EOS only as suffix,
    /// masks consistent with the representation, coordinates in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.commands[n..].iter().any(|c| c.cmd != CommandType::Eos) {
            return Err(GlyphError::Structure("EOS before end of sequence".into()));
        }
        if let Some(first) = self.commands.first() {
            if first.cmd != CommandType::MoveFromTo && first.cmd != CommandType::Eos {
                return Err(GlyphError::Structure(format!(
                    "first command is {:?}, expected MoveFromTo",
                    first.cmd
                )));
            }
        }
        for (j, c) in self.commands.iter().enumerate() {
            if c.mask != c.cmd.mask(self.rep_kind) {
                return Err(GlyphError::Structure(format!(
                    "command {j}: mask does not match {:?}",
                    c.cmd
                )));
            }
            for (v, used) in c.coords().iter().zip(c.mask) {
                if used && !(0.0..=1.0).contains(v) {
                    return Err(GlyphError::Structure(format!(
                        "command {j}: coordinate {v} outside [0, 1]"
                    )));
                }
                if !used && *v != 0.0 {
                    return Err(GlyphError::Structure(format!(
                        "command {j}: unused coordinate is {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn expect(&self, rep: RepKind) -> Result<()> {
        if self.rep_kind != rep {
            return Err(GlyphError::Representation {
                expected: rep,
                found: self.rep_kind,
            });
        }
        Ok(())
    }

    /// Gives every command an explicit starting point copied from the
    /// previous command's end. The first Move starts at its own target.
    pub fn to_relaxed(&self) -> Result<Glyph> {
        self.expect(RepKind::Compact)?;
        let active = self.active();
        if let Some(first) = active.first() {
            if first.cmd != CommandType::MoveFromTo {
                return Err(GlyphError::Structure(format!(
                    "first command is {:?}, expected MoveFromTo",
                    first.cmd
                )));
            }
        }
        let mut pen: Option<Point> = None;
        let mut out = Vec::with_capacity(self.commands.len());
        for c in active {
            let start = pen.unwrap_or(c.end());
            let mut pts = c.points;
            pts[0] = start;
            out.push(DrawCommand::new(c.cmd, pts, RepKind::Relaxed));
            pen = Some(c.end());
        }
        out.extend(self.commands[active.len()..].iter().copied());
        Ok(Glyph::new(out, self.char_class, RepKind::Relaxed))
    }

    /// Collapses each within-path junction to the mean of the previous
    /// command's end and the current command's start, then drops the
    /// explicit starting points. A junction exists wherever a Line or Curve
    /// follows any non-EOS command; Move starts are discarded untouched.
    pub fn merge_relaxed(&self) -> Result<Glyph> {
        self.expect(RepKind::Relaxed)?;
        let mut cmds: Vec<DrawCommand> = self.active().to_vec();
        for j in 1..cmds.len() {
            if cmds[j].cmd.is_drawing() {
                let shared = cmds[j - 1].end().midpoint(cmds[j].start());
                cmds[j - 1].points[3] = shared;
                cmds[j].points[0] = shared;
            }
        }
        let mut out: Vec<DrawCommand> = cmds
            .into_iter()
            .map(|c| DrawCommand::new(c.cmd, c.points, RepKind::Compact))
            .collect();
        out.extend(self.commands[self.len()..].iter().copied());
        Ok(Glyph::new(out, self.char_class, RepKind::Compact))
    }

    /// Euclidean gap at every within-path junction of a relaxed glyph.
    pub fn junction_gaps(&self) -> Result<Vec<f64>> {
        self.expect(RepKind::Relaxed)?;
        let a = self.active();
        Ok((1..a.len())
            .filter(|&j| a[j].cmd.is_drawing())
            .map(|j| a[j - 1].end().distance(a[j].start()))
            .collect())
    }

    /// Orders subpaths by their Move point, top-left first (lexicographic on
    /// `(y, x)`); command order inside a subpath is kept.
    pub fn sort_subpaths(&self) -> Result<Glyph> {
        self.expect(RepKind::Compact)?;
        let mut paths = split_subpaths(self.active());
        paths.sort_by(|a, b| {
            let (pa, pb) = (a[0].end(), b[0].end());
            pa.y.total_cmp(&pb.y).then(pa.x.total_cmp(&pb.x))
        });
        let cmds = paths.concat();
        Ok(Glyph::new(cmds, self.char_class, RepKind::Compact))
    }

    /// Compact subpaths, each starting with its Move.
    pub fn subpaths(&self) -> Vec<Vec<DrawCommand>> {
        split_subpaths(self.active())
    }
}

fn split_subpaths(cmds: &[DrawCommand]) -> Vec<Vec<DrawCommand>> {
    let mut paths: Vec<Vec<DrawCommand>> = Vec::new();
    for c in cmds {
        if c.cmd == CommandType::MoveFromTo || paths.is_empty() {
            paths.push(Vec::new());
        }
        paths.last_mut().expect("pushed above").push(*c);
    }
    paths
}

/// A set of glyphs sharing one style.
#[derive(Clone, Debug, PartialEq)]
pub struct Font {
    pub style_id: String,
    pub glyphs: Vec<Glyph>,
}

impl Font {
    pub fn validate(&self, n_char: usize) -> Result<()> {
        if self.glyphs.len() != n_char {
            return Err(GlyphError::Structure(format!(
                "font {} has {} glyphs, alphabet has {n_char}",
                self.style_id,
                self.glyphs.len()
            )));
        }
        self.glyphs.iter().try_for_each(Glyph::validate)
    }

    pub fn glyph(&self, char_class: usize) -> Option<&Glyph> {
        self.glyphs.iter().find(|g| g.char_class == char_class)
    }
}
