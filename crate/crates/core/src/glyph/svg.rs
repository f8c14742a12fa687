//! Absolute `M`/`L`/`C`/`Z` path data.

use std::fmt::Write;

use super::{DrawCommand, Glyph, GlyphError, Point, RepKind, Result};

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

enum Token {
    Command(u8),
    Number(f64),
}

impl<'a> Lexer<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_whitespace() || self.src[self.pos] == b',')
        {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<Option<(usize, Token)>> {
        self.skip_separators();
        let start = self.pos;
        let Some(&b) = self.src.get(start) else {
            return Ok(None);
        };
        if b.is_ascii_alphabetic() && b != b'e' && b != b'E' {
            self.pos += 1;
            return Ok(Some((start, Token::Command(b))));
        }
        let mut end = start;
        if matches!(self.src.get(end), Some(b'+' | b'-')) {
            end += 1;
        }
        let mut digits = 0;
        while let Some(c) = self.src.get(end) {
            match c {
                b'0'..=b'9' => digits += 1,
                b'.' => {}
                _ => break,
            }
            end += 1;
        }
        if digits > 0 && matches!(self.src.get(end), Some(b'e' | b'E')) {
            let mut e = end + 1;
            if matches!(self.src.get(e), Some(b'+' | b'-')) {
                e += 1;
            }
            if self.src.get(e).is_some_and(u8::is_ascii_digit) {
                while self.src.get(e).is_some_and(u8::is_ascii_digit) {
                    e += 1;
                }
                end = e;
            }
        }
        let text = std::str::from_utf8(&self.src[start..end]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if digits > 0 => {
                self.pos = end;
                Ok(Some((start, Token::Number(v))))
            }
            _ => Err(GlyphError::Parse {
                offset: start,
                msg: format!("unexpected character '{}'", b as char),
            }),
        }
    }
}

/// Parses absolute `M`/`L`/`C`/`Z` path data into a compact glyph on the
/// unit canvas.
///
/// `Z` emits an explicit closing line when the pen is away from the subpath
/// start. Subpaths are reordered top-left first.
pub fn parse_svg_path(path_text: &str, canvas_size: f64) -> Result<Glyph> {
    if !(canvas_size > 0.0) {
        return Err(GlyphError::Parse {
            offset: 0,
            msg: format!("canvas size must be positive, got {canvas_size}"),
        });
    }
    let mut lex = Lexer {
        src: path_text.as_bytes(),
        pos: 0,
    };
    let mut cmds: Vec<DrawCommand> = Vec::new();
    let mut current: Option<(usize, u8)> = None;
    let mut pen: Option<Point> = None;
    let mut subpath_start = Point::ORIGIN;
    let mut pending: Vec<(usize, f64)> = Vec::new();

    let point = |(off, v): (usize, f64), (_, w): (usize, f64)| -> Result<Point> {
        for (o, c) in [(off, v), (off, w)] {
            if !(0.0..=canvas_size).contains(&c) {
                return Err(GlyphError::Parse {
                    offset: o,
                    msg: format!("coordinate {c} outside [0, {canvas_size}]"),
                });
            }
        }
        Ok(Point::new(v / canvas_size, w / canvas_size))
    };

    loop {
        let tok = lex.next()?;
        let (off, cmd) = match tok {
            Some((off, Token::Number(v))) => {
                let Some((_, c)) = current else {
                    return Err(GlyphError::Parse {
                        offset: off,
                        msg: "number before any command".into(),
                    });
                };
                if c == b'Z' {
                    return Err(GlyphError::Parse {
                        offset: off,
                        msg: "Z takes no arguments".into(),
                    });
                }
                pending.push((off, v));
                let arity = if c == b'C' { 6 } else { 2 };
                if pending.len() == arity {
                    match c {
                        b'M' => {
                            let p = point(pending[0], pending[1])?;
                            cmds.push(DrawCommand::compact_move(p));
                            subpath_start = p;
                            pen = Some(p);
                            // Extra pairs after a moveto are implicit linetos.
                            current = Some((off, b'L'));
                        }
                        b'L' => {
                            let p = point(pending[0], pending[1])?;
                            cmds.push(DrawCommand::compact_line(p));
                            pen = Some(p);
                        }
                        _ => {
                            let c1 = point(pending[0], pending[1])?;
                            let c2 = point(pending[2], pending[3])?;
                            let p = point(pending[4], pending[5])?;
                            cmds.push(DrawCommand::compact_curve(c1, c2, p));
                            pen = Some(p);
                        }
                    }
                    pending.clear();
                }
                continue;
            }
            Some((off, Token::Command(c))) => {
                if !b"MLCZzmlchvsqtaHVSQTA".contains(&c) {
                    return Err(GlyphError::Parse {
                        offset: off,
                        msg: format!("unknown command '{}'", c as char),
                    });
                }
                (off, Some(c))
            }
            None => (path_text.len(), None),
        };
        if let Some((coff, c)) = current {
            if !pending.is_empty() {
                return Err(GlyphError::Parse {
                    offset: pending[0].0,
                    msg: format!(
                        "incomplete arguments for '{}' (command at byte {coff})",
                        c as char
                    ),
                });
            }
        }
        let Some(c) = cmd else { break };
        match c {
            b'M' => current = Some((off, b'M')),
            b'L' | b'C' => {
                if pen.is_none() {
                    return Err(GlyphError::Parse {
                        offset: off,
                        msg: format!("'{}' before any moveto", c as char),
                    });
                }
                current = Some((off, c));
            }
            b'Z' | b'z' => {
                let Some(at) = pen else {
                    return Err(GlyphError::Parse {
                        offset: off,
                        msg: "'Z' before any moveto".into(),
                    });
                };
                if at != subpath_start {
                    cmds.push(DrawCommand::compact_line(subpath_start));
                }
                pen = Some(subpath_start);
                current = Some((off, b'Z'));
            }
            other if b"mlchvsqtaHVSQTA".contains(&other) => {
                return Err(GlyphError::Unsupported {
                    command: other as char,
                    offset: off,
                });
            }
            other => {
                return Err(GlyphError::Parse {
                    offset: off,
                    msg: format!("unknown command '{}'", other as char),
                });
            }
        }
    }
    Glyph::new(cmds, 0, RepKind::Compact).sort_subpaths()
}

/// Writes a compact glyph as absolute path data scaled to `canvas_size`,
/// six decimals per coordinate. EOS padding is skipped.
pub fn serialize_svg(g: &Glyph, canvas_size: f64) -> Result<String> {
    if g.rep_kind != RepKind::Compact {
        return Err(GlyphError::Representation {
            expected: RepKind::Compact,
            found: g.rep_kind,
        });
    }
    let mut out = String::new();
    let push = |out: &mut String, p: Point| {
        let _ = write!(out, " {:.6} {:.6}", p.x * canvas_size, p.y * canvas_size);
    };
    for c in g.active() {
        if !out.is_empty() {
            out.push(' ');
        }
        match c.cmd {
            super::CommandType::MoveFromTo => {
                out.push('M');
                push(&mut out, c.end());
            }
            super::CommandType::LineFromTo => {
                out.push('L');
                push(&mut out, c.end());
            }
            super::CommandType::CurveFromTo => {
                out.push('C');
                push(&mut out, c.points[1]);
                push(&mut out, c.points[2]);
                push(&mut out, c.end());
            }
            super::CommandType::Eos => unreachable!("active() excludes EOS"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::CommandType;
    use super::*;

    #[test]
    fn unit_square_closes_with_line() {
        let g = parse_svg_path("M 0 0 L 64 0 L 64 64 L 0 64 Z", 64.0).unwrap();
        let kinds: Vec<_> = g.commands.iter().map(|c| c.cmd).collect();
        assert_eq!(
            kinds,
            [
                CommandType::MoveFromTo,
                CommandType::LineFromTo,
                CommandType::LineFromTo,
                CommandType::LineFromTo,
                CommandType::LineFromTo
            ]
        );
        assert_eq!(g.commands[4].end(), Point::new(0.0, 0.0));
        for c in &g.commands {
            for v in c.coords() {
                assert!(v == 0.0 || v == 1.0);
            }
        }
        assert_eq!(
            serialize_svg(&g, 64.0).unwrap(),
            "M 0.000000 0.000000 L 64.000000 0.000000 L 64.000000 64.000000 L 0.000000 64.000000 L 0.000000 0.000000"
        );
    }

    #[test]
    fn empty_path() {
        let g = parse_svg_path("", 64.0).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.padded(4).unwrap().commands, vec![DrawCommand::eos(); 4]);
    }

    #[test]
    fn z_when_already_closed_emits_nothing() {
        let g = parse_svg_path("M0,0 L10,0 L0,0 Z", 10.0).unwrap();
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn subpaths_sorted_top_left_first() {
        let g =
            parse_svg_path("M 50 50 L 60 50 L 60 60 Z M 10 10 L 20 10 L 20 20 Z", 100.0).unwrap();
        assert_eq!(g.commands[0].end(), Point::new(0.1, 0.1));
        assert_eq!(g.commands[4].end(), Point::new(0.5, 0.5));
    }

    #[test]
    fn implicit_lineto_after_moveto_and_exponents() {
        let g = parse_svg_path("M1e1,0 20 0 C 20 5, 15 10, 1.0E1 10", 20.0).unwrap();
        assert_eq!(g.commands[1].cmd, CommandType::LineFromTo);
        assert_eq!(g.commands[2].cmd, CommandType::CurveFromTo);
        assert_eq!(g.commands[2].end(), Point::new(0.5, 0.5));
    }

    #[test]
    fn errors() {
        match parse_svg_path("M 0 0 L 1 x", 4.0) {
            Err(GlyphError::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        match parse_svg_path("M 0 0 Q 1 1 2 2", 4.0) {
            Err(GlyphError::Unsupported {
                command: 'Q',
                offset: 6,
            }) => {}
            other => panic!("{other:?}"),
        }
        match parse_svg_path("M 0 0 l 1 1", 4.0) {
            Err(GlyphError::Unsupported { command: 'l', .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_svg_path("M 0 0 L 1", 4.0),
            Err(GlyphError::Parse { .. })
        ));
        assert!(matches!(
            parse_svg_path("M 0 0 L 9 1", 4.0),
            Err(GlyphError::Parse { .. })
        ));
    }

    #[test]
    fn serialize_rejects_relaxed() {
        let g = parse_svg_path("M 0 0 L 1 1", 1.0)
            .unwrap()
            .to_relaxed()
            .unwrap();
        assert!(matches!(
            serialize_svg(&g, 1.0),
            Err(GlyphError::Representation { .. })
        ));
    }
}
