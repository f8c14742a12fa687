//! JSON-lines glyph storage: one glyph per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CommandType, DrawCommand, Font, Glyph, GlyphError, RepKind, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub cmd: CommandType,
    pub pts: [f64; 8],
    pub mask: [bool; 8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphRecord {
    pub style_id: String,
    pub char_class: usize,
    pub rep_kind: RepKind,
    pub commands: Vec<CommandRecord>,
    pub width: f64,
    pub height: f64,
}

impl GlyphRecord {
    pub fn from_glyph(style_id: &str, g: &Glyph) -> Self {
        Self {
            style_id: style_id.to_string(),
            char_class: g.char_class,
            rep_kind: g.rep_kind,
            commands: g
                .commands
                .iter()
                .map(|c| CommandRecord {
                    cmd: c.cmd,
                    pts: c.coords(),
                    mask: c.mask,
                })
                .collect(),
            width: g.width,
            height: g.height,
        }
    }

    pub fn to_glyph(&self) -> Result<Glyph> {
        let mut commands = Vec::with_capacity(self.commands.len());
        for (j, c) in self.commands.iter().enumerate() {
            let d = DrawCommand::from_coords(c.cmd, &c.pts, self.rep_kind);
            if d.mask != c.mask {
                return Err(GlyphError::Structure(format!(
                    "{} class {}: command {j} mask does not match {:?}",
                    self.style_id, self.char_class, c.cmd
                )));
            }
            commands.push(d);
        }
        Ok(Glyph {
            commands,
            char_class: self.char_class,
            width: self.width,
            height: self.height,
            rep_kind: self.rep_kind,
        })
    }
}

pub fn write_fonts_jsonl<W: Write>(mut w: W, fonts: &[Font]) -> Result<()> {
    for f in fonts {
        for g in &f.glyphs {
            serde_json::to_writer(&mut w, &GlyphRecord::from_glyph(&f.style_id, g))?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads glyph lines and groups them into fonts by `style_id`, in order of
/// first appearance.
pub fn read_fonts_jsonl<R: BufRead>(r: R) -> Result<Vec<Font>> {
    let mut fonts: Vec<Font> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GlyphRecord = serde_json::from_str(&line)?;
        let g = rec.to_glyph()?;
        match fonts.iter_mut().find(|f| f.style_id == rec.style_id) {
            Some(f) => f.glyphs.push(g),
            None => fonts.push(Font {
                style_id: rec.style_id,
                glyphs: vec![g],
            }),
        }
    }
    Ok(fonts)
}

#[cfg(test)]
mod tests {
    use super::super::{parse_svg_path, Point};
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let g = parse_svg_path("M 0 0 L 4 0 C 4 2 2 4 0 4 Z", 4.0)
            .unwrap()
            .padded(6)
            .unwrap();
        let fonts = vec![
            Font {
                style_id: "a".into(),
                glyphs: vec![g.clone(), g.to_relaxed().unwrap()],
            },
            Font {
                style_id: "b".into(),
                glyphs: vec![g.clone()],
            },
        ];
        let mut buf = Vec::new();
        write_fonts_jsonl(&mut buf, &fonts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"cmd\":\"EOS\""));
        assert_eq!(read_fonts_jsonl(&buf[..]).unwrap(), fonts);
        assert_eq!(g.commands[2].end(), Point::new(0.0, 1.0));
    }

    #[test]
    fn rejects_inconsistent_mask() {
        let line = r#"{"style_id":"x","char_class":0,"rep_kind":"Relaxed","commands":[{"cmd":"LineFromTo","pts":[0,0,0,0,0,0,1,1],"mask":[true,true,true,true,true,true,true,true]}],"width":1,"height":1}"#;
        assert!(matches!(
            read_fonts_jsonl(line.as_bytes()),
            Err(GlyphError::Structure(_))
        ));
    }
}
