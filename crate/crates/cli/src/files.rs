//! Reading and writing glyphs and images by file extension.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use vecfont_core::glyph::{parse_svg_path, read_fonts_jsonl, serialize_svg, write_fonts_jsonl};
use vecfont_core::raster::{rasterize, FillRule, RasterImage};
use vecfont_core::{Font, Glyph, GlyphError, RepKind};

use crate::exit::usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Svg,
    Jsonl,
    Pgm,
    Png,
}

pub fn kind(path: &Path) -> Result<Kind> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("svg") => Ok(Kind::Svg),
        Some("jsonl") | Some("json") => Ok(Kind::Jsonl),
        Some("pgm") => Ok(Kind::Pgm),
        Some("png") => Ok(Kind::Png),
        _ => Err(usage(format!(
            "{}: expected a .svg, .jsonl, .pgm or .png path",
            path.display()
        ))),
    }
}

/// Path data and canvas size of an SVG file. A bare path string uses
/// `canvas`; a document takes its size from the `viewBox` and joins the `d`
/// attributes of every `<path>`.
fn svg_path_data(text: &str, canvas: f64) -> Result<(String, f64), GlyphError> {
    if !text.contains('<') {
        return Ok((text.trim().to_string(), canvas));
    }
    let attr = |src: &str, name: &str| -> Vec<String> {
        let mut out = Vec::new();
        let pat = format!("{name}=");
        let mut rest = src;
        while let Some(i) = rest.find(&pat) {
            let tail = &rest[i + pat.len()..];
            let Some(q) = tail.chars().next().filter(|c| *c == '"' || *c == '\'') else {
                rest = tail;
                continue;
            };
            match tail[1..].find(q) {
                Some(end) => {
                    out.push(tail[1..1 + end].to_string());
                    rest = &tail[1 + end..];
                }
                None => break,
            }
        }
        out
    };
    let size = match attr(text, "viewBox").first() {
        Some(vb) => {
            let nums: Vec<f64> = vb
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| GlyphError::Parse {
                    offset: 0,
                    msg: format!("bad viewBox '{vb}'"),
                })?;
            match nums[..] {
                [0.0, 0.0, w, h] if w == h => w,
                _ => {
                    return Err(GlyphError::Parse {
                        offset: 0,
                        msg: format!("viewBox '{vb}' must be square and start at the origin"),
                    })
                }
            }
        }
        None => canvas,
    };
    let paths: Vec<String> = text
        .split("<path")
        .skip(1)
        .flat_map(|el| attr(el.split('>').next().unwrap_or(""), " d"))
        .collect();
    if paths.is_empty() {
        return Err(GlyphError::Parse {
            offset: 0,
            msg: "no <path d=...> element".into(),
        });
    }
    Ok((paths.join(" "), size))
}

pub fn read_svg(path: &Path, canvas: f64, char_class: usize) -> Result<Glyph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (d, size) = svg_path_data(&text, canvas).with_context(|| path.display().to_string())?;
    let mut g = parse_svg_path(&d, size).with_context(|| path.display().to_string())?;
    g.char_class = char_class;
    Ok(g)
}

pub fn write_svg(path: &Path, g: &Glyph, canvas: f64) -> Result<()> {
    let g = compact(g)?;
    let d = serialize_svg(&g, canvas)?;
    let doc = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {canvas} {canvas}\">\n  \
         <path fill-rule=\"nonzero\" d=\"{d}\"/>\n</svg>\n"
    );
    fs::write(path, doc).with_context(|| format!("writing {}", path.display()))
}

pub fn read_fonts(path: &Path) -> Result<Vec<Font>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let fonts = read_fonts_jsonl(BufReader::new(f)).with_context(|| path.display().to_string())?;
    for font in &fonts {
        for g in &font.glyphs {
            g.validate()
                .with_context(|| format!("{} class {}", font.style_id, g.char_class))?;
        }
    }
    Ok(fonts)
}

pub fn write_fonts(path: &Path, fonts: &[Font]) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_fonts_jsonl(&mut w, fonts)?;
    w.flush()?;
    Ok(())
}

/// The font named `style`, or the only font in the file.
pub fn pick_font(path: &Path, style: Option<&str>) -> Result<Font> {
    let mut fonts = read_fonts(path)?;
    match style {
        Some(s) => fonts
            .into_iter()
            .find(|f| f.style_id == s)
            .ok_or_else(|| usage(format!("{}: no font '{s}'", path.display()))),
        None if fonts.len() == 1 => Ok(fonts.remove(0)),
        None => Err(usage(format!(
            "{} holds {} fonts; pick one with --style",
            path.display(),
            fonts.len()
        ))),
    }
}

/// A single glyph from an SVG file, or glyph `index` of a JSON-lines file.
pub fn read_glyph(path: &Path, index: usize, canvas: f64) -> Result<Glyph> {
    match kind(path)? {
        Kind::Svg => read_svg(path, canvas, 0),
        Kind::Jsonl => {
            let all: Vec<Glyph> = read_fonts(path)?
                .into_iter()
                .flat_map(|f| f.glyphs)
                .collect();
            let n = all.len();
            all.into_iter()
                .nth(index)
                .ok_or_else(|| usage(format!("{}: glyph {index} of {n}", path.display())))
        }
        _ => Err(usage(format!("{} is not a glyph file", path.display()))),
    }
}

pub fn compact(g: &Glyph) -> Result<Glyph> {
    Ok(match g.rep_kind {
        RepKind::Compact => g.clone(),
        RepKind::Relaxed => g.merge_relaxed()?,
    })
}

pub fn read_pgm(path: &Path) -> Result<RasterImage> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    RasterImage::read_pgm(BufReader::new(f)).with_context(|| path.display().to_string())
}

pub fn write_image(path: &Path, img: &RasterImage) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    match kind(path)? {
        Kind::Pgm => img.write_pgm(&mut w)?,
        Kind::Png => img.write_png(&mut w)?,
        _ => return Err(usage(format!("{} is not an image path", path.display()))),
    }
    w.flush()?;
    Ok(())
}

/// An image file as is, or a glyph file rasterized at `resolution`.
pub fn read_raster(
    path: &Path,
    resolution: usize,
    index: usize,
    canvas: f64,
    rule: FillRule,
) -> Result<RasterImage> {
    match kind(path)? {
        Kind::Pgm => read_pgm(path),
        Kind::Png => Err(usage(format!(
            "{}: PNG input is not supported, use PGM",
            path.display()
        ))),
        _ => {
            let g = compact(&read_glyph(path, index, canvas)?)?;
            Ok(rasterize(&g, resolution, rule)?)
        }
    }
}
