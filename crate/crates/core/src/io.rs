//! Text file formats.
//!
//! * Binary masks: ASCII PGM (`P2`), maxval 255, foreground 255, background 0.
//! * Probability maps and other scalar fields: `PM <height> <width>` header
//!   followed by `height` lines of `width` space-separated floats.
//!
//! Writers go through a temporary file in the destination directory and an
//! atomic rename.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{BinaryMask, Field, ProbMap};

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Whitespace tokens with 1-based line numbers, `#` comments stripped.
fn tokens(text: &str) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .flat_map(|(i, line)| {
            let line = line.split('#').next().unwrap_or("");
            line.split_whitespace().map(move |t| (i + 1, t))
        })
        .collect()
}

pub fn mask_to_pgm(mask: &BinaryMask) -> String {
    let mut out = format!("P2\n{} {}\n255\n", mask.width(), mask.height());
    for r in 0..mask.height() {
        let row: Vec<&str> = (0..mask.width())
            .map(|c| if mask.get(r, c) { "255" } else { "0" })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_pgm(text: &str, file: &str) -> Result<BinaryMask> {
    let toks = tokens(text);
    let last_line = toks.last().map_or(1, |t| t.0);
    match toks.first() {
        Some((_, "P2")) => {}
        Some((line, t)) => return Err(parse_err(file, *line, format!("bad magic {t:?}, expected P2"))),
        None => return Err(parse_err(file, 1, "empty file")),
    }
    let mut it2 = toks.iter().skip(1);
    let mut take = |what: &str| -> Result<(usize, usize)> {
        let (line, tok) = it2
            .next()
            .ok_or_else(|| parse_err(file, last_line, format!("unexpected end of file, expected {what}")))?;
        tok.parse::<usize>()
            .map(|v| (*line, v))
            .map_err(|_| parse_err(file, *line, format!("expected {what}, got {tok:?}")))
    };
    let (_, width) = take("width")?;
    let (_, height) = take("height")?;
    let (line, maxval) = take("maxval")?;
    if maxval != 255 {
        return Err(parse_err(file, line, format!("maxval must be 255, got {maxval}")));
    }
    let mut values = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let (line, v) = take("pixel")?;
        match v {
            0 => values.push(0),
            255 => values.push(1),
            _ => return Err(parse_err(file, line, format!("pixel value {v} is neither 0 nor 255"))),
        }
    }
    if let Some((line, t)) = it2.next() {
        return Err(parse_err(file, *line, format!("trailing data {t:?}")));
    }
    BinaryMask::new(height, width, values).map_err(|e| parse_err(file, 2, e.to_string()))
}

pub fn field_to_pm(field: &Field) -> String {
    let mut out = format!("PM {} {}\n", field.height(), field.width());
    for r in 0..field.height() {
        for c in 0..field.width() {
            if c > 0 {
                out.push(' ');
            }
            // shortest round-trip representation
            let _ = write!(out, "{:?}", field.get(r, c));
        }
        out.push('\n');
    }
    out
}

pub fn parse_pm_field(text: &str, file: &str) -> Result<Field> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(file, 1, "empty file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "PM" {
        return Err(parse_err(file, hline, "header must be `PM <height> <width>`"));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(file, hline, format!("bad dimension {s:?}")))
    };
    let (height, width) = (dim(parts[1])?, dim(parts[2])?);
    let mut values = Vec::with_capacity(height * width);
    for r in 0..height {
        let (line, row) = lines
            .next()
            .ok_or_else(|| parse_err(file, hline + r + 1, format!("missing row {r}")))?;
        let before = values.len();
        for tok in row.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(file, line, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(file, line, format!("non-finite value {tok:?}")));
            }
            values.push(v);
        }
        if values.len() - before != width {
            return Err(parse_err(
                file,
                line,
                format!("row has {} values, expected {width}", values.len() - before),
            ));
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(parse_err(file, line, "trailing rows after declared height"));
    }
    Field::new(height, width, values).map_err(|e| parse_err(file, hline, e.to_string()))
}

pub fn parse_pm(text: &str, file: &str) -> Result<ProbMap> {
    let field = parse_pm_field(text, file)?;
    ProbMap::from_field(field).map_err(|e| parse_err(file, 1, e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    parse_pgm(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn read_pm(path: &Path) -> Result<ProbMap> {
    parse_pm(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn read_pm_field(path: &Path) -> Result<Field> {
    parse_pm_field(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Write `contents` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, mask_to_pgm(mask).as_bytes())
}

pub fn write_pm(path: &Path, field: &Field) -> Result<()> {
    write_atomic(path, field_to_pm(field).as_bytes())
}
