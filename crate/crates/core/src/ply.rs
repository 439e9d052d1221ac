//! ASCII PLY point clouds and 0/1 label sidecars.
//!
//! Only the `x`, `y`, `z` properties of the `vertex` element are read; other
//! properties and elements are skipped. Binary encodings are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{RegError, Result};
use crate::geometry::Vec3;

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> RegError {
    RegError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RegError {
    RegError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
    /// Line of the `element` declaration, for error messages.
    line: usize,
}

/// Parses ASCII PLY text. `path` only labels error messages.
pub fn parse_ply(text: &str, path: &str) -> Result<Vec<Vec3>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(path, no, "only 'format ascii' is supported"));
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(path, no, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, no, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    line: no,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, no, "property before any element"))?;
                let rest: Vec<&str> = tok.collect();
                let name = match rest.as_slice() {
                    ["list", _, _, name] => *name,
                    [_, name] => *name,
                    _ => return Err(parse_err(path, no, "malformed property line")),
                };
                el.props.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(parse_err(path, no, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !saw_format {
        return Err(parse_err(path, 1, "missing format line"));
    }
    if !header_done {
        return Err(parse_err(path, text.lines().count(), "missing end_header"));
    }

    let mut points = Vec::new();
    for el in &elements {
        let xyz = if el.name == "vertex" {
            let find = |p: &str| {
                el.props
                    .iter()
                    .position(|q| q == p)
                    .ok_or_else(|| parse_err(path, el.line, format!("vertex element has no '{p}' property")))
            };
            Some([find("x")?, find("y")?, find("z")?])
        } else {
            None
        };
        for k in 0..el.count {
            let (no, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, text.lines().count() + 1, format!("expected {} {} rows, found {k}", el.count, el.name)))?;
            let Some(xyz) = xyz else { continue };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < el.props.len() {
                return Err(parse_err(
                    path,
                    no,
                    format!("expected {} values, found {}", el.props.len(), fields.len()),
                ));
            }
            let mut p = Vec3::zeros();
            for (d, &col) in xyz.iter().enumerate() {
                p[d] = fields[col]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, no, format!("'{}' is not a finite number", fields[col])))?;
            }
            points.push(p);
        }
    }
    Ok(points)
}

pub fn read_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_ply(&text, &path.display().to_string())
}

/// Formats points with shortest round-trip decimals, so reading back is exact.
pub fn format_ply(points: &[Vec3]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
    }
    s
}

pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    fs::write(path, format_ply(points)).map_err(|e| io_err(path, e))
}

/// One `0` or `1` per line; `1` marks an inlier. Blank lines are ignored.
pub fn parse_labels(text: &str, path: &str) -> Result<Vec<bool>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(parse_err(path, i + 1, format!("expected 0 or 1, found '{other}'"))),
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_labels(&text, &path.display().to_string())
}

pub fn write_labels(path: &Path, labels: &[bool]) -> Result<()> {
    let text: String = labels.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect();
    fs::write(path, text).map_err(|e| io_err(path, e))
}
