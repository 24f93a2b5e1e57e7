//! ASCII PLY and XYZ point-cloud files.
//!
//! Coordinates are written with 17 significant digits, so a write/read
//! cycle reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Xyz,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(CloudFormat::Ply),
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            _ => Err(parse_error(path, 0, ParseErrorKind::UnsupportedFormat, "expected a .ply or .xyz extension")),
        }
    }
}

fn parse_error(path: &Path, line: usize, kind: ParseErrorKind, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        kind,
        message: message.into(),
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let format = CloudFormat::from_path(path)?;
    let text = fs::read_to_string(path)?;
    match format {
        CloudFormat::Ply => parse_ply(&text, path),
        CloudFormat::Xyz => parse_xyz(&text, path),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let text = match CloudFormat::from_path(path)? {
        CloudFormat::Ply => format_ply(cloud),
        CloudFormat::Xyz => format_xyz(cloud),
    };
    fs::write(path, text)?;
    Ok(())
}

fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:.16e}").unwrap();
    }
    out.push('\n');
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.normals() {
            Some(n) => push_row(&mut out, p.iter().chain(n[i].iter()).copied()),
            None => push_row(&mut out, p.iter().copied()),
        }
    }
    out
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.normals() {
            Some(n) => push_row(&mut out, p.iter().chain(n[i].iter()).copied()),
            None => push_row(&mut out, p.iter().copied()),
        }
    }
    out
}

fn parse_number(token: &str, path: &Path, line: usize) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| parse_error(path, line, ParseErrorKind::NonNumeric, format!("`{token}` is not a number")))
}

fn build(points: Vec<Vec3>, normals: Option<Vec<Vec3>>, path: &Path) -> Result<PointCloud> {
    let cloud = match normals {
        Some(n) => PointCloud::with_normals(points, n),
        None => PointCloud::new(points),
    };
    cloud.map_err(|e| parse_error(path, 0, ParseErrorKind::NonNumeric, e.to_string()))
}

/// Whitespace-separated rows of 3 (xyz) or 6 (xyz + normal) numbers.
/// Blank lines and `#` comments are ignored.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| parse_number(t, path, i + 1))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(parse_error(
                path,
                i + 1,
                ParseErrorKind::CountMismatch,
                format!("expected 3 or 6 values, found {}", values.len()),
            ));
        }
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(parse_error(path, i + 1, ParseErrorKind::CountMismatch, "rows have inconsistent widths"));
        }
        points.push(Vec3::new(values[0], values[1], values[2]));
        if values.len() == 6 {
            normals.push(Vec3::new(values[3], values[4], values[5]));
        }
    }
    if points.is_empty() {
        return Err(parse_error(path, 0, ParseErrorKind::CountMismatch, "no points"));
    }
    build(points, (width == Some(6)).then_some(normals), path)
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let malformed = |line: usize, msg: &str| parse_error(path, line, ParseErrorKind::MalformedHeader, msg);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(malformed(1, "missing `ply` magic")),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut header_end = None;
    for (no, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => format_seen = true,
            ["format", other, _] => {
                return Err(parse_error(
                    path,
                    no,
                    ParseErrorKind::UnsupportedFormat,
                    format!("format `{other}` is not supported, only ascii"),
                ))
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| malformed(no, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", _, _, name] => {
                let e = elements.last_mut().ok_or_else(|| malformed(no, "property before any element"))?;
                e.properties.push(name.to_string());
                e.has_list = true;
            }
            ["property", _, name] => {
                let e = elements.last_mut().ok_or_else(|| malformed(no, "property before any element"))?;
                e.properties.push(name.to_string());
            }
            ["end_header"] => {
                header_end = Some(no);
                break;
            }
            _ => return Err(malformed(no, &format!("unrecognised header line `{line}`"))),
        }
    }
    let header_end = header_end.ok_or_else(|| malformed(0, "missing end_header"))?;
    if !format_seen {
        return Err(malformed(header_end, "missing format line"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed(header_end, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    if vertex.has_list {
        return Err(parse_error(
            path,
            header_end,
            ParseErrorKind::UnsupportedFormat,
            "list properties on vertices are not supported",
        ));
    }
    let find = |name: &str| vertex.properties.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(malformed(header_end, "vertex element lacks x, y or z"));
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };

    let body: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty()).collect();
    let expected: usize = elements.iter().map(|e| e.count).sum();
    if body.len() != expected {
        let line = body.last().map_or(header_end, |b| b.0);
        return Err(parse_error(
            path,
            line,
            ParseErrorKind::CountMismatch,
            format!("header declares {expected} data rows, found {}", body.len()),
        ));
    }
    let start: usize = elements[..vertex_pos].iter().map(|e| e.count).sum();
    let mut points = Vec::with_capacity(vertex.count);
    let mut normals = Vec::with_capacity(vertex.count);
    for &(no, line) in &body[start..start + vertex.count] {
        let values = line
            .split_whitespace()
            .map(|t| parse_number(t, path, no))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != vertex.properties.len() {
            return Err(parse_error(
                path,
                no,
                ParseErrorKind::CountMismatch,
                format!("expected {} values, found {}", vertex.properties.len(), values.len()),
            ));
        }
        points.push(Vec3::new(values[ix], values[iy], values[iz]));
        if let Some([a, b, c]) = normal_idx {
            normals.push(Vec3::new(values[a], values[b], values[c]));
        }
    }
    if points.is_empty() {
        return Err(parse_error(path, header_end, ParseErrorKind::CountMismatch, "no vertices"));
    }
    build(points, normal_idx.map(|_| normals), path)
}
