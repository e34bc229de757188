//! ASCII PLY reader/writer for point clouds.
//!
//! Header layout:
//! ```text
//! ply
//! format ascii 1.0
//! element vertex N
//! property float x
//! property float y
//! property float z
//! [property float red
//!  property float green
//!  property float blue]
//! end_header
//! ```
//! One vertex per line. Values are written at single precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::PointCloud;

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors().is_some() {
        out.push_str("property float red\nproperty float green\nproperty float blue\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        out.push_str(&format!("{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32));
        if let Some(colors) = cloud.colors() {
            let c = colors[i];
            out.push_str(&format!(" {} {} {}", c[0] as f32, c[1] as f32, c[2] as f32));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |detail: &str| Error::Parse {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(parse_err("missing `ply` magic"));
    }
    if lines.next() != Some("format ascii 1.0") {
        return Err(parse_err("expected `format ascii 1.0`"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        } else if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| parse_err("bad vertex count"))?,
            );
        } else if let Some(rest) = line.strip_prefix("property float ") {
            properties.push(rest.trim().to_string());
        } else if line.starts_with("comment") {
            continue;
        } else {
            return Err(parse_err(&format!("unexpected header line `{line}`")));
        }
    }
    let n = vertex_count.ok_or_else(|| parse_err("missing vertex element"))?;
    let has_color = match properties.as_slice() {
        [x, y, z] if x == "x" && y == "y" && z == "z" => false,
        [x, y, z, r, g, b]
            if x == "x" && y == "y" && z == "z" && r == "red" && g == "green" && b == "blue" =>
        {
            true
        }
        _ => return Err(parse_err("unsupported property layout")),
    };
    let mut points = Vec::with_capacity(n);
    let mut colors = if has_color { Some(Vec::with_capacity(n)) } else { None };
    for _ in 0..n {
        let line = lines.next().ok_or_else(|| parse_err("truncated vertex data"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(&format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        let want = if has_color { 6 } else { 3 };
        if vals.len() != want {
            return Err(parse_err(&format!(
                "expected {want} values per vertex, got {}",
                vals.len()
            )));
        }
        points.push([vals[0], vals[1], vals[2]]);
        if let Some(c) = colors.as_mut() {
            c.push([vals[3], vals[4], vals[5]]);
        }
    }
    PointCloud::new(points, colors)
}
