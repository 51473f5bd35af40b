//! ASCII PLY point files: vertex `x y z`, extra properties and elements ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::scalar::Scalar;

fn ingest(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Parses ASCII PLY text. `path` is only used in error messages.
pub fn parse_ply<T: Scalar>(text: &str, path: &Path) -> Result<PointCloud<T>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(ingest(path, "missing 'ply' magic line")),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut ascii = false;
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(ingest(path, "header has no end_header"));
        };
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                ascii = tok.next() == Some("ascii");
                if !ascii {
                    return Err(ingest(path, format!("line {}: only ascii PLY is supported", n + 1)));
                }
            }
            Some("element") => {
                let name = tok.next().unwrap_or_default().to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| ingest(path, format!("line {}: bad element count", n + 1)))?;
                elements.push(Element {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let name = tok.last().unwrap_or_default().to_string();
                elements
                    .last_mut()
                    .ok_or_else(|| ingest(path, format!("line {}: property before element", n + 1)))?
                    .properties
                    .push(name);
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(ingest(path, "missing format line"));
    }
    let mut points: Vec<Vec3<T>> = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                lines.next().ok_or_else(|| ingest(path, "truncated body"))?;
            }
            continue;
        }
        let idx: Vec<usize> = ["x", "y", "z"]
            .iter()
            .map(|a| {
                el.properties
                    .iter()
                    .position(|p| p == a)
                    .ok_or_else(|| ingest(path, format!("vertex has no '{a}' property")))
            })
            .collect::<Result<_>>()?;
        for _ in 0..el.count {
            let (n, line) = lines.next().ok_or_else(|| ingest(path, "truncated vertex list"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            let mut p = [T::zero(); 3];
            for (k, &i) in idx.iter().enumerate() {
                let v: f64 = vals
                    .get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| ingest(path, format!("line {}: bad vertex value", n + 1)))?;
                p[k] = T::lit(v);
            }
            points.push(p);
        }
        break;
    }
    PointCloud::new(points).map_err(|e| ingest(path, e.to_string()))
}

pub fn read_ply<T: Scalar>(path: &Path) -> Result<PointCloud<T>> {
    let text = fs::read_to_string(path).map_err(|e| ingest(path, e.to_string()))?;
    parse_ply(&text, path)
}

/// Serializes coordinates with single precision.
pub fn format_ply<T: Scalar>(cloud: &PointCloud<T>) -> String {
    let mut s = String::with_capacity(64 + cloud.len() * 32);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(
            s,
            "{} {} {}",
            p[0].as_f64() as f32,
            p[1].as_f64() as f32,
            p[2].as_f64() as f32
        );
    }
    s
}

pub fn write_ply<T: Scalar>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    fs::write(path, format_ply(cloud))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_single_precision() {
        let c = PointCloud::new(vec![[0.1f64, -2.5, 3.0], [1e-3, 0.0, -0.75]]).unwrap();
        let back: PointCloud<f64> = parse_ply(&format_ply(&c), Path::new("mem")).unwrap();
        for (a, b) in c.points().iter().zip(back.points()) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
    }

    #[test]
    fn skips_faces_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n";
        let c: PointCloud<f64> = parse_ply(text, Path::new("mem")).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn errors_name_the_file() {
        let err = parse_ply::<f64>("ply\nformat binary_little_endian 1.0\nend_header\n", Path::new("a/b.ply"))
            .unwrap_err();
        assert!(err.to_string().contains("a/b.ply"));
        assert!(parse_ply::<f64>("nope", Path::new("x")).is_err());
        let truncated = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(parse_ply::<f64>(truncated, Path::new("x")).is_err());
    }
}
