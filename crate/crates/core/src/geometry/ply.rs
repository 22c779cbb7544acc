//! ASCII PLY reading and writing for point clouds.
//!
//! Only the `vertex` element is interpreted (`x y z`, optionally `nx ny nz`);
//! other properties are skipped and other elements' rows ignored. Binary PLY
//! is rejected.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{Point3, PointCloud, PLANE_EPSILON};
use crate::error::{format_err, Result};

/// Serialize as ASCII PLY. Coordinates use the shortest round-trip decimal form,
/// so reading the file back reproduces every coordinate bit-exactly.
pub fn to_ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + cloud.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let normals = cloud.normals();
    if normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(ns) = normals {
            let n = ns[i];
            let _ = write!(s, " {} {} {}", n.x, n.y, n.z);
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, to_ply_string(cloud))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read(path)?;
    // a binary body is not valid UTF-8 in general; check the header first
    let header_end =
        find_header_end(&text).ok_or_else(|| format_err("ply", "missing end_header line"))?;
    let header = std::str::from_utf8(&text[..header_end])
        .map_err(|_| format_err("ply", "header is not valid text"))?;
    if let Some(line) = header.lines().find(|l| l.starts_with("format")) {
        if !line.contains("ascii") {
            return Err(format_err(
                "ply",
                format!("only ASCII PLY is supported, found `{}`", line.trim()),
            ));
        }
    }
    let body = std::str::from_utf8(&text[header_end..])
        .map_err(|_| format_err("ply", "body is not valid text"))?;
    parse_ply(header, body)
}

pub fn parse_ply_str(text: &str) -> Result<PointCloud> {
    let end = find_header_end(text.as_bytes())
        .ok_or_else(|| format_err("ply", "missing end_header line"))?;
    let (header, body) = text.split_at(end);
    if let Some(line) = header.lines().find(|l| l.starts_with("format")) {
        if !line.contains("ascii") {
            return Err(format_err(
                "ply",
                format!("only ASCII PLY is supported, found `{}`", line.trim()),
            ));
        }
    }
    parse_ply(header, body)
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"end_header";
    let pos = bytes.windows(marker.len()).position(|w| w == marker)?;
    let nl = bytes[pos..].iter().position(|&b| b == b'\n')?;
    Some(pos + nl + 1)
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn parse_ply(header: &str, body: &str) -> Result<PointCloud> {
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(format_err("ply", "missing `ply` magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| format_err("ply", format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| format_err("ply", "property before element"))?;
                el.props.push("<list>".into());
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| format_err("ply", "property before element"))?;
                el.props.push(name.to_string());
            }
            _ => {}
        }
    }

    let mut rows = body.lines().filter(|l| !l.trim().is_empty());
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                rows.next();
            }
            continue;
        }
        let col = |name: &str| el.props.iter().position(|p| p == name);
        let (x, y, z) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(format_err("ply", "vertex element lacks x, y, z")),
        };
        let ncols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        has_normals = ncols.is_some();
        for r in 0..el.count {
            let row = rows.next().ok_or_else(|| {
                format_err("ply", format!("expected {} vertices, found {r}", el.count))
            })?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format_err("ply", format!("non-numeric vertex row {r}")))?;
            if vals.len() < el.props.len() {
                return Err(format_err("ply", format!("short vertex row {r}")));
            }
            points.push(Point3::new(vals[x], vals[y], vals[z]));
            if let Some((a, b, c)) = ncols {
                normals.push(Vector3::new(vals[a], vals[b], vals[c]));
            }
        }
    }
    let cloud = PointCloud::new(points)?;
    if has_normals {
        cloud.with_plane_normals(normals, PLANE_EPSILON)
    } else {
        Ok(cloud)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let c = PointCloud::new(vec![
            Point3::new(0.1, -2.5e-7, 1.0 / 3.0),
            Point3::new(1e10, 0.0, -0.0),
        ])
        .unwrap();
        let back = parse_ply_str(&to_ply_string(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn normals_survive_and_regain_covariances() {
        let c = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0)])
            .unwrap()
            .with_plane_normals(vec![Vector3::new(0.0, 0.6, 0.8)], PLANE_EPSILON)
            .unwrap();
        let back = parse_ply_str(&to_ply_string(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn binary_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        let err = parse_ply_str(text).unwrap_err().to_string();
        assert!(err.contains("ASCII"), "{err}");
    }

    #[test]
    fn extra_properties_and_elements_are_skipped() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 2 3 255\n4 5 6 0\n3 0 1 1\n";
        let c = parse_ply_str(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points()[1], Point3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn truncated_body_is_an_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(parse_ply_str(text).is_err());
    }
}
