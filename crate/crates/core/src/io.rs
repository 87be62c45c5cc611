//! Text formats: `.xyz` clouds, labelled query files and ASCII OBJ meshes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, QueryBatch};
use crate::mesh::Mesh;

fn floats(line: &str, lineno: usize, want: usize, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("{what} line {lineno}: {e}")))?;
    if vals.len() != want {
        return Err(Error::Parse(format!(
            "{what} line {lineno}: expected {want} numbers, found {}",
            vals.len()
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse(format!("{what} line {lineno}: non-finite value")));
    }
    Ok(vals)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

/// One `x y z` triple per line; `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<Vec<Point>> {
    content_lines(text)
        .map(|(n, l)| floats(l, n, 3, "xyz").map(|v| [v[0], v[1], v[2]]))
        .collect()
}

pub fn format_xyz(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 64);
    for p in points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    s
}

pub fn read_xyz(path: &Path) -> Result<Vec<Point>> {
    parse_xyz(&fs::read_to_string(path)?)
}

pub fn write_xyz(path: &Path, points: &[Point]) -> Result<()> {
    fs::write(path, format_xyz(points))?;
    Ok(())
}

/// `x y z occupancy` per line.
pub fn parse_queries(text: &str) -> Result<QueryBatch> {
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for (n, l) in content_lines(text) {
        let v = floats(l, n, 4, "query")?;
        if v[3] != 0.0 && v[3] != 1.0 {
            return Err(Error::Parse(format!("query line {n}: occupancy {} is not 0 or 1", v[3])));
        }
        coords.push([v[0], v[1], v[2]]);
        labels.push(v[3]);
    }
    QueryBatch::labeled(coords, labels)
}

pub fn format_queries(q: &QueryBatch) -> Result<String> {
    let labels = q
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("query batch has no labels to write".into()))?;
    let mut s = String::with_capacity(q.len() * 72);
    for (p, o) in q.coords.iter().zip(labels) {
        let _ = writeln!(s, "{:?} {:?} {:?} {}", p[0], p[1], p[2], *o as u8);
    }
    Ok(s)
}

/// `v` and `f` records only; faces are 1-based.
pub fn format_obj(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 64 + mesh.triangles.len() * 32);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

/// Reads `v` and triangular or polygonal `f` records (polygons are fanned);
/// other record types are ignored. Face entries may carry `/vt/vn` suffixes
/// and negative indices.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, l) in content_lines(text) {
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("v") => {
                let rest: Vec<&str> = parts.collect();
                let xyz = rest.get(..3).ok_or_else(|| Error::Parse(format!("obj line {n}: short vertex")))?;
                let v = floats(&xyz.join(" "), n, 3, "obj")?;
                vertices.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|_| Error::Parse(format!("obj line {n}: bad face index '{t}'")))?;
                        let k = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if k < 0 {
                            return Err(Error::Parse(format!("obj line {n}: face index {i} out of range")));
                        }
                        Ok(k as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Parse(format!("obj line {n}: face with fewer than 3 vertices")));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles).map_err(|e| Error::Parse(format!("obj: {e}")))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&fs::read_to_string(path)?)
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    fs::write(path, format_obj(mesh))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip_and_comments() {
        let pts = vec![[0.1, 0.2, 0.3], [1.0 / 3.0, 0.0, 1e-17]];
        assert_eq!(parse_xyz(&format_xyz(&pts)).unwrap(), pts);
        let parsed = parse_xyz("# header\n0 0 0\n\n 1 2 3 # trailing\n").unwrap();
        assert_eq!(parsed, vec![[0.0; 3], [1.0, 2.0, 3.0]]);
        assert!(matches!(parse_xyz("1 2\n"), Err(Error::Parse(_))));
        assert!(parse_xyz("1 2 x\n").is_err());
    }

    #[test]
    fn queries_round_trip() {
        let q = QueryBatch::labeled(vec![[0.5; 3], [0.25, 0.5, 0.75]], vec![1.0, 0.0]).unwrap();
        assert_eq!(parse_queries(&format_queries(&q).unwrap()).unwrap(), q);
        assert!(parse_queries("0 0 0 0.5\n").is_err());
    }

    #[test]
    fn obj_round_trip() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.1, 0.2, 0.7]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        assert_eq!(parse_obj(&format_obj(&m)).unwrap(), m);
        assert_eq!(parse_obj("").unwrap(), Mesh::default());
        let quad = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 -1//1\n").unwrap();
        assert_eq!(quad.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }
}
