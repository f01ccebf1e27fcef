//! Wavefront OBJ load/save: `v x y z [r g b]` and `f` records, 1-based indices.

use super::mesh::{TriangleMesh, DEFAULT_GRAY};
use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&name, e))?;
    let reader = BufReader::new(file);

    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut any_color = false;
    let mut faces: Vec<[usize; 3]> = Vec::new();

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(&name, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(lineno, format!("bad vertex number: {e}")))?;
                match nums.len() {
                    3 => {
                        vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
                        colors.push(DEFAULT_GRAY);
                    }
                    6 => {
                        vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
                        colors.push([nums[3], nums[4], nums[5]]);
                        any_color = true;
                    }
                    n => {
                        return Err(parse_err(
                            lineno,
                            format!("vertex record needs 3 or 6 numbers, got {n}"),
                        ))
                    }
                }
            }
            Some("f") => {
                let mut idxs = Vec::new();
                for tok in it {
                    // "f a", "f a/t", "f a/t/n", "f a//n" all carry the vertex
                    // index before the first slash.
                    let v = tok.split('/').next().unwrap_or("");
                    let i: i64 = v
                        .parse()
                        .map_err(|e| parse_err(lineno, format!("bad face index '{tok}': {e}")))?;
                    if i < 1 {
                        return Err(parse_err(
                            lineno,
                            format!("face index {i} out of range (OBJ indices are 1-based)"),
                        ));
                    }
                    let i = (i - 1) as usize;
                    if i >= vertices.len() {
                        return Err(parse_err(
                            lineno,
                            format!("face index {} exceeds vertex count {}", i + 1, vertices.len()),
                        ));
                    }
                    idxs.push(i);
                }
                if idxs.len() < 3 {
                    return Err(parse_err(lineno, "face needs at least 3 vertices".into()));
                }
                // Fan-triangulate polygons.
                for k in 1..idxs.len() - 1 {
                    faces.push([idxs[0], idxs[k], idxs[k + 1]]);
                }
            }
            // vn / vt / usemtl / o / g / s / mtllib are ignored.
            _ => {}
        }
    }

    if vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    TriangleMesh::new(vertices, faces, if any_color { Some(colors) } else { None })
}

pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&name, e))?;
    let mut buf = String::new();
    for (v, c) in mesh.vertices.iter().zip(&mesh.vertex_colors) {
        buf.push_str(&format!(
            "v {:.9} {:.9} {:.9} {:.6} {:.6} {:.6}\n",
            v.x, v.y, v.z, c[0], c[1], c[2]
        ));
    }
    for f in &mesh.faces {
        buf.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(&name, e))
}
