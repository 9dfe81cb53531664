use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Mesh, Vec3};
use crate::error::{Error, Result};

/// Loads an OBJ file (positions and faces only) and repairs it into a
/// triangle mesh.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let options = tobj::LoadOptions {
        single_index: false,
        triangulate: false,
        ignore_points: true,
        ignore_lines: true,
    };
    // Material libraries are irrelevant here; a missing .mtl is not an error.
    let (models, _materials) = tobj::load_obj(path, &options).map_err(|e| Error::parse(path, e.to_string()))?;

    let mut vertices = Vec::new();
    let mut polygons = Vec::new();
    for model in &models {
        let m = &model.mesh;
        let base = vertices.len();
        vertices.extend(m.positions.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])));
        let mut offset = 0;
        let arities: Box<dyn Iterator<Item = usize>> = if m.face_arities.is_empty() {
            Box::new(std::iter::repeat_n(3, m.indices.len() / 3))
        } else {
            Box::new(m.face_arities.iter().map(|&a| a as usize))
        };
        for arity in arities {
            let poly = m.indices[offset..offset + arity]
                .iter()
                .map(|&i| base + i as usize)
                .collect();
            polygons.push(poly);
            offset += arity;
        }
    }
    if polygons.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Mesh::from_polygons(vertices, &polygons)
}

/// Writes the mesh as OBJ. Coordinates use the shortest round-trip decimal
/// form, so loading the file reproduces the vertex positions exactly.
pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for v in mesh.vertices() {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in mesh.faces() {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads a per-face label file: one non-negative integer per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 2);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
