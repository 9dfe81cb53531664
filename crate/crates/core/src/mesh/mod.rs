//! Indexed triangle meshes and the geometric precomputation the rest of the
//! pipeline relies on: normals, areas, bounding sphere, face adjacency,
//! surface sampling and the pairwise graph used by the surface CRF.
//!
//! Meshes are built through [`Mesh::from_polygons`], which fan-triangulates
//! polygons, welds coincident vertices, drops zero-area faces and attempts a
//! consistent outward orientation. A `Mesh` is immutable afterwards.

mod graph;
mod io;
mod sample;

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};

pub use graph::{build_pairwise_graph, DualGraph, PairwiseGraph, DEFAULT_GEODESIC_CUTOFF};
pub use io::{load_mesh, read_labels, save_obj, write_labels};
pub use sample::{sample_surface, SampledPoint, SampledPointSet, DEFAULT_SAMPLE_COUNT};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Relative tolerance used when welding vertices (fraction of the bounding
/// sphere radius).
pub const WELD_TOLERANCE: f64 = 1e-6;

/// Faces with an area below this fraction of `radius²` count as degenerate.
const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingSphere {
    pub center: Vec3,
    pub radius: f64,
}

impl BoundingSphere {
    /// Sphere centred on the mean of `points`, with the radius set to the
    /// farthest point. Equivariant under rigid motions and uniform scaling.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Vec3> + Clone) -> Option<Self> {
        let (sum, count) = points
            .clone()
            .into_iter()
            .fold((Vec3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
        if count == 0 {
            return None;
        }
        Some(Self::around(sum / count as f64, points))
    }

    /// Smallest sphere centred at `center` containing all `points`.
    pub fn around<'a>(center: Vec3, points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let radius = points.into_iter().map(|p| (p - center).norm()).fold(0.0_f64, f64::max);
        BoundingSphere { center, radius }
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_normals: Vec<Vec3>,
    face_areas: Vec<f64>,
    bounding_sphere: BoundingSphere,
    source_polygons: Vec<usize>,
}

impl Mesh {
    /// Builds a repaired triangle mesh from an arbitrary polygon soup.
    ///
    /// Polygons with more than three vertices are fan-triangulated; the index
    /// of the originating polygon of every output face is kept in
    /// [`Mesh::source_polygons`].
    pub fn from_polygons(vertices: Vec<Vec3>, polygons: &[Vec<usize>]) -> Result<Mesh> {
        let mut faces = Vec::new();
        let mut source = Vec::new();
        for (p, poly) in polygons.iter().enumerate() {
            if let Some(&bad) = poly.iter().find(|&&i| i >= vertices.len()) {
                return Err(Error::InvalidInput(format!(
                    "polygon {p} references vertex {bad}, but only {} vertices exist",
                    vertices.len()
                )));
            }
            for k in 1..poly.len().saturating_sub(1) {
                faces.push([poly[0], poly[k], poly[k + 1]]);
                source.push(p);
            }
        }

        let referenced: Vec<Vec3> = {
            let mut used = vec![false; vertices.len()];
            faces.iter().flatten().for_each(|&i| used[i] = true);
            vertices
                .iter()
                .zip(&used)
                .filter(|(_, &u)| u)
                .map(|(v, _)| *v)
                .collect()
        };
        let sphere = BoundingSphere::enclosing(&referenced).ok_or(Error::EmptyMesh)?;
        let weld_map = weld(&vertices, WELD_TOLERANCE * sphere.radius);

        let min_area = DEGENERATE_AREA * sphere.radius * sphere.radius;
        let mut kept_faces = Vec::with_capacity(faces.len());
        let mut kept_source = Vec::with_capacity(faces.len());
        for (face, src) in faces.into_iter().zip(source) {
            let f = face.map(|i| weld_map[i]);
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                continue;
            }
            if triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) <= min_area {
                continue;
            }
            kept_faces.push(f);
            kept_source.push(src);
        }
        if kept_faces.is_empty() {
            return Err(Error::EmptyMesh);
        }

        // Compact to referenced vertices, preserving first-use order.
        let mut remap = vec![usize::MAX; vertices.len()];
        let mut compact = Vec::new();
        for f in kept_faces.iter_mut() {
            for i in f.iter_mut() {
                if remap[*i] == usize::MAX {
                    remap[*i] = compact.len();
                    compact.push(vertices[*i]);
                }
                *i = remap[*i];
            }
        }

        orient_consistently(&mut kept_faces, &compact);
        Ok(Mesh::assemble(compact, kept_faces, kept_source))
    }

    /// Builds a mesh from triangles that are already clean (no welding or
    /// orientation repair). Used for meshes whose topology must be kept as is.
    pub fn from_triangles_unchecked(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Mesh> {
        if faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if faces.iter().flatten().any(|&i| i >= vertices.len()) {
            return Err(Error::InvalidInput("face index out of range".into()));
        }
        let source = (0..faces.len()).collect();
        Ok(Mesh::assemble(vertices, faces, source))
    }

    fn assemble(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, source_polygons: Vec<usize>) -> Mesh {
        let (face_normals, face_areas): (Vec<Vec3>, Vec<f64>) = faces
            .iter()
            .map(|f| {
                let cross = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
                let len = cross.norm();
                let n = if len > 0.0 { cross / len } else { Vec3::zeros() };
                (n, 0.5 * len)
            })
            .unzip();
        // Centred on the area-weighted surface centroid, which does not depend
        // on how the surface is tessellated.
        let total: f64 = face_areas.iter().sum();
        let center = if total > 0.0 {
            faces
                .iter()
                .zip(&face_areas)
                .map(|(f, a)| (vertices[f[0]] + vertices[f[1]] + vertices[f[2]]) * (a / 3.0))
                .sum::<Vec3>()
                / total
        } else {
            vertices.iter().sum::<Vec3>() / vertices.len() as f64
        };
        let bounding_sphere = BoundingSphere::around(center, &vertices);
        Mesh {
            vertices,
            faces,
            face_normals,
            face_areas,
            bounding_sphere,
            source_polygons,
        }
    }

    /// Same topology with every vertex moved by `f`; normals, areas and the
    /// bounding sphere are recomputed.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Mesh {
        let vertices = self.vertices.iter().map(f).collect();
        Mesh::assemble(vertices, self.faces.clone(), self.source_polygons.clone())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_normals(&self) -> &[Vec3] {
        &self.face_normals
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    pub fn bounding_sphere(&self) -> BoundingSphere {
        self.bounding_sphere
    }

    /// Index of the input polygon each face was triangulated from.
    pub fn source_polygons(&self) -> &[usize] {
        &self.source_polygons
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        (a + b + c) / 3.0
    }

    /// Axis-aligned bounds of the vertex set.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let first = self.vertices[0];
        self.vertices
            .iter()
            .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
    }

    /// Faces sharing each undirected edge, keyed by `(min, max)` vertex index
    /// and sorted by key.
    pub fn edge_faces(&self) -> Vec<((usize, usize), Vec<usize>)> {
        edge_map(&self.faces)
    }
}

pub(crate) fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn edge_map(faces: &[[usize; 3]]) -> Vec<((usize, usize), Vec<usize>)> {
    let mut entries: Vec<((usize, usize), usize)> = faces
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            (0..3).map(move |k| {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                ((a.min(b), a.max(b)), fi)
            })
        })
        .collect();
    entries.sort_unstable();
    let mut out: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (edge, face) in entries {
        match out.last_mut() {
            Some((e, list)) if *e == edge => {
                if list.last() != Some(&face) {
                    list.push(face);
                }
            }
            _ => out.push((edge, vec![face])),
        }
    }
    out
}

/// Maps every vertex to the lowest-indexed vertex within `tol` of it.
fn weld(vertices: &[Vec3], tol: f64) -> Vec<usize> {
    if tol <= 0.0 {
        return (0..vertices.len()).collect();
    }
    let key = |v: &Vec3| {
        (
            (v.x / tol).floor() as i64,
            (v.y / tol).floor() as i64,
            (v.z / tol).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut map = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        let (kx, ky, kz) = key(v);
        let mut rep = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cands) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &j in cands {
                            if (vertices[j] - v).norm() <= tol && rep.is_none_or(|r| j < r) {
                                rep = Some(j);
                            }
                        }
                    }
                }
            }
        }
        match rep {
            Some(j) => map.push(j),
            None => {
                grid.entry((kx, ky, kz)).or_default().push(i);
                map.push(i);
            }
        }
    }
    map
}

fn has_directed_edge(face: &[usize; 3], a: usize, b: usize) -> bool {
    (0..3).any(|k| face[k] == a && face[(k + 1) % 3] == b)
}

/// Propagates a consistent winding across manifold edges. A face reached by
/// the traversal takes the orientation preferred by the majority of its
/// already-oriented neighbours. Each connected component is then flipped, if
/// needed, so that its signed volume is non-negative (outward normals on
/// closed surfaces).
fn orient_consistently(faces: &mut [[usize; 3]], vertices: &[Vec3]) {
    let n = faces.len();
    let edges = edge_map(faces);
    let mut neighbours: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
    for ((a, b), list) in &edges {
        if let [f, g] = list[..] {
            neighbours[f].push((g, *a, *b));
            neighbours[g].push((f, *a, *b));
        }
    }

    let mut oriented = vec![false; n];
    let mut component = vec![usize::MAX; n];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if oriented[seed] {
            continue;
        }
        oriented[seed] = true;
        component[seed] = components;
        queue.push_back(seed);
        while let Some(f) = queue.pop_front() {
            for &(g, _, _) in &neighbours[f] {
                if oriented[g] {
                    continue;
                }
                let (mut keep, mut flip) = (0, 0);
                for &(h, a, b) in &neighbours[g] {
                    if !oriented[h] {
                        continue;
                    }
                    let h_forward = has_directed_edge(&faces[h], a, b);
                    let g_forward = has_directed_edge(&faces[g], a, b);
                    if h_forward == g_forward {
                        flip += 1;
                    } else {
                        keep += 1;
                    }
                }
                if flip > keep {
                    faces[g].swap(1, 2);
                }
                oriented[g] = true;
                component[g] = components;
                queue.push_back(g);
            }
        }
        components += 1;
    }

    let mut weighted_centroid = vec![(Vec3::zeros(), 0.0); components];
    for (f, face) in faces.iter().enumerate() {
        let [a, b, c] = face.map(|i| vertices[i]);
        let area = triangle_area(&a, &b, &c);
        let entry = &mut weighted_centroid[component[f]];
        entry.0 += (a + b + c) / 3.0 * area;
        entry.1 += area;
    }
    let mut volume = vec![0.0; components];
    for (f, face) in faces.iter().enumerate() {
        let (sum, area) = weighted_centroid[component[f]];
        let origin = if area > 0.0 { sum / area } else { Vec3::zeros() };
        let [a, b, c] = face.map(|i| vertices[i] - origin);
        volume[component[f]] += a.dot(&b.cross(&c));
    }
    for (f, face) in faces.iter_mut().enumerate() {
        if volume[component[f]] < 0.0 {
            face.swap(1, 2);
        }
    }
}
