//! Multi-scale viewpoint generation and greedy coverage-driven selection.
//!
//! Every sampled surface point spawns one candidate per scale, placed along
//! the point's normal at a multiple of the bounding sphere radius. Per scale,
//! candidates are added greedily by how many still-uncovered points they
//! reference, until every point is covered, nothing more can be gained, or
//! the per-scale budget is exhausted.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{BoundingSphere, Mesh, SampledPointSet, Vec3};
use crate::render::{make_cameras, rasterize_faces, Camera, Frame, RenderConfig};

/// Camera distance from the surface point, in bounding sphere radii.
pub const SCALE_FACTORS: [f64; 3] = [0.5, 1.0, 1.5];
pub const DEFAULT_MAX_PER_SCALE: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub eye: Vec3,
    pub target: Vec3,
    pub scale_index: usize,
    /// Fraction of the then-uncovered points this viewpoint added when it
    /// was selected.
    pub coverage: f64,
    /// Number of points it newly covered.
    pub gain: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSet {
    pub selected: Vec<Viewpoint>,
    pub covered_fraction_per_scale: [f64; 3],
}

impl ViewpointSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ViewpointSet> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn count_for_scale(&self, scale: usize) -> usize {
        self.selected.iter().filter(|v| v.scale_index == scale).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub coverage_target: f64,
    pub max_per_scale: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            coverage_target: 1.0,
            max_per_scale: DEFAULT_MAX_PER_SCALE,
        }
    }
}

/// One candidate per point per scale, scale-major.
pub fn generate_candidates(points: &SampledPointSet, sphere: &BoundingSphere) -> Result<Vec<Viewpoint>> {
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "cannot generate viewpoints from an empty point set".into(),
        ));
    }
    Ok(SCALE_FACTORS
        .iter()
        .enumerate()
        .flat_map(|(s, factor)| {
            points.points.iter().map(move |p| Viewpoint {
                eye: p.position + p.normal * (factor * sphere.radius),
                target: p.position,
                scale_index: s,
                coverage: 0.0,
                gain: 0,
            })
        })
        .collect())
}

/// Fixed-size bit set over sampled point indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointMask {
    words: Vec<u64>,
    len: usize,
}

impl PointMask {
    pub fn empty(len: usize) -> Self {
        PointMask {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut m = Self::empty(len);
        (0..len).for_each(|i| m.insert(i));
        m
    }

    pub fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &PointMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn remove_all(&mut self, other: &PointMask) {
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a &= !b);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.contains(i))
    }
}

/// Camera used to evaluate a candidate: the first of its four rotations.
pub fn coverage_camera(vp: &Viewpoint, mesh: &Mesh, cfg: &RenderConfig) -> Result<Camera> {
    Ok(make_cameras(vp, mesh.bounding_sphere().radius, cfg)?[0])
}

/// Points referenced from a camera: sampled points that pass the depth test
/// and land on or next to an "on" pixel of the rendered binary image.
///
/// Associating each on-pixel with its nearest such point would lose points
/// that share a pixel with a neighbour, so every depth-passing point is kept.
pub fn referenced_points(mesh: &Mesh, points: &SampledPointSet, cam: &Camera) -> PointMask {
    let frame = Frame::new(cam);
    let zb = rasterize_faces(mesh, &frame);
    let (w, h) = (frame.width, frame.height);
    let radius = mesh.bounding_sphere().radius;

    let mut mask = PointMask::empty(points.len());
    for (k, p) in points.points.iter().enumerate() {
        let c = frame.to_camera(&p.position);
        if c.z < frame.near || c.z > frame.far {
            continue;
        }
        let (x, y) = frame.project(&c);
        let Some((i, j)) = frame.pixel_of(x, y) else {
            continue;
        };
        let rows = i.saturating_sub(1)..=(i + 1).min(h - 1);
        let cols = j.saturating_sub(1)..=(j + 1).min(w - 1);
        let mut own_face = false;
        let mut any_on = false;
        for ii in rows {
            for jj in cols.clone() {
                let f = zb.face[ii * w + jj];
                own_face |= f == p.face as i32;
                any_on |= f >= 0;
            }
        }
        // Slack for the point lying between pixel centres on a sloped face.
        let tol = 0.005 * radius + 2.0 * c.z / frame.focal;
        if own_face || (any_on && c.z <= zb.z[i * w + j] + tol) {
            mask.insert(k);
        }
    }
    mask
}

/// Fraction of the `uncovered` points referenced from the candidate.
pub fn estimate_coverage(
    candidate: &Viewpoint,
    points: &SampledPointSet,
    uncovered: &PointMask,
    mesh: &Mesh,
    cfg: &RenderConfig,
) -> Result<f64> {
    let remaining = uncovered.count();
    if remaining == 0 {
        return Ok(0.0);
    }
    let cam = coverage_camera(candidate, mesh, cfg)?;
    let referenced = referenced_points(mesh, points, &cam);
    Ok(referenced.intersection_count(uncovered) as f64 / remaining as f64)
}

/// Greedy per-scale selection. Ties go to the lowest candidate index.
pub fn greedy_select(
    candidates: &[Viewpoint],
    points: &SampledPointSet,
    mesh: &Mesh,
    select: &SelectConfig,
    render: &RenderConfig,
) -> Result<ViewpointSet> {
    let masks = candidates
        .par_iter()
        .map(|c| Ok(referenced_points(mesh, points, &coverage_camera(c, mesh, render)?)))
        .collect::<Result<Vec<_>>>()?;

    let n = points.len();
    let mut result = ViewpointSet::default();
    for (scale, fraction) in result.covered_fraction_per_scale.iter_mut().enumerate() {
        let pool: Vec<usize> = (0..candidates.len())
            .filter(|&c| candidates[c].scale_index == scale)
            .collect();
        let mut uncovered = PointMask::full(n);
        let mut picked = 0;
        while picked < select.max_per_scale {
            let covered = (n - uncovered.count()) as f64 / n as f64;
            if covered >= select.coverage_target {
                break;
            }
            let mut best: Option<(usize, usize)> = None;
            for &c in &pool {
                let gain = masks[c].intersection_count(&uncovered);
                if best.is_none_or(|(_, g)| gain > g) {
                    best = Some((c, gain));
                }
            }
            let Some((c, gain)) = best else { break };
            if gain == 0 {
                break;
            }
            let mut vp = candidates[c];
            vp.gain = gain;
            vp.coverage = gain as f64 / uncovered.count() as f64;
            result.selected.push(vp);
            uncovered.remove_all(&masks[c]);
            picked += 1;
        }
        *fraction = (n - uncovered.count()) as f64 / n as f64;
    }
    Ok(result)
}

/// The 20 vertices of a regular dodecahedron, unit length.
pub fn dodecahedron_directions() -> [Vec3; 20] {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let inv = 1.0 / phi;
    let mut dirs = Vec::with_capacity(20);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                dirs.push(Vec3::new(sx, sy, sz));
            }
        }
    }
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            dirs.push(Vec3::new(0.0, s1 * inv, s2 * phi));
            dirs.push(Vec3::new(s1 * inv, s2 * phi, 0.0));
            dirs.push(Vec3::new(s1 * phi, 0.0, s2 * inv));
        }
    }
    let mut out = [Vec3::zeros(); 20];
    for (o, d) in out.iter_mut().zip(dirs) {
        *o = d.normalize();
    }
    out
}

/// Fixed viewpoints on the vertices of a dodecahedron at 1.5 radii from the
/// bounding sphere centre, all looking at the centre. Coverage fields are
/// left at zero; the set is not coverage-driven.
pub fn fixed_dodecahedron_views(mesh: &Mesh) -> ViewpointSet {
    let sphere = mesh.bounding_sphere();
    let selected = dodecahedron_directions()
        .iter()
        .map(|d| Viewpoint {
            eye: sphere.center + d * (1.5 * sphere.radius),
            target: sphere.center,
            scale_index: 2,
            coverage: 0.0,
            gain: 0,
        })
        .collect();
    ViewpointSet {
        selected,
        covered_fraction_per_scale: [0.0; 3],
    }
}
