//! Procedural shape families with exact per-face part labels.
//!
//! Shapes are assembled from tessellated primitives (boxes, open cylinders,
//! disks, torus segments); every primitive carries its part label, so the
//! ground truth is known by construction. All families are generated upright
//! along +Y with a random rotation about that axis.

use std::f64::consts::TAU;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Table,
    Mug,
    Chair,
}

impl ShapeFamily {
    pub fn label_names(self) -> &'static [&'static str] {
        match self {
            ShapeFamily::Table => &["top", "leg"],
            ShapeFamily::Mug => &["body", "handle"],
            ShapeFamily::Chair => &["seat", "leg", "back"],
        }
    }

    pub fn label_count(self) -> usize {
        self.label_names().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Table => "table",
            ShapeFamily::Mug => "mug",
            ShapeFamily::Chair => "chair",
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ShapeFamily::Table),
            "mug" => Ok(ShapeFamily::Mug),
            "chair" | "chair-like" => Ok(ShapeFamily::Chair),
            _ => Err(Error::InvalidInput(format!("unknown shape family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Proportions {
    Table {
        width: f64,
        depth: f64,
        height: f64,
        top_thickness: f64,
        leg_thickness: f64,
        leg_inset: f64,
    },
    Mug {
        radius: f64,
        height: f64,
        handle_radius: f64,
        handle_thickness: f64,
    },
    Chair {
        seat_width: f64,
        seat_depth: f64,
        seat_height: f64,
        seat_thickness: f64,
        leg_thickness: f64,
        back_height: f64,
        back_thickness: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    pub seed: u64,
    /// Number of distinct parts (legs for tables and chairs; a mug always
    /// has one body and one handle).
    pub part_count: usize,
    pub proportions: Proportions,
    /// Rotation about +Y, radians.
    pub yaw: f64,
    /// Target tessellation edge length.
    pub edge_length: f64,
}

#[derive(Clone, Debug)]
pub struct LabeledMesh {
    pub mesh: Mesh,
    pub labels: Vec<usize>,
}

impl SyntheticShapeSpec {
    /// Draws randomized proportions for a family from `seed`.
    pub fn sample(family: ShapeFamily, seed: u64) -> SyntheticShapeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A9E);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let (proportions, part_count) = match family {
            ShapeFamily::Table => (
                Proportions::Table {
                    width: u(1.6, 2.4),
                    depth: u(0.9, 1.4),
                    height: u(0.8, 1.2),
                    top_thickness: u(0.08, 0.14),
                    leg_thickness: u(0.08, 0.14),
                    leg_inset: u(0.03, 0.15),
                },
                4,
            ),
            ShapeFamily::Mug => (
                Proportions::Mug {
                    radius: u(0.4, 0.6),
                    height: u(0.8, 1.3),
                    handle_radius: u(0.25, 0.35),
                    handle_thickness: u(0.05, 0.09),
                },
                2,
            ),
            ShapeFamily::Chair => (
                Proportions::Chair {
                    seat_width: u(0.9, 1.2),
                    seat_depth: u(0.9, 1.2),
                    seat_height: u(0.8, 1.1),
                    seat_thickness: u(0.08, 0.14),
                    leg_thickness: u(0.07, 0.12),
                    back_height: u(0.7, 1.1),
                    back_thickness: u(0.07, 0.12),
                },
                4,
            ),
        };
        let yaw = u(0.0, TAU);
        SyntheticShapeSpec {
            family,
            seed,
            part_count,
            proportions,
            yaw,
            edge_length: 0.1,
        }
    }

    pub fn build(&self) -> Result<LabeledMesh> {
        let mut b = Builder::new(self.edge_length);
        match self.proportions {
            Proportions::Table {
                width,
                depth,
                height,
                top_thickness,
                leg_thickness,
                leg_inset,
            } => {
                let (hw, hd) = (width / 2.0, depth / 2.0);
                b.cuboid(
                    Vec3::new(-hw, height - top_thickness, -hd),
                    Vec3::new(hw, height, hd),
                    0,
                    false,
                );
                b.legs(hw, hd, leg_inset, leg_thickness, height - top_thickness / 2.0, 1);
            }
            Proportions::Mug {
                radius,
                height,
                handle_radius,
                handle_thickness,
            } => {
                let segments = ((TAU * radius) / self.edge_length).ceil().max(12.0) as usize;
                b.open_cylinder(radius, height, segments, 0);
                b.disk(radius, segments, 0);
                // Handle ends sink halfway into the wall.
                let end = (-0.5 * handle_thickness / handle_radius).clamp(-1.0, 1.0).acos();
                b.torus_segment(
                    Vec3::new(radius, height / 2.0, 0.0),
                    handle_radius,
                    handle_thickness,
                    -end,
                    end,
                    1,
                );
            }
            Proportions::Chair {
                seat_width,
                seat_depth,
                seat_height,
                seat_thickness,
                leg_thickness,
                back_height,
                back_thickness,
            } => {
                let (hw, hd) = (seat_width / 2.0, seat_depth / 2.0);
                b.cuboid(
                    Vec3::new(-hw, seat_height - seat_thickness, -hd),
                    Vec3::new(hw, seat_height, hd),
                    0,
                    false,
                );
                b.legs(hw, hd, 0.02, leg_thickness, seat_height - seat_thickness / 2.0, 1);
                b.cuboid(
                    Vec3::new(-hw, seat_height - seat_thickness / 2.0, -hd),
                    Vec3::new(hw, seat_height + back_height, -hd + back_thickness),
                    2,
                    false,
                );
            }
        }
        let rot = Rotation3::from_axis_angle(&Vec3::y_axis(), self.yaw);
        let vertices = b.vertices.iter().map(|v| rot * v).collect();
        let polygons: Vec<Vec<usize>> = b.triangles.iter().map(|t| t.to_vec()).collect();
        let mesh = Mesh::from_polygons(vertices, &polygons)?;
        let labels = mesh.source_polygons().iter().map(|&p| b.labels[p]).collect();
        Ok(LabeledMesh { mesh, labels })
    }
}

struct Builder {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    labels: Vec<usize>,
    edge: f64,
}

impl Builder {
    fn new(edge: f64) -> Self {
        Builder {
            vertices: Vec::new(),
            triangles: Vec::new(),
            labels: Vec::new(),
            edge,
        }
    }

    fn divisions(&self, length: f64) -> usize {
        (length / self.edge).ceil().max(1.0) as usize
    }

    /// Parametric patch `point(s, t)` on a `nu × nv` grid, wound so that the
    /// normal follows `∂s × ∂t`.
    fn patch(&mut self, nu: usize, nv: usize, label: usize, point: impl Fn(f64, f64) -> Vec3) {
        let base = self.vertices.len();
        for j in 0..=nv {
            for i in 0..=nu {
                self.vertices.push(point(i as f64 / nu as f64, j as f64 / nv as f64));
            }
        }
        let idx = |i: usize, j: usize| base + j * (nu + 1) + i;
        for j in 0..nv {
            for i in 0..nu {
                self.triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                self.triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
                self.labels.extend([label, label]);
            }
        }
    }

    fn rect(&mut self, origin: Vec3, u: Vec3, v: Vec3, label: usize) {
        let (nu, nv) = (self.divisions(u.norm()), self.divisions(v.norm()));
        self.patch(nu, nv, label, |s, t| origin + u * s + v * t);
    }

    fn cuboid(&mut self, lo: Vec3, hi: Vec3, label: usize, open_top: bool) {
        let d = hi - lo;
        let (x, y, z) = (Vec3::x() * d.x, Vec3::y() * d.y, Vec3::z() * d.z);
        self.rect(lo, z, x, label); // bottom, -y
        if !open_top {
            self.rect(lo + y, x, z, label); // top, +y
        }
        self.rect(lo, x, y, label); // -z
        self.rect(lo + z, y, x, label); // +z
        self.rect(lo, y, z, label); // -x
        self.rect(lo + x, z, y, label); // +x
    }

    /// Four legs under a rectangle of half extents `(hw, hd)`, from the floor
    /// up to `top`.
    fn legs(&mut self, hw: f64, hd: f64, inset: f64, thickness: f64, top: f64, label: usize) {
        for sx in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let cx = sx * (hw - inset - thickness / 2.0);
                let cz = sz * (hd - inset - thickness / 2.0);
                let h = thickness / 2.0;
                self.cuboid(
                    Vec3::new(cx - h, 0.0, cz - h),
                    Vec3::new(cx + h, top, cz + h),
                    label,
                    true,
                );
            }
        }
    }

    fn open_cylinder(&mut self, radius: f64, height: f64, segments: usize, label: usize) {
        let rings = self.divisions(height);
        self.patch(segments, rings, label, |s, t| {
            let a = -s * TAU;
            Vec3::new(radius * a.cos(), t * height, radius * a.sin())
        });
    }

    /// Disk at y = 0 facing -Y, tessellated as concentric rings.
    fn disk(&mut self, radius: f64, segments: usize, label: usize) {
        let rings = self.divisions(radius).max(2);
        let center = self.vertices.len();
        self.vertices.push(Vec3::zeros());
        let ring_start = |r: usize| center + 1 + (r - 1) * segments;
        for r in 1..=rings {
            let rr = radius * r as f64 / rings as f64;
            for s in 0..segments {
                let a = s as f64 / segments as f64 * TAU;
                self.vertices.push(Vec3::new(rr * a.cos(), 0.0, rr * a.sin()));
            }
        }
        for s in 0..segments {
            let s1 = (s + 1) % segments;
            self.triangles.push([center, ring_start(1) + s, ring_start(1) + s1]);
            self.labels.push(label);
        }
        for r in 1..rings {
            let (a0, b0) = (ring_start(r), ring_start(r + 1));
            for s in 0..segments {
                let s1 = (s + 1) % segments;
                self.triangles.push([a0 + s, b0 + s, b0 + s1]);
                self.triangles.push([a0 + s, b0 + s1, a0 + s1]);
                self.labels.extend([label, label]);
            }
        }
    }

    /// Tube of radius `thickness` along a circular arc of radius `major` in
    /// the XY plane around `center`, from angle `a0` to `a1` (0 = +X).
    fn torus_segment(&mut self, center: Vec3, major: f64, thickness: f64, a0: f64, a1: f64, label: usize) {
        let along = self.divisions(major * (a1 - a0));
        let around = ((TAU * thickness) / self.edge).ceil().max(8.0) as usize;
        self.patch(around, along, label, |s, t| {
            let a = a0 + (a1 - a0) * t;
            let b = s * TAU;
            let radial = Vec3::new(a.cos(), a.sin(), 0.0);
            center + radial * (major + thickness * b.cos()) + Vec3::z() * (thickness * b.sin())
        });
    }
}

/// Unit-radius icosphere with `subdivisions` rounds of 4-way splitting.
pub fn icosphere(subdivisions: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let polys: Vec<Vec<usize>> = faces.iter().map(|f| f.to_vec()).collect();
    Mesh::from_polygons(vertices, &polys).expect("icosphere is valid")
}

/// Axis-aligned box with the given extents centred at the origin,
/// tessellated to roughly `edge` sized cells.
pub fn box_mesh(extents: Vec3, edge: f64) -> Mesh {
    let mut b = Builder::new(edge);
    b.cuboid(-extents / 2.0, extents / 2.0, 0, false);
    let polys: Vec<Vec<usize>> = b.triangles.iter().map(|t| t.to_vec()).collect();
    Mesh::from_polygons(b.vertices, &polys).expect("box is valid")
}

/// Volume-like sanity number used by tests: the solid angle check in
/// [`icosphere`] tests relies on it being close to 4π/3 for a unit sphere.
#[cfg(test)]
fn enclosed_volume(mesh: &Mesh) -> f64 {
    mesh.faces()
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices()[i]);
            a.dot(&b.cross(&c)) / 6.0
        })
        .sum()
}
