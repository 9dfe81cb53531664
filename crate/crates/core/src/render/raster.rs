//! Z-buffered triangle rasterization shared by the renderer and the
//! coverage estimator.
//!
//! Pixel centres are expressed in coordinates centred on the image
//! (`j + 0.5 - W/2`, `H/2 - (i + 0.5)`), and coverage uses inclusive edge
//! tests. Both are symmetric under negation of the image-plane axes, so a
//! camera whose up vector is negated produces exactly the 180°-rotated
//! buffers.

use super::Camera;
use crate::mesh::{Mesh, Vec3};

/// Orthonormal camera frame plus projection constants.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Frame {
    pub eye: Vec3,
    pub look: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Frame {
    pub fn new(cam: &Camera) -> Frame {
        let (look, right, up) = cam.basis();
        Frame {
            eye: cam.eye,
            look,
            right,
            up,
            focal: (cam.height as f64 / 2.0) / (cam.fov_y / 2.0).tan(),
            width: cam.width,
            height: cam.height,
            near: cam.near,
            far: cam.far,
        }
    }

    /// Camera-space coordinates `(x, y, z)`, z along the look axis.
    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let d = p - self.eye;
        Vec3::new(d.dot(&self.right), d.dot(&self.up), d.dot(&self.look))
    }

    /// Centred image-plane position of pixel `(i, j)`.
    #[inline]
    pub fn pixel_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            j as f64 + 0.5 - self.width as f64 / 2.0,
            self.height as f64 / 2.0 - (i as f64 + 0.5),
        )
    }

    /// Direction of the ray through a centred image-plane position, scaled
    /// so that its component along the look axis is 1.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vec3 {
        self.look + self.right * (x / self.focal) + self.up * (y / self.focal)
    }

    /// Projects a camera-space point to centred image coordinates.
    #[inline]
    pub fn project(&self, c: &Vec3) -> (f64, f64) {
        (c.x / c.z * self.focal, c.y / c.z * self.focal)
    }

    /// Pixel containing a centred image-plane position, if inside the image.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let j = (x + self.width as f64 / 2.0).floor();
        let i = (self.height as f64 / 2.0 - y).floor();
        if j < 0.0 || i < 0.0 || j >= self.width as f64 || i >= self.height as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }
}

/// Eye-space depth and front-most face per pixel (`f64::INFINITY` / -1 for
/// background).
#[derive(Clone, Debug)]
pub(crate) struct ZBuffer {
    pub z: Vec<f64>,
    pub face: Vec<i32>,
}

pub(crate) fn rasterize_faces(mesh: &Mesh, frame: &Frame) -> ZBuffer {
    let (w, h) = (frame.width, frame.height);
    let mut zb = ZBuffer {
        z: vec![f64::INFINITY; w * h],
        face: vec![-1; w * h],
    };
    for (f, face) in mesh.faces().iter().enumerate() {
        let cam = face.map(|i| frame.to_camera(&mesh.vertices()[i]));
        if cam.iter().all(|c| c.z > frame.far) || cam.iter().all(|c| c.z < frame.near) {
            continue;
        }
        let poly = clip_near(&cam, frame.near);
        for k in 1..poly.len().saturating_sub(1) {
            raster_triangle(&mut zb, frame, [poly[0], poly[k], poly[k + 1]], f as i32);
        }
    }
    zb
}

/// Sutherland–Hodgman against the plane `z = near`.
fn clip_near(tri: &[Vec3; 3], near: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(4);
    for k in 0..3 {
        let a = tri[k];
        let b = tri[(k + 1) % 3];
        let a_in = a.z >= near;
        let b_in = b.z >= near;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (near - a.z) / (b.z - a.z);
            out.push(Vec3::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), near));
        }
    }
    out
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn raster_triangle(zb: &mut ZBuffer, frame: &Frame, tri: [Vec3; 3], id: i32) {
    let s = tri.map(|c| frame.project(&c));
    let inv_z = tri.map(|c| 1.0 / c.z);
    let area = edge(s[0], s[1], s[2]);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let (w, h) = (frame.width as f64, frame.height as f64);
    let xmin = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    // One pixel of slack on every side; the edge tests decide coverage.
    let j0 = ((xmin + w / 2.0 - 0.5).ceil() - 1.0).max(0.0);
    let j1 = ((xmax + w / 2.0 - 0.5).floor() + 1.0).min(w - 1.0);
    let i0 = ((h / 2.0 - 0.5 - ymax).ceil() - 1.0).max(0.0);
    let i1 = ((h / 2.0 - 0.5 - ymin).floor() + 1.0).min(h - 1.0);
    if j0 > j1 || i0 > i1 {
        return;
    }
    let sign = area.signum();
    for i in i0 as usize..=i1 as usize {
        for j in j0 as usize..=j1 as usize {
            let p = frame.pixel_center(i, j);
            let e0 = edge(s[1], s[2], p) * sign;
            let e1 = edge(s[2], s[0], p) * sign;
            let e2 = edge(s[0], s[1], p) * sign;
            if e0 < 0.0 || e1 < 0.0 || e2 < 0.0 {
                continue;
            }
            let a = area * sign;
            let iz = (e0 * inv_z[0] + e1 * inv_z[1] + e2 * inv_z[2]) / a;
            let z = 1.0 / iz;
            if !(z <= frame.far) {
                continue;
            }
            let idx = i * frame.width + j;
            let (cur_z, cur_f) = (zb.z[idx], zb.face[idx]);
            if z < cur_z || (z == cur_z && id < cur_f) {
                zb.z[idx] = z;
                zb.face[idx] = id;
            }
        }
    }
}
