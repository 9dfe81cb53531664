//! Software renderer: shaded, depth, optional height and polygon-ID
//! ("surface reference") images for a camera, plus the four in-plane
//! rotations rendered per viewpoint.

mod raster;
mod store;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::view_select::{Viewpoint, ViewpointSet};

pub(crate) use raster::{rasterize_faces, Frame};
pub use store::{save_views, ViewDirectory, ViewSource};

/// Phong constants for a single white headlight placed at the eye.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phong {
    pub ambient: f64,
    pub diffuse: f64,
    pub specular: f64,
    pub shininess: i32,
}

impl Default for Phong {
    fn default() -> Self {
        Phong {
            ambient: 0.1,
            diffuse: 0.6,
            specular: 0.3,
            shininess: 32,
        }
    }
}

/// Individual reflection terms at a surface point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhongTerms {
    pub ambient: f64,
    pub diffuse: f64,
    pub specular: f64,
}

impl PhongTerms {
    pub fn total(&self) -> f64 {
        (self.ambient + self.diffuse + self.specular).clamp(0.0, 1.0)
    }
}

impl Phong {
    /// Reflection terms for unit normal `n`, unit direction to the light `l`
    /// and unit direction to the viewer `v`.
    pub fn terms(&self, n: &Vec3, l: &Vec3, v: &Vec3) -> PhongTerms {
        let ndl = n.dot(l);
        let r = n * (2.0 * ndl) - l;
        PhongTerms {
            ambient: self.ambient,
            diffuse: self.diffuse * ndl.max(0.0),
            specular: self.specular * r.dot(v).max(0.0).powi(self.shininess),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    /// Near and far planes as multiples of the bounding sphere radius.
    pub near_factor: f64,
    pub far_factor: f64,
    /// Reference pixels within this Chebyshev radius of background or of a
    /// depth discontinuity are dropped.
    pub silhouette_radius: usize,
    pub silhouette_depth_jump: f32,
    pub upright_height: bool,
    /// Standard deviation of Gaussian noise added to the shaded and depth
    /// channels of foreground pixels (0 disables).
    pub input_noise: f32,
    pub noise_seed: u64,
    pub phong: Phong,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 128,
            height: 128,
            fov_y: 90f64.to_radians(),
            near_factor: 0.05,
            far_factor: 4.0,
            silhouette_radius: 2,
            silhouette_depth_jump: 0.05,
            upright_height: false,
            input_noise: 0.0,
            noise_seed: 0,
            phong: Phong::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        (width, height): (usize, usize),
        near: f64,
        far: f64,
    ) -> Result<Camera> {
        let cam = Camera {
            eye,
            target,
            up,
            fov_y,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let look = self.target - self.eye;
        if look.norm() <= f64::EPSILON * (1.0 + self.eye.norm()) {
            return Err(Error::InvalidInput("degenerate camera: eye equals target".into()));
        }
        let up = self.up - look.normalize() * self.up.dot(&look.normalize());
        if up.norm() < 1e-9 {
            return Err(Error::InvalidInput(
                "camera up vector is parallel to the look axis".into(),
            ));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidInput(format!(
                "invalid clip planes near={} far={}",
                self.near, self.far
            )));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("invalid field of view or resolution".into()));
        }
        Ok(())
    }

    /// `(look, right, up)`: unit look direction, and the up vector
    /// orthogonalised against it.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let look = (self.target - self.eye).normalize();
        let up = (self.up - look * self.up.dot(&look)).normalize();
        let right = look.cross(&up);
        (look, right, up)
    }
}

/// The initial up vector for a look direction: world +Y projected off the
/// look axis, or +X when the two are parallel.
pub fn initial_up(look: &Vec3) -> Vec3 {
    let project = |a: Vec3| a - look * a.dot(look);
    let up = project(Vec3::y());
    if up.norm() > 1e-6 {
        up.normalize()
    } else {
        project(Vec3::x()).normalize()
    }
}

/// Four cameras sharing eye and target with the up vector rotated by 0°,
/// 90°, 180° and 270° about the look axis.
pub fn make_cameras(vp: &Viewpoint, radius: f64, cfg: &RenderConfig) -> Result<[Camera; 4]> {
    let d = vp.target - vp.eye;
    if d.norm() == 0.0 {
        return Err(Error::InvalidInput("degenerate camera: eye equals target".into()));
    }
    let look = d.normalize();
    let up0 = initial_up(&look);
    let up1 = look.cross(&up0);
    let ups = [up0, up1, -up0, -up1];
    let mut cams = [Camera {
        eye: vp.eye,
        target: vp.target,
        up: up0,
        fov_y: cfg.fov_y,
        width: cfg.width,
        height: cfg.height,
        near: cfg.near_factor * radius,
        far: cfg.far_factor * radius,
    }; 4];
    for (cam, up) in cams.iter_mut().zip(ups) {
        cam.up = up;
        cam.validate()?;
    }
    Ok(cams)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub view_id: usize,
    pub camera: Camera,
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width` grids.
    pub shaded: Vec<f32>,
    pub depth: Vec<f32>,
    pub reference: Vec<i32>,
    pub height_map: Option<Vec<f32>>,
}

impl RenderedView {
    pub fn channels(&self) -> usize {
        if self.height_map.is_some() {
            3
        } else {
            2
        }
    }

    /// Interleaved `H × W × C` network input: shaded, depth and, when
    /// present, height.
    pub fn input_hwc(&self) -> Vec<f32> {
        let c = self.channels();
        let mut out = Vec::with_capacity(self.shaded.len() * c);
        for p in 0..self.shaded.len() {
            out.push(self.shaded[p]);
            out.push(self.depth[p]);
            if let Some(h) = &self.height_map {
                out.push(h[p]);
            }
        }
        out
    }
}

/// Renders one camera. `view_id` is carried into the output and seeds the
/// optional input noise.
pub fn rasterize(mesh: &Mesh, cam: &Camera, cfg: &RenderConfig, view_id: usize) -> Result<RenderedView> {
    cam.validate()?;
    let frame = Frame::new(cam);
    let zb = rasterize_faces(mesh, &frame);
    let (w, h) = (cam.width, cam.height);
    let n = w * h;

    let mut shaded = vec![0.0f32; n];
    let mut depth = vec![1.0f32; n];
    let mut height_map = cfg.upright_height.then(|| vec![0.0f32; n]);
    let (lo, hi) = mesh.bounds();
    let extent = (hi.y - lo.y).max(f64::MIN_POSITIVE);

    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let f = zb.face[idx];
            if f < 0 {
                continue;
            }
            let z = zb.z[idx];
            depth[idx] = (((z - frame.near) / (frame.far - frame.near)).clamp(0.0, 1.0)) as f32;
            let (x, y) = frame.pixel_center(i, j);
            let ray = frame.ray(x, y);
            let v = -ray.normalize();
            let mut normal = mesh.face_normals()[f as usize];
            if normal.dot(&v) < 0.0 {
                normal = -normal;
            }
            shaded[idx] = cfg.phong.terms(&normal, &v, &v).total() as f32;
            if let Some(hm) = height_map.as_mut() {
                let world = frame.eye + ray * z;
                hm[idx] = ((world.y - lo.y) / extent).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let reference = drop_silhouette(&zb.face, &depth, w, h, cfg.silhouette_radius, cfg.silhouette_depth_jump);

    if cfg.input_noise > 0.0 {
        let seed = cfg.noise_seed ^ (view_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, cfg.input_noise).map_err(|e| Error::Config(format!("input noise: {e}")))?;
        for idx in 0..n {
            if zb.face[idx] >= 0 {
                shaded[idx] = (shaded[idx] + normal.sample(&mut rng)).clamp(0.0, 1.0);
                depth[idx] = (depth[idx] + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    Ok(RenderedView {
        view_id,
        camera: *cam,
        width: w,
        height: h,
        shaded,
        depth,
        reference,
        height_map,
    })
}

/// Removes references at and near the silhouette: a pixel keeps its face ID
/// only if every pixel within `radius` (Chebyshev) is foreground and within
/// `jump` in normalised depth.
fn drop_silhouette(face: &[i32], depth: &[f32], w: usize, h: usize, radius: usize, jump: f32) -> Vec<i32> {
    let mut out = face.to_vec();
    let r = radius as isize;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = (i as usize) * w + j as usize;
            if face[idx] < 0 {
                continue;
            }
            let d = depth[idx];
            'scan: for di in -r..=r {
                for dj in -r..=r {
                    let (ii, jj) = (i + di, j + dj);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    let k = ii as usize * w + jj as usize;
                    if face[k] < 0 || (depth[k] - d).abs() > jump {
                        out[idx] = -1;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Renders the four in-plane rotations of every selected viewpoint. View
/// `4k + r` is rotation `r` of viewpoint `k`.
pub fn render_views(mesh: &Mesh, vps: &ViewpointSet, cfg: &RenderConfig) -> Result<Vec<RenderedView>> {
    let radius = mesh.bounding_sphere().radius;
    let cameras = vps
        .selected
        .iter()
        .map(|vp| make_cameras(vp, radius, cfg))
        .collect::<Result<Vec<_>>>()?;
    cameras
        .into_iter()
        .flatten()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(id, cam)| rasterize(mesh, &cam, cfg, id))
        .collect()
}
