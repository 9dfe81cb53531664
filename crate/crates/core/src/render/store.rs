//! On-disk layout of a rendered shape: one directory holding 16-bit
//! grayscale PNGs for the shaded, depth and height channels, raw
//! little-endian `i32` reference images and a plain-text manifest with the
//! camera of every view.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use image::{ImageBuffer, Luma};

use super::{Camera, RenderedView};
use crate::error::{Error, Result};
use crate::mesh::Vec3;

const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "projseg-views 1";

/// Anything that can hand out rendered views by index.
pub trait ViewSource: Sync {
    fn len(&self) -> usize;

    fn load(&self, index: usize) -> Result<RenderedView>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ViewSource for Vec<RenderedView> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<RenderedView> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("view {index} out of range")))
    }
}

fn quantize(v: &[f32]) -> Vec<u16> {
    v.iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect()
}

fn write_png(path: &Path, w: usize, h: usize, data: &[f32]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, quantize(data))
        .ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_png(path: &Path, w: usize, h: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_luma16();
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::ShapeMismatch(format!("{} is not {w}x{h}", path.display())));
    }
    Ok(img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
}

fn fmt_vec(v: &Vec3) -> String {
    format!("{} {} {}", v.x, v.y, v.z)
}

/// Writes `views` into `dir` (created if needed), replacing any manifest.
pub fn save_views(views: &[RenderedView], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidInput("no views to save".into()))?;
    let (w, h, c) = (first.width, first.height, first.channels());
    let mut manifest = format!("{HEADER}\nwidth {w}\nheight {h}\nchannels {c}\n");
    for (k, v) in views.iter().enumerate() {
        if v.width != w || v.height != h || v.channels() != c {
            return Err(Error::ShapeMismatch(
                "views of one shape must share size and channels".into(),
            ));
        }
        write_png(&dir.join(format!("shaded_{k:04}.png")), w, h, &v.shaded)?;
        write_png(&dir.join(format!("depth_{k:04}.png")), w, h, &v.depth)?;
        if let Some(hm) = &v.height_map {
            write_png(&dir.join(format!("height_{k:04}.png")), w, h, hm)?;
        }
        let mut raw = vec![0u8; v.reference.len() * 4];
        LittleEndian::write_i32_into(&v.reference, &mut raw);
        let ref_path = dir.join(format!("ref_{k:04}.bin"));
        fs::write(&ref_path, raw).map_err(|e| Error::io(&ref_path, e))?;
        let cam = &v.camera;
        manifest.push_str(&format!(
            "view {} eye {} target {} up {} fov_y {} near {} far {}\n",
            v.view_id,
            fmt_vec(&cam.eye),
            fmt_vec(&cam.target),
            fmt_vec(&cam.up),
            cam.fov_y,
            cam.near,
            cam.far
        ));
    }
    let path = dir.join(MANIFEST);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Lazily loaded view directory written by [`save_views`].
#[derive(Clone, Debug)]
pub struct ViewDirectory {
    dir: PathBuf,
    width: usize,
    height: usize,
    channels: usize,
    cameras: Vec<(usize, Camera)>,
}

impl ViewDirectory {
    pub fn open(dir: impl AsRef<Path>) -> Result<ViewDirectory> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::parse(&path, "missing view manifest header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::parse(&path, format!("expected `{name} <n>`, got `{line}`")))
        };
        let width = field("width")?;
        let height = field("height")?;
        let channels = field("channels")?;
        let mut cameras = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::parse(&path, format!("bad view line `{line}`"));
            if tok.len() != 20 || tok[0] != "view" {
                return Err(bad());
            }
            let num = |i: usize| tok[i].parse::<f64>().map_err(|_| bad());
            let vec = |i: usize| -> Result<Vec3> { Ok(Vec3::new(num(i)?, num(i + 1)?, num(i + 2)?)) };
            let id = tok[1].parse::<usize>().map_err(|_| bad())?;
            let camera = Camera {
                eye: vec(3)?,
                target: vec(7)?,
                up: vec(11)?,
                fov_y: num(15)?,
                width,
                height,
                near: num(17)?,
                far: num(19)?,
            };
            cameras.push((id, camera));
        }
        Ok(ViewDirectory {
            dir,
            width,
            height,
            channels,
            cameras,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn load_all(&self) -> Result<Vec<RenderedView>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

impl ViewSource for ViewDirectory {
    fn len(&self) -> usize {
        self.cameras.len()
    }

    fn load(&self, k: usize) -> Result<RenderedView> {
        let (view_id, camera) = *self
            .cameras
            .get(k)
            .ok_or_else(|| Error::InvalidInput(format!("view {k} out of range")))?;
        let (w, h) = (self.width, self.height);
        let shaded = read_png(&self.dir.join(format!("shaded_{k:04}.png")), w, h)?;
        let depth = read_png(&self.dir.join(format!("depth_{k:04}.png")), w, h)?;
        let height_map = if self.channels == 3 {
            Some(read_png(&self.dir.join(format!("height_{k:04}.png")), w, h)?)
        } else {
            None
        };
        let ref_path = self.dir.join(format!("ref_{k:04}.bin"));
        let raw = fs::read(&ref_path).map_err(|e| Error::io(&ref_path, e))?;
        if raw.len() != w * h * 4 {
            return Err(Error::ShapeMismatch(format!("{} has wrong size", ref_path.display())));
        }
        let mut reference = vec![0i32; w * h];
        LittleEndian::read_i32_into(&raw, &mut reference);
        Ok(RenderedView {
            view_id,
            camera,
            width: w,
            height: h,
            shaded,
            depth,
            reference,
            height_map,
        })
    }
}
