//! On-disk dataset manifest. Paths inside the manifest are relative to the
//! dataset root so a dataset directory can be moved as a whole.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{load_mesh, read_labels, Mesh};

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub mesh: PathBuf,
    /// One label per polygon of the mesh file, in file order.
    pub labels: PathBuf,
    pub category: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label_names: Vec<String>,
    pub labels: usize,
    pub shapes: Vec<ShapeEntry>,
}

/// A mesh together with its per-face ground truth.
#[derive(Clone, Debug)]
pub struct LoadedShape {
    pub mesh: Mesh,
    pub labels: Vec<usize>,
}

impl DatasetManifest {
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest always serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads and validates the manifest: every referenced file exists, and
    /// every label file parses and stays within `0..labels`.
    pub fn load(root: impl AsRef<Path>) -> Result<DatasetManifest> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        manifest.validate(root)?;
        Ok(manifest)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.labels == 0 || self.label_names.len() != self.labels {
            return Err(Error::Config(format!(
                "manifest declares {} labels but names {}",
                self.labels,
                self.label_names.len()
            )));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.shapes {
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate shape name `{}`", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Config(format!(
                    "shape name `{}` is not a plain file stem",
                    s.name
                )));
            }
            let mesh = root.join(&s.mesh);
            if !mesh.is_file() {
                return Err(Error::io(
                    mesh,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "mesh listed in manifest is missing"),
                ));
            }
            let labels_path = root.join(&s.labels);
            let labels = read_labels(&labels_path)?;
            if let Some(l) = labels.iter().find(|&&l| l >= self.labels) {
                return Err(Error::InvalidInput(format!(
                    "{}: label {l} outside 0..{}",
                    labels_path.display(),
                    self.labels
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Option<Split>) -> impl Iterator<Item = &ShapeEntry> {
        self.shapes.iter().filter(move |s| split.is_none_or(|sp| s.split == sp))
    }

    pub fn entry(&self, name: &str) -> Option<&ShapeEntry> {
        self.shapes.iter().find(|s| s.name == name)
    }
}

impl ShapeEntry {
    /// Loads the mesh and maps the per-polygon labels onto the repaired
    /// triangle faces.
    pub fn load(&self, root: &Path) -> Result<LoadedShape> {
        let mesh = load_mesh(root.join(&self.mesh))?;
        let labels_path = root.join(&self.labels);
        let polygon_labels = read_labels(&labels_path)?;
        let labels = mesh
            .source_polygons()
            .iter()
            .map(|&p| {
                polygon_labels.get(p).copied().ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "{} has {} labels but the mesh references polygon {p}",
                        labels_path.display(),
                        polygon_labels.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedShape { mesh, labels })
    }
}
