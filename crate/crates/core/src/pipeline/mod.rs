//! Dataset-level orchestration behind the command-line driver.
//!
//! Every stage reads the outputs of the previous one from a dataset root and
//! writes its own into a fixed subdirectory, together with an echo of the
//! effective configuration:
//!
//! ```text
//! dataset.json  meshes/  labels/         generate
//! views/NAME.json                        views
//! render/NAME/                           render
//! model/checkpoint.bin  model/loss.csv   train
//! predictions/NAME.{labels.txt,marginals.bin}   infer
//! export/NAME.ply                        export
//! ```
//!
//! Per-shape work runs on the rayon pool; every per-shape output depends
//! only on the shape and the configuration, so results do not depend on
//! scheduling.

mod config;
mod dataset;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{PipelineConfig, CONFIG_ECHO};
pub use dataset::{DatasetManifest, LoadedShape, ShapeEntry, Split, MANIFEST_FILE};

use crate::crf::{CrfParams, Marginals};
use crate::error::{Error, Result};
use crate::mesh::{build_pairwise_graph, read_labels, sample_surface, save_obj, write_labels, Mesh, PairwiseGraph};
use crate::net::NetworkSpec;
use crate::render::{render_views, save_views, ViewDirectory};
use crate::synth::{LabeledMesh, ShapeFamily, SyntheticShapeSpec};
use crate::train::{accuracy, infer, loss_csv, Checkpoint, Evaluation, ShapeResult, Trainer, TrainingShape};
use crate::view_select::{fixed_dodecahedron_views, generate_candidates, greedy_select, ViewpointSet};

pub const MESH_DIR: &str = "meshes";
pub const LABEL_DIR: &str = "labels";
pub const VIEWS_DIR: &str = "views";
pub const RENDER_DIR: &str = "render";
pub const MODEL_DIR: &str = "model";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const PREDICTION_DIR: &str = "predictions";
/// Predictions made without the CRF are kept apart so both can be compared.
pub const UNARY_PREDICTION_DIR: &str = "predictions_unary";
pub const EXPORT_DIR: &str = "export";

/// Sixteen maximally distinct colors; labels wrap around modulo 16.
pub const PALETTE: [[u8; 3]; 16] = [
    [0xF3, 0xC3, 0x00],
    [0x87, 0x56, 0x92],
    [0xF3, 0x84, 0x00],
    [0xA1, 0xCA, 0xF1],
    [0xBE, 0x00, 0x32],
    [0xC2, 0xB2, 0x80],
    [0x84, 0x84, 0x82],
    [0x00, 0x88, 0x56],
    [0xE6, 0x8F, 0xAC],
    [0x00, 0x67, 0xA5],
    [0xF9, 0x93, 0x79],
    [0x60, 0x4E, 0x97],
    [0xF6, 0xA6, 0x00],
    [0xB3, 0x44, 0x6C],
    [0xDC, 0xD3, 0x00],
    [0x88, 0x2D, 0x17],
];

pub fn label_color(label: usize) -> [u8; 3] {
    PALETTE[label % PALETTE.len()]
}

/// Derives an independent per-item seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Empties `dir` (if present) and recreates it.
fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    create_dir(dir)
}

fn shape_index(manifest: &DatasetManifest, name: &str) -> u64 {
    manifest.shapes.iter().position(|s| s.name == name).unwrap_or(0) as u64
}

/// Writes `count` procedural shapes of one family under `out` and splits
/// them into train and test with a seeded shuffle.
pub fn cmd_generate(family: ShapeFamily, count: usize, cfg: &PipelineConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidInput("nothing to generate".into()));
    }
    create_dir(&out.join(MESH_DIR))?;
    create_dir(&out.join(LABEL_DIR))?;
    let names: Vec<String> = (0..count).map(|i| format!("{}_{i:03}", family.name())).collect();
    names
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let shape = SyntheticShapeSpec::sample(family, derive_seed(cfg.seed, i as u64)).build()?;
            save_obj(&shape.mesh, out.join(MESH_DIR).join(format!("{name}.obj")))?;
            write_labels(&shape.labels, out.join(LABEL_DIR).join(format!("{name}.txt")))
        })
        .collect::<Result<()>>()?;

    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX)));
    let mut train_count = (count as f64 * cfg.train_fraction).round() as usize;
    if cfg.train_fraction < 1.0 && count > 1 {
        train_count = train_count.clamp(1, count - 1);
    }
    let mut split = vec![Split::Test; count];
    for &i in &order[..train_count.min(count)] {
        split[i] = Split::Train;
    }

    let manifest = DatasetManifest {
        label_names: family.label_names().iter().map(|s| s.to_string()).collect(),
        labels: family.label_count(),
        shapes: names
            .iter()
            .zip(split)
            .map(|(name, split)| ShapeEntry {
                name: name.clone(),
                mesh: PathBuf::from(MESH_DIR).join(format!("{name}.obj")),
                labels: PathBuf::from(LABEL_DIR).join(format!("{name}.txt")),
                category: family.name().to_string(),
                split,
            })
            .collect(),
    };
    manifest.save(out)?;
    cfg.echo(out)?;
    Ok(manifest)
}

/// Viewpoints for one mesh: greedy coverage selection, or the fixed
/// dodecahedron when `fixed_views` is set.
pub fn select_views(mesh: &Mesh, cfg: &PipelineConfig, seed: u64) -> Result<ViewpointSet> {
    if cfg.fixed_views {
        return Ok(fixed_dodecahedron_views(mesh));
    }
    let points = sample_surface(mesh, cfg.sample_points, seed)?;
    let candidates = generate_candidates(&points, &mesh.bounding_sphere())?;
    greedy_select(&candidates, &points, mesh, &cfg.select_config(), &cfg.render_config())
}

pub fn cmd_views(root: &Path, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(root)?;
    let dir = root.join(VIEWS_DIR);
    reset_dir(&dir)?;
    manifest
        .shapes
        .par_iter()
        .map(|s| {
            let mesh = crate::mesh::load_mesh(root.join(&s.mesh))?;
            let seed = derive_seed(cfg.seed, shape_index(&manifest, &s.name));
            select_views(&mesh, cfg, seed)?.save(dir.join(format!("{}.json", s.name)))
        })
        .collect::<Result<()>>()?;
    cfg.echo(&dir)
}

pub fn cmd_render(root: &Path, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(root)?;
    let dir = root.join(RENDER_DIR);
    reset_dir(&dir)?;
    manifest
        .shapes
        .par_iter()
        .map(|s| {
            let mesh = crate::mesh::load_mesh(root.join(&s.mesh))?;
            let vps = ViewpointSet::load(root.join(VIEWS_DIR).join(format!("{}.json", s.name)))?;
            let mut render = cfg.render_config();
            render.noise_seed = derive_seed(cfg.seed, shape_index(&manifest, &s.name));
            let views = render_views(&mesh, &vps, &render)?;
            save_views(&views, dir.join(&s.name))
        })
        .collect::<Result<()>>()?;
    cfg.echo(&dir)
}

/// Loads mesh, ground truth, CRF graph and rendered views of one shape and
/// checks the views against the configuration.
pub fn load_training_shape(root: &Path, entry: &ShapeEntry, cfg: &PipelineConfig) -> Result<TrainingShape> {
    let shape = entry.load(root)?;
    let views = ViewDirectory::open(root.join(RENDER_DIR).join(&entry.name))?;
    if views.resolution() != (cfg.width, cfg.height) {
        let (w, h) = views.resolution();
        return Err(Error::Config(format!(
            "{} was rendered at {w}x{h} but the configuration says {}x{}",
            entry.name, cfg.width, cfg.height
        )));
    }
    if views.channels() != cfg.input_channels() {
        return Err(Error::Config(format!(
            "{} was rendered with {} channels but the configuration expects {}",
            entry.name,
            views.channels(),
            cfg.input_channels()
        )));
    }
    Ok(TrainingShape {
        name: entry.name.clone(),
        category: entry.category.clone(),
        face_areas: shape.mesh.face_areas().to_vec(),
        graph: build_pairwise_graph(&shape.mesh, cfg.geodesic_cutoff),
        labels: shape.labels,
        views: Arc::new(views),
    })
}

fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: Option<Split>,
    cfg: &PipelineConfig,
) -> Result<Vec<TrainingShape>> {
    let entries: Vec<&ShapeEntry> = manifest.split(split).collect();
    entries.par_iter().map(|e| load_training_shape(root, e, cfg)).collect()
}

/// Trains on the train split and writes the checkpoint and loss log.
pub fn cmd_train(root: &Path, cfg: &PipelineConfig) -> Result<Trainer> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(root)?;
    let shapes = load_split(root, &manifest, Some(Split::Train), cfg)?;
    if shapes.is_empty() {
        return Err(Error::InvalidInput("dataset has no training shapes".into()));
    }
    let spec = NetworkSpec::reference(cfg.input_channels(), manifest.labels);
    let mut trainer = Trainer::new(&spec, cfg.train_config())?;
    trainer.train(&shapes)?;

    let dir = root.join(MODEL_DIR);
    reset_dir(&dir)?;
    trainer.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    let log = dir.join(LOSS_FILE);
    fs::write(&log, loss_csv(&trainer.log)).map_err(|e| Error::io(&log, e))?;
    cfg.echo(&dir)?;
    Ok(trainer)
}

pub fn prediction_dir(root: &Path, unary_only: bool) -> PathBuf {
    root.join(if unary_only {
        UNARY_PREDICTION_DIR
    } else {
        PREDICTION_DIR
    })
}

/// Labels the shapes of `split` (all shapes if `None`) with the trained
/// model. `unary_only` skips the pairwise terms.
pub fn cmd_infer(root: &Path, cfg: &PipelineConfig, split: Option<Split>, unary_only: bool) -> Result<()> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(root)?;
    let checkpoint = Checkpoint::load(root.join(MODEL_DIR).join(CHECKPOINT_FILE))?;
    let network = &checkpoint.network;
    if network.labels != manifest.labels {
        return Err(Error::Config(format!(
            "model predicts {} labels but the dataset has {}",
            network.labels, manifest.labels
        )));
    }
    if network.input_channels != cfg.input_channels() {
        return Err(Error::Config(format!(
            "model expects {} input channels but the configuration renders {}",
            network.input_channels,
            cfg.input_channels()
        )));
    }
    let crf = if unary_only {
        CrfParams::zeros(manifest.labels)
    } else {
        checkpoint.crf.clone()
    };
    let shapes = load_split(root, &manifest, split, cfg)?;
    let dir = prediction_dir(root, unary_only);
    reset_dir(&dir)?;
    shapes
        .par_iter()
        .map(|s| {
            let inf = infer(network, &crf, &cfg.mean_field_config(), s.views.as_ref(), &s.graph)?;
            write_labels(&inf.labels, dir.join(format!("{}.labels.txt", s.name)))?;
            inf.marginals.save(dir.join(format!("{}.marginals.bin", s.name)))
        })
        .collect::<Result<()>>()?;
    cfg.echo(&dir)
}

fn read_prediction(dir: &Path, name: &str, faces: usize) -> Result<Vec<usize>> {
    let path = dir.join(format!("{name}.labels.txt"));
    let labels = read_labels(&path)?;
    if labels.len() != faces {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} labels for {faces} faces",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Scores the stored predictions of `split` against the ground truth.
pub fn cmd_eval(root: &Path, split: Option<Split>, unary_only: bool) -> Result<Evaluation> {
    let manifest = DatasetManifest::load(root)?;
    let dir = prediction_dir(root, unary_only);
    let entries: Vec<&ShapeEntry> = manifest.split(split).collect();
    let results = entries
        .par_iter()
        .map(|e| {
            let shape = e.load(root)?;
            let predicted = read_prediction(&dir, &e.name, shape.mesh.face_count())?;
            Ok(ShapeResult {
                name: e.name.clone(),
                category: e.category.clone(),
                accuracy: accuracy(&predicted, &shape.labels, shape.mesh.face_areas())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_results(results)
}

/// ASCII PLY with one palette color per face.
pub fn write_ply(mesh: &Mesh, labels: &[usize], path: &Path) -> Result<()> {
    if labels.len() != mesh.face_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} faces",
            labels.len(),
            mesh.face_count()
        )));
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", mesh.vertices().len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str(&format!("element face {}\n", mesh.face_count()));
    out.push_str("property list uchar int vertex_indices\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for v in mesh.vertices() {
        out.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for (f, &l) in mesh.faces().iter().zip(labels) {
        let [r, g, b] = label_color(l);
        out.push_str(&format!("3 {} {} {} {r} {g} {b}\n", f[0], f[1], f[2]));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Exports every predicted shape (or the ground truth with `truth`) as a
/// colored PLY.
pub fn cmd_export(root: &Path, cfg: &PipelineConfig, truth: bool, unary_only: bool) -> Result<Vec<PathBuf>> {
    let manifest = DatasetManifest::load(root)?;
    let pred_dir = prediction_dir(root, unary_only);
    let entries: Vec<&ShapeEntry> = manifest
        .shapes
        .iter()
        .filter(|e| truth || pred_dir.join(format!("{}.labels.txt", e.name)).is_file())
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no predictions in {}; run infer first",
            pred_dir.display()
        )));
    }
    let dir = root.join(EXPORT_DIR);
    reset_dir(&dir)?;
    let paths = entries
        .par_iter()
        .map(|e| {
            let shape = e.load(root)?;
            let labels = if truth {
                shape.labels
            } else {
                read_prediction(&pred_dir, &e.name, shape.mesh.face_count())?
            };
            let path = dir.join(format!("{}.ply", e.name));
            write_ply(&shape.mesh, &labels, &path)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.echo(&dir)?;
    Ok(paths)
}

/// Loads a marginals file written by [`cmd_infer`].
pub fn read_marginals(root: &Path, name: &str, unary_only: bool) -> Result<Marginals> {
    Marginals::load(prediction_dir(root, unary_only).join(format!("{name}.marginals.bin")))
}

/// Builds a procedural shape and its training record entirely in memory,
/// bypassing the on-disk stages. Used by tests and benchmarks.
pub fn prepare_shape(family: ShapeFamily, seed: u64, cfg: &PipelineConfig) -> Result<(LabeledMesh, TrainingShape)> {
    let shape = SyntheticShapeSpec::sample(family, seed).build()?;
    let vps = select_views(&shape.mesh, cfg, seed)?;
    let mut render = cfg.render_config();
    render.noise_seed = derive_seed(cfg.seed, seed);
    let views = render_views(&shape.mesh, &vps, &render)?;
    let record = TrainingShape {
        name: format!("{}_{seed}", family.name()),
        category: family.name().to_string(),
        face_areas: shape.mesh.face_areas().to_vec(),
        graph: build_pairwise_graph(&shape.mesh, cfg.geodesic_cutoff),
        labels: shape.labels.clone(),
        views: Arc::new(views),
    };
    Ok((shape, record))
}

/// Number of connected regions of equal label, connecting faces through
/// shared edges.
pub fn label_components(graph: &PairwiseGraph, labels: &[usize]) -> usize {
    let mut parent: Vec<usize> = (0..graph.faces).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = graph.faces;
    for &(a, b, _) in &graph.adjacency_pairs {
        if labels[a] != labels[b] {
            continue;
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
            components -= 1;
        }
    }
    components
}
