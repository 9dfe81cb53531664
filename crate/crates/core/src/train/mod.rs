//! End-to-end training of the unary network and CRF weights with SGD and
//! momentum, and evaluation of trained models.

mod checkpoint;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{
    map_labeling, mean_field, surface_unary_gradient, surrogate_log_likelihood, weight_gradients, CrfParams, Marginals,
    MeanFieldConfig,
};
use crate::error::{Error, Result};
use crate::mesh::PairwiseGraph;
use crate::net::{Network, NetworkSpec, Tensor};
use crate::projection::{backward_project, ConfidenceStack, MaxAccumulator, SurfaceConfidences};
use crate::render::{RenderedView, ViewSource};

pub use checkpoint::{Checkpoint, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Network and CRF weights trained together through the CRF.
    Joint,
    /// Network trained with per-face softmax first, then frozen while the
    /// CRF weights are trained.
    Disjoint,
    /// No CRF: per-face softmax of the projected confidences.
    UnaryOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "disjoint" => Ok(TrainMode::Disjoint),
            "unary-only" | "unary_only" => Ok(TrainMode::UnaryOnly),
            other => Err(Error::Config(format!("unknown training mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// λ in the `λ‖θ‖²` penalty on network parameters.
    pub weight_decay: f64,
    pub views_per_step: usize,
    /// Largest global gradient norm (network and CRF together) applied in
    /// one step; longer gradients are rescaled. Zero disables clipping.
    pub clip_norm: f64,
    /// Upper bound of every CRF weight. When no pair of the training shapes
    /// crosses a part boundary the likelihood grows without bound in the
    /// smoothing weights, and strongly coupled synchronous mean-field sweeps
    /// oscillate instead of converging.
    pub crf_max_weight: f64,
    pub epochs: usize,
    /// Second-stage epochs for the CRF weights in disjoint mode.
    pub crf_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub mean_field: MeanFieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            views_per_step: 8,
            clip_norm: 30.0,
            crf_max_weight: 0.25,
            epochs: 10,
            crf_epochs: 2,
            seed: 0,
            mode: TrainMode::Joint,
            mean_field: MeanFieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be nonnegative".into()));
        }
        if !positive(self.crf_max_weight) {
            return Err(Error::Config("crf_max_weight must be positive".into()));
        }
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// One labelled shape with its pre-rendered views.
#[derive(Clone)]
pub struct TrainingShape {
    pub name: String,
    pub category: String,
    pub face_areas: Vec<f64>,
    pub graph: PairwiseGraph,
    pub labels: Vec<usize>,
    pub views: Arc<dyn ViewSource + Send>,
}

impl TrainingShape {
    pub fn faces(&self) -> usize {
        self.face_areas.len()
    }

    fn validate(&self, labels: usize) -> Result<()> {
        if self.labels.len() != self.faces() || self.graph.faces != self.faces() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} labels, {} face areas, graph over {} faces",
                self.name,
                self.labels.len(),
                self.faces(),
                self.graph.faces
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= labels) {
            return Err(Error::InvalidInput(format!(
                "{}: label {l} outside 0..{labels}",
                self.name
            )));
        }
        if self.views.is_empty() {
            return Err(Error::InvalidInput(format!("{} has no rendered views", self.name)));
        }
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    /// Per-face negative surrogate log-likelihood.
    pub nll: f64,
    /// `λ‖θ‖²` over the network parameters.
    pub reg: f64,
    /// Area-weighted accuracy of the step's labeling.
    pub accuracy: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("epoch,step,nll,reg,accuracy\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.nll, r.reg, r.accuracy));
    }
    out
}

/// Which parameter groups a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    /// Network through the CRF, CRF weights too.
    Joint,
    /// Network through per-face softmax; CRF untouched.
    UnaryOnly,
    /// CRF weights only; network frozen.
    CrfOnly,
}

/// SGD with momentum: `v ← μ v + g + 2λθ`, `θ ← θ − η v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f32], grads: &[f32], velocity: &mut [f32]) {
        let (lr, mu, decay) = (
            self.learning_rate as f32,
            self.momentum as f32,
            2.0 * self.weight_decay as f32,
        );
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            *v = mu * *v + *g + decay * *p;
            *p -= lr * *v;
        }
    }

    pub fn step_network(&self, net: &mut Network<f32>, grads: &Network<f32>, velocity: &mut Network<f32>) {
        for ((p, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(velocity.layers.iter_mut()) {
            self.step(&mut p.weight, &g.weight, &mut v.weight);
            self.step(&mut p.bias, &g.bias, &mut v.bias);
        }
    }

    /// CRF weights carry no decay and are clamped at zero afterwards.
    pub fn step_crf(&self, crf: &mut CrfParams, grads: &CrfParams, velocity: &mut CrfParams) {
        let g = grads.flat();
        for ((p, g), v) in crf.flat_mut().zip(g).zip(velocity.flat_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        crf.clamp_nonnegative();
    }
}

/// Rescales both gradients so their joint norm is at most `max_norm`;
/// returns the norm before rescaling.
pub fn clip_global_norm(net: &mut Option<Network<f32>>, crf: &mut Option<CrfParams>, max_norm: f64) -> f64 {
    let net_sq = net
        .as_ref()
        .map_or(0.0, |g| g.params().map(|v| (*v as f64).powi(2)).sum());
    let crf_sq: f64 = crf.as_ref().map_or(0.0, |g| g.flat().iter().map(|v| v * v).sum());
    let norm = (net_sq + crf_sq).sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        if let Some(g) = net {
            g.params_mut().for_each(|v| *v = (*v as f64 * k) as f32);
        }
        if let Some(g) = crf {
            g.flat_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Network input tensor of a rendered view.
pub fn view_input(view: &RenderedView) -> Result<Tensor<f32>> {
    Tensor::from_vec(view.height, view.width, view.channels(), view.input_hwc())
}

/// Area-weighted fraction of faces whose prediction equals the truth.
pub fn accuracy(predicted: &[usize], truth: &[usize], areas: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.len() != areas.len() {
        return Err(Error::ShapeMismatch(
            "prediction, truth and areas differ in length".into(),
        ));
    }
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("shape has no area".into()));
    }
    let hit: f64 = predicted
        .iter()
        .zip(truth)
        .zip(areas)
        .filter(|((p, t), _)| p == t)
        .map(|(_, a)| a)
        .sum();
    Ok(hit / total)
}

struct StepOutcome {
    record: LossRecord,
    net_grads: Option<Network<f32>>,
    crf_grads: Option<CrfParams>,
}

/// Trainer state: the checkpoint plus the loss log of this session.
pub struct Trainer {
    pub config: TrainConfig,
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(spec: &NetworkSpec, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let network = Network::init(spec, config.seed)?;
        let labels = spec.labels;
        let crf = match config.mode {
            TrainMode::UnaryOnly => CrfParams::zeros(labels),
            _ => CrfParams::new(labels),
        };
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7A1E);
        let checkpoint = Checkpoint {
            net_velocity: network.zeros_like(),
            network,
            crf,
            crf_velocity: CrfParams::zeros(labels),
            epoch: 0,
            step: 0,
            rng: RngState::capture(&rng),
        };
        Ok(Trainer {
            config,
            checkpoint,
            log: Vec::new(),
            rng,
        })
    }

    /// Resumes from a checkpoint; the RNG continues where it was saved.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let rng = checkpoint.rng.restore();
        Ok(Trainer {
            config,
            checkpoint,
            log: Vec::new(),
            rng,
        })
    }

    fn sgd(&self) -> Sgd {
        Sgd {
            learning_rate: self.config.learning_rate,
            momentum: self.config.momentum,
            weight_decay: self.config.weight_decay,
        }
    }

    /// Total epochs for the configured mode.
    pub fn total_epochs(&self) -> usize {
        match self.config.mode {
            TrainMode::Disjoint => self.config.epochs + self.config.crf_epochs,
            _ => self.config.epochs,
        }
    }

    fn phase_for_epoch(&self, epoch: usize) -> Phase {
        match self.config.mode {
            TrainMode::Joint => Phase::Joint,
            TrainMode::UnaryOnly => Phase::UnaryOnly,
            TrainMode::Disjoint if epoch < self.config.epochs => Phase::UnaryOnly,
            TrainMode::Disjoint => Phase::CrfOnly,
        }
    }

    /// Runs the remaining epochs over `shapes`, visiting them in a freshly
    /// shuffled order each epoch.
    pub fn train(&mut self, shapes: &[TrainingShape]) -> Result<()> {
        if shapes.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let labels = self.checkpoint.network.labels;
        for s in shapes {
            s.validate(labels)?;
        }
        while (self.checkpoint.epoch as usize) < self.total_epochs() {
            self.run_epoch(shapes)?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, shapes: &[TrainingShape]) -> Result<()> {
        let epoch = self.checkpoint.epoch as usize;
        let phase = self.phase_for_epoch(epoch);
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(&mut self.rng);
        for i in order {
            self.step(&shapes[i], phase)?;
        }
        self.checkpoint.epoch += 1;
        self.checkpoint.rng = RngState::capture(&self.rng);
        Ok(())
    }

    /// Draws the view subset for the next step.
    pub fn sample_views(&mut self, available: usize) -> Vec<usize> {
        let k = self.config.views_per_step.min(available);
        let mut picked = index::sample(&mut self.rng, available, k).into_vec();
        picked.sort_unstable();
        picked
    }

    fn step(&mut self, shape: &TrainingShape, phase: Phase) -> Result<()> {
        let views = self.sample_views(shape.views.len());
        let outcome = self.evaluate_step(shape, &views, phase)?;
        let sgd = self.sgd();
        let ck = &mut self.checkpoint;
        let mut outcome = outcome;
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut outcome.net_grads, &mut outcome.crf_grads, self.config.clip_norm);
        }
        if let Some(g) = &outcome.net_grads {
            sgd.step_network(&mut ck.network, g, &mut ck.net_velocity);
        }
        if let Some(g) = &outcome.crf_grads {
            sgd.step_crf(&mut ck.crf, g, &mut ck.crf_velocity);
            ck.crf.clamp_to(self.config.crf_max_weight);
        }
        ck.step += 1;
        self.log.push(LossRecord {
            epoch: ck.epoch as usize,
            step: ck.step,
            ..outcome.record
        });
        Ok(())
    }

    /// Loss and descent gradients for one shape and view subset at the
    /// current parameters, without updating anything.
    fn evaluate_step(&self, shape: &TrainingShape, views: &[usize], phase: Phase) -> Result<StepOutcome> {
        let net = &self.checkpoint.network;
        let faces = shape.faces();
        let loaded = views.iter().map(|&v| shape.views.load(v)).collect::<Result<Vec<_>>>()?;
        let first = loaded
            .first()
            .ok_or_else(|| Error::InvalidInput("no views selected".into()))?;
        let (h, w) = (first.height, first.width);
        let caches = loaded
            .par_iter()
            .map(|v| net.forward_cached(&view_input(v)?))
            .collect::<Result<Vec<_>>>()?;
        let mut stack = ConfidenceStack::new(h, w, net.labels);
        for (v, c) in loaded.iter().zip(&caches) {
            stack.push(&c.output().data, &v.reference)?;
        }
        let (surface, argmax) = crate::projection::project_max(&stack, faces)?;

        let crf = match phase {
            Phase::UnaryOnly => CrfParams::zeros(net.labels),
            _ => self.checkpoint.crf.clone(),
        };
        let q = mean_field(&surface, &shape.graph, &crf, &self.config.mean_field)?.marginals;
        let ll = surrogate_log_likelihood(&surface, &shape.graph, &crf, &q, &shape.labels)?;
        let scale = 1.0 / faces as f64;
        let predicted = map_labeling(&q);
        let record = LossRecord {
            epoch: self.checkpoint.epoch as usize,
            step: self.checkpoint.step,
            nll: -ll * scale,
            reg: self.config.weight_decay * net.squared_norm() as f64,
            accuracy: accuracy(&predicted, &shape.labels, &shape.face_areas)?,
        };

        let net_grads = if phase == Phase::CrfOnly {
            None
        } else {
            // Descent on the shape's negative log-likelihood.
            let mut g = surface_unary_gradient(&q, &shape.labels, &surface.observed)?;
            g.iter_mut().for_each(|v| *v = -*v);
            let pixel_grads = backward_project(&g, &argmax)?;
            let per_view = h * w * net.labels;
            let partial = caches
                .par_iter()
                .enumerate()
                .map(|(m, cache)| {
                    let mut grads = net.zeros_like();
                    let go =
                        Tensor::from_vec(h, w, net.labels, pixel_grads[m * per_view..(m + 1) * per_view].to_vec())?;
                    net.backward(cache, &go, &mut grads, false)?;
                    Ok(grads)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = net.zeros_like();
            for p in &partial {
                total.add_scaled(p, 1.0);
            }
            Some(total)
        };
        let crf_grads = if phase == Phase::UnaryOnly {
            None
        } else {
            let mut g = weight_gradients(&q, &shape.labels, &shape.graph, &crf)?;
            g.flat_mut().for_each(|v| *v = -*v);
            Some(g)
        };
        Ok(StepOutcome {
            record,
            net_grads,
            crf_grads,
        })
    }
}

/// Result of labeling one shape from all of its views.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub surface: SurfaceConfidences,
    pub marginals: Marginals,
    pub labels: Vec<usize>,
}

/// Runs the network over every view, pooling each into the surface
/// confidences as soon as it is computed, then runs mean-field inference.
pub fn infer(
    network: &Network<f32>,
    crf: &CrfParams,
    mean_field_cfg: &MeanFieldConfig,
    views: &dyn ViewSource,
    graph: &PairwiseGraph,
) -> Result<Inference> {
    if views.is_empty() {
        return Err(Error::InvalidInput("no views to label from".into()));
    }
    let first = views.load(0)?;
    let mut acc = MaxAccumulator::new(graph.faces, network.labels, first.height, first.width);
    for k in 0..views.len() {
        let view = if k == 0 { first.clone() } else { views.load(k)? };
        let out = network.forward(&view_input(&view)?)?;
        acc.add_view(&out.data, &view.reference)?;
    }
    let (surface, _) = acc.finish();
    let marginals = mean_field(&surface, graph, crf, mean_field_cfg)?.marginals;
    let labels = map_labeling(&marginals);
    Ok(Inference {
        surface,
        marginals,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeResult {
    pub name: String,
    pub category: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub shapes: Vec<ShapeResult>,
    /// Mean shape accuracy per category.
    pub per_category: BTreeMap<String, f64>,
    /// Mean over categories.
    pub category_average: f64,
    /// Mean over shapes.
    pub dataset_average: f64,
}

impl Evaluation {
    pub fn from_results(shapes: Vec<ShapeResult>) -> Result<Evaluation> {
        if shapes.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
        }
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &shapes {
            groups.entry(s.category.clone()).or_default().push(s.accuracy);
        }
        let per_category: BTreeMap<String, f64> = groups
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let category_average = per_category.values().sum::<f64>() / per_category.len() as f64;
        let dataset_average = shapes.iter().map(|s| s.accuracy).sum::<f64>() / shapes.len() as f64;
        Ok(Evaluation {
            shapes,
            per_category,
            category_average,
            dataset_average,
        })
    }

    /// Plain-text table: one line per category, then both averages.
    pub fn table(&self) -> String {
        let mut out = String::from("category          accuracy\n");
        for (k, v) in &self.per_category {
            out.push_str(&format!("{k:<16}  {v:.3}\n"));
        }
        out.push_str(&format!("{:<16}  {:.3}\n", "category avg", self.category_average));
        out.push_str(&format!("{:<16}  {:.3}\n", "dataset avg", self.dataset_average));
        out
    }
}

/// Labels every shape from all of its views and scores it.
pub fn evaluate(
    network: &Network<f32>,
    crf: &CrfParams,
    mean_field_cfg: &MeanFieldConfig,
    shapes: &[TrainingShape],
) -> Result<Evaluation> {
    if shapes.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let results = shapes
        .par_iter()
        .map(|s| {
            s.validate(network.labels)?;
            let inf = infer(network, crf, mean_field_cfg, s.views.as_ref(), &s.graph)?;
            Ok(ShapeResult {
                name: s.name.clone(),
                category: s.category.clone(),
                accuracy: accuracy(&inf.labels, &s.labels, &s.face_areas)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_results(results)
}

#[cfg(test)]
mod tests;
