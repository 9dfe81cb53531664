//! Surface CRF over face labels: unary factors from projected confidences,
//! dihedral-angle and geodesic-distance pairwise factors, damped mean-field
//! inference, and gradients of the mean-field surrogate log-likelihood.
//!
//! Log pairwise factors for a pair with normalised measure `s` (dihedral
//! angle or geodesic distance) are `−w_kind · w_label(l, l') · s²` when the
//! labels agree and `−w_kind · w_label(l, l') · (1 − s²)` otherwise.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::PairwiseGraph;
use crate::projection::{backward_project, ArgmaxIndex, SurfaceConfidences};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub labels: usize,
    pub w_adj: f64,
    pub w_dist: f64,
    /// Symmetric `L × L`, shared by both pair kinds.
    pub w_label: Vec<f64>,
}

impl CrfParams {
    /// Every weight 1.
    pub fn new(labels: usize) -> Self {
        CrfParams {
            labels,
            w_adj: 1.0,
            w_dist: 1.0,
            w_label: vec![1.0; labels * labels],
        }
    }

    /// Every weight 0: the CRF reduces to independent per-face softmaxes.
    pub fn zeros(labels: usize) -> Self {
        CrfParams {
            labels,
            w_adj: 0.0,
            w_dist: 0.0,
            w_label: vec![0.0; labels * labels],
        }
    }

    pub fn label_weight(&self, a: usize, b: usize) -> f64 {
        self.w_label[a * self.labels + b]
    }

    pub fn kind_weight(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::Adjacency => self.w_adj,
            PairKind::Distance => self.w_dist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labels;
        if self.w_label.len() != l * l {
            return Err(Error::ShapeMismatch(format!("label weights need {l}×{l} entries")));
        }
        let all = std::iter::once(&self.w_adj).chain([&self.w_dist]).chain(&self.w_label);
        if all.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("CRF weights must be finite and nonnegative".into()));
        }
        for a in 0..l {
            for b in 0..a {
                if self.label_weight(a, b) != self.label_weight(b, a) {
                    return Err(Error::InvalidInput("label weight matrix is not symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Projects onto the feasible set after an update.
    pub fn clamp_nonnegative(&mut self) {
        self.flat_mut().for_each(|w| *w = w.max(0.0));
    }

    /// Projects every weight onto `[0, max]`.
    pub fn clamp_to(&mut self, max: f64) {
        self.flat_mut().for_each(|w| *w = w.clamp(0.0, max));
    }

    /// All weights in a fixed order: `w_adj`, `w_dist`, then `w_label`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.w_adj, self.w_dist];
        v.extend_from_slice(&self.w_label);
        v
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        std::iter::once(&mut self.w_adj)
            .chain([&mut self.w_dist])
            .chain(self.w_label.iter_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    Adjacency,
    Distance,
}

/// The sufficient statistic multiplying `w_kind · w_label(a, b)`.
pub fn pair_statistic(s: f64, a: usize, b: usize) -> f64 {
    if a == b {
        -(s * s)
    } else {
        -(1.0 - s * s)
    }
}

pub fn log_factor(params: &CrfParams, kind: PairKind, s: f64, a: usize, b: usize) -> f64 {
    params.kind_weight(kind) * params.label_weight(a, b) * pair_statistic(s, a, b)
}

/// Log factor table of one pair, `L × L` indexed by `(label of a, label of b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFactor {
    pub kind: PairKind,
    pub a: usize,
    pub b: usize,
    pub table: Vec<f64>,
}

fn pairs(graph: &PairwiseGraph) -> impl Iterator<Item = (PairKind, usize, usize, f64)> + '_ {
    graph
        .adjacency_pairs
        .iter()
        .map(|&(a, b, s)| (PairKind::Adjacency, a, b, s))
        .chain(
            graph
                .distance_pairs
                .iter()
                .map(|&(a, b, s)| (PairKind::Distance, a, b, s)),
        )
}

pub fn log_factors(params: &CrfParams, graph: &PairwiseGraph) -> Vec<PairFactor> {
    let l = params.labels;
    pairs(graph)
        .map(|(kind, a, b, s)| PairFactor {
            kind,
            a,
            b,
            table: (0..l * l).map(|i| log_factor(params, kind, s, i / l, i % l)).collect(),
        })
        .collect()
}

/// Approximate per-face label marginals, `F × L` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub faces: usize,
    pub labels: usize,
    pub q: Vec<f64>,
}

impl Marginals {
    pub fn row(&self, f: usize) -> &[f64] {
        &self.q[f * self.labels..(f + 1) * self.labels]
    }

    /// Header `(F, L)` as little-endian `u32`, then `F × L` little-endian
    /// `f64` values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(8 + self.q.len() * 8);
        out.write_u32::<LittleEndian>(self.faces as u32).unwrap();
        out.write_u32::<LittleEndian>(self.labels as u32).unwrap();
        for v in &self.q {
            out.write_f64::<LittleEndian>(*v).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Marginals> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = bytes.as_slice();
        let bad = |e: std::io::Error| Error::parse(path, e.to_string());
        let faces = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let labels = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        if r.len() != faces * labels * 8 {
            return Err(Error::parse(path, "size disagrees with header"));
        }
        let mut q = vec![0.0; faces * labels];
        r.read_f64_into::<LittleEndian>(&mut q).map_err(bad)?;
        Ok(Marginals { faces, labels, q })
    }

    /// Independent per-face softmax of the unaries.
    pub fn softmax(unary: &SurfaceConfidences) -> Marginals {
        let mut q = unary.values.clone();
        for row in q.chunks_exact_mut(unary.labels) {
            softmax_in_place(row);
        }
        Marginals {
            faces: unary.faces,
            labels: unary.labels,
            q,
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldConfig {
    pub max_iterations: usize,
    /// Stop once no marginal moves by this much in a sweep.
    pub tolerance: f64,
    /// Weight of the previous iterate in each update; 0 is undamped.
    pub damping: f64,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        MeanFieldConfig {
            max_iterations: 20,
            tolerance: 1e-4,
            damping: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldResult {
    pub marginals: Marginals,
    pub iterations: usize,
    pub converged: bool,
    /// Largest marginal change in the last sweep.
    pub max_change: f64,
}

/// Directed neighbour lists in compressed form. Each entry carries the
/// coefficients of `w_label(l, l)` and `w_label(l, l')` in the log factor.
struct Neighbourhood {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64, f64)>,
}

impl Neighbourhood {
    fn new(graph: &PairwiseGraph, params: &CrfParams) -> Self {
        let n = graph.faces;
        let mut degree = vec![0usize; n + 1];
        for (_, a, b, _) in pairs(graph) {
            degree[a + 1] += 1;
            degree[b + 1] += 1;
        }
        for i in 0..n {
            degree[i + 1] += degree[i];
        }
        let mut fill = degree.clone();
        let mut entries = vec![(0, 0.0, 0.0); degree[n]];
        for (kind, a, b, s) in pairs(graph) {
            let w = params.kind_weight(kind);
            let e = (w * pair_statistic(s, 0, 0), w * pair_statistic(s, 0, 1));
            entries[fill[a]] = (b, e.0, e.1);
            fill[a] += 1;
            entries[fill[b]] = (a, e.0, e.1);
            fill[b] += 1;
        }
        Neighbourhood {
            offsets: degree,
            entries,
        }
    }

    /// `Σ_{f'} Σ_{l'} Q_{f'}(l') · log φ(l, l')` for every label `l`.
    fn message(&self, f: usize, q: &[f64], params: &CrfParams, out: &mut [f64]) {
        let l = params.labels;
        out.fill(0.0);
        for &(g, same, diff) in &self.entries[self.offsets[f]..self.offsets[f + 1]] {
            let qg = &q[g * l..(g + 1) * l];
            for (a, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (b, qb) in qg.iter().enumerate() {
                    let coef = if a == b { same } else { diff };
                    acc += params.label_weight(a, b) * coef * qb;
                }
                *o += acc;
            }
        }
    }
}

fn check_inputs(unary: &SurfaceConfidences, graph: &PairwiseGraph, params: &CrfParams) -> Result<()> {
    params.validate()?;
    if unary.labels != params.labels {
        return Err(Error::ShapeMismatch(format!(
            "unaries have {} labels, CRF has {}",
            unary.labels, params.labels
        )));
    }
    if unary.faces != graph.faces || unary.values.len() != unary.faces * unary.labels {
        return Err(Error::ShapeMismatch(format!(
            "unaries cover {} faces, graph has {}",
            unary.faces, graph.faces
        )));
    }
    if pairs(graph).any(|(_, a, b, _)| a >= graph.faces || b >= graph.faces) {
        return Err(Error::InvalidInput("pair references a face outside the graph".into()));
    }
    Ok(())
}

/// Synchronous damped mean-field updates starting from the per-face
/// softmax of the unaries.
pub fn mean_field(
    unary: &SurfaceConfidences,
    graph: &PairwiseGraph,
    params: &CrfParams,
    cfg: &MeanFieldConfig,
) -> Result<MeanFieldResult> {
    check_inputs(unary, graph, params)?;
    let (n, l) = (unary.faces, unary.labels);
    let hood = Neighbourhood::new(graph, params);
    let mut q = Marginals::softmax(unary).q;
    let mut next = vec![0.0; n * l];
    let mut msg = vec![0.0; l];
    let mut iterations = 0;
    let mut max_change = f64::INFINITY;
    while iterations < cfg.max_iterations {
        iterations += 1;
        max_change = 0.0f64;
        for f in 0..n {
            hood.message(f, &q, params, &mut msg);
            let row = &mut next[f * l..(f + 1) * l];
            for (k, r) in row.iter_mut().enumerate() {
                *r = unary.values[f * l + k] + msg[k];
            }
            softmax_in_place(row);
            for (k, r) in row.iter_mut().enumerate() {
                let old = q[f * l + k];
                *r = cfg.damping * old + (1.0 - cfg.damping) * *r;
                max_change = max_change.max((*r - old).abs());
            }
        }
        std::mem::swap(&mut q, &mut next);
        if max_change < cfg.tolerance {
            break;
        }
    }
    Ok(MeanFieldResult {
        marginals: Marginals { faces: n, labels: l, q },
        iterations,
        converged: max_change < cfg.tolerance,
        max_change,
    })
}

/// Per-face argmax; ties go to the lowest label.
pub fn map_labeling(marginals: &Marginals) -> Vec<usize> {
    (0..marginals.faces)
        .map(|f| {
            let row = marginals.row(f);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect()
}

/// Unnormalised log-probability of a labeling.
pub fn score(unary: &SurfaceConfidences, graph: &PairwiseGraph, params: &CrfParams, labels: &[usize]) -> f64 {
    let l = unary.labels;
    let u: f64 = labels.iter().enumerate().map(|(f, &y)| unary.values[f * l + y]).sum();
    let p: f64 = pairs(graph)
        .map(|(kind, a, b, s)| log_factor(params, kind, s, labels[a], labels[b]))
        .sum();
    u + p
}

/// Mean-field free energy `−E_Q[score] − H(Q)`; its negation lower-bounds
/// the log partition function.
pub fn free_energy(unary: &SurfaceConfidences, graph: &PairwiseGraph, params: &CrfParams, q: &Marginals) -> f64 {
    let l = unary.labels;
    let mut expected = 0.0;
    let mut entropy = 0.0;
    for (c, p) in unary.values.iter().zip(&q.q) {
        expected += c * p;
        if *p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    for (kind, a, b, s) in pairs(graph) {
        for x in 0..l {
            for y in 0..l {
                expected += q.q[a * l + x] * q.q[b * l + y] * log_factor(params, kind, s, x, y);
            }
        }
    }
    -expected - entropy
}

fn check_truth(truth: &[usize], faces: usize, labels: usize) -> Result<()> {
    if truth.len() != faces {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth labels for {faces} faces",
            truth.len()
        )));
    }
    if let Some(t) = truth.iter().find(|&&t| t >= labels) {
        return Err(Error::InvalidInput(format!(
            "label {t} out of range for {labels} labels"
        )));
    }
    Ok(())
}

/// Mean-field surrogate of the log-likelihood of `truth`:
/// `score(truth) − (E_Q[score] + H(Q))`. At a mean-field fixed point its
/// gradients are [`surface_unary_gradient`] and [`weight_gradients`].
pub fn surrogate_log_likelihood(
    unary: &SurfaceConfidences,
    graph: &PairwiseGraph,
    params: &CrfParams,
    q: &Marginals,
    truth: &[usize],
) -> Result<f64> {
    check_truth(truth, unary.faces, unary.labels)?;
    Ok(score(unary, graph, params, truth) + free_energy(unary, graph, params, q))
}

/// `[l = T_f] − Q_f(l)` on observed faces, zero elsewhere (ascent direction).
pub fn surface_unary_gradient(marginals: &Marginals, truth: &[usize], observed: &[bool]) -> Result<Vec<f64>> {
    check_truth(truth, marginals.faces, marginals.labels)?;
    if observed.len() != marginals.faces {
        return Err(Error::ShapeMismatch("observed flags disagree with face count".into()));
    }
    let l = marginals.labels;
    let mut g = vec![0.0; marginals.faces * l];
    for f in (0..marginals.faces).filter(|&f| observed[f]) {
        for k in 0..l {
            g[f * l + k] = (truth[f] == k) as u8 as f64 - marginals.q[f * l + k];
        }
    }
    Ok(g)
}

/// Unary gradient routed to the argmax pixel of every `(face, label)`.
pub fn unary_gradient(
    marginals: &Marginals,
    truth: &[usize],
    surface: &SurfaceConfidences,
    argmax: &ArgmaxIndex,
) -> Result<Vec<f32>> {
    let g = surface_unary_gradient(marginals, truth, &surface.observed)?;
    backward_project(&g, argmax)
}

/// Gradient of the surrogate log-likelihood with respect to every CRF
/// weight (ascent direction). Entry `(a, b)` and `(b, a)` of `w_label`
/// both hold the derivative for the single shared weight.
pub fn weight_gradients(
    marginals: &Marginals,
    truth: &[usize],
    graph: &PairwiseGraph,
    params: &CrfParams,
) -> Result<CrfParams> {
    check_truth(truth, marginals.faces, marginals.labels)?;
    let l = params.labels;
    let q = &marginals.q;
    let mut grad = CrfParams::zeros(l);
    // Ordered-pair derivative accumulator, symmetrised at the end.
    let mut label = vec![0.0; l * l];
    for (kind, a, b, s) in pairs(graph) {
        let wk = params.kind_weight(kind);
        let mut dk = 0.0;
        let (ta, tb) = (truth[a], truth[b]);
        let stat = pair_statistic(s, ta, tb);
        dk += params.label_weight(ta, tb) * stat;
        label[ta * l + tb] += wk * stat;
        for x in 0..l {
            for y in 0..l {
                let p = q[a * l + x] * q[b * l + y];
                let stat = pair_statistic(s, x, y);
                dk -= p * params.label_weight(x, y) * stat;
                label[x * l + y] -= p * wk * stat;
            }
        }
        match kind {
            PairKind::Adjacency => grad.w_adj += dk,
            PairKind::Distance => grad.w_dist += dk,
        }
    }
    for x in 0..l {
        for y in 0..l {
            grad.w_label[x * l + y] = if x == y {
                label[x * l + x]
            } else {
                label[x * l + y] + label[y * l + x]
            };
        }
    }
    Ok(grad)
}
