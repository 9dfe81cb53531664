use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::Mesh;

/// Geodesic neighbourhood radius as a fraction of the bounding sphere radius.
pub const DEFAULT_GEODESIC_CUTOFF: f64 = 0.1;

/// Face-to-face graph across shared edges. The weight of a dual edge is the
/// path length centroid → shared-edge midpoint → centroid.
#[derive(Clone, Debug)]
pub struct DualGraph {
    pub neighbours: Vec<Vec<(usize, f64)>>,
}

impl DualGraph {
    pub fn new(mesh: &Mesh) -> DualGraph {
        let n = mesh.face_count();
        let centroids: Vec<_> = (0..n).map(|f| mesh.face_centroid(f)).collect();
        let mut neighbours: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for ((a, b), faces) in mesh.edge_faces() {
            let mid = (mesh.vertices()[a] + mesh.vertices()[b]) * 0.5;
            for (i, &f) in faces.iter().enumerate() {
                for &g in &faces[i + 1..] {
                    let w = (centroids[f] - mid).norm() + (mid - centroids[g]).norm();
                    add_edge(&mut neighbours[f], g, w);
                    add_edge(&mut neighbours[g], f, w);
                }
            }
        }
        DualGraph { neighbours }
    }

    /// Faces reachable from `source` with path length strictly below
    /// `cutoff`, excluding the source itself, in ascending face order.
    pub fn distances_within(&self, source: usize, cutoff: f64) -> Vec<(usize, f64)> {
        let mut dist: Vec<f64> = vec![f64::INFINITY; self.neighbours.len()];
        let mut settled = vec![false; self.neighbours.len()];
        let mut heap = BinaryHeap::new();
        let mut reached = Vec::new();
        dist[source] = 0.0;
        heap.push(Entry {
            dist: 0.0,
            face: source,
        });
        while let Some(Entry { dist: d, face }) = heap.pop() {
            if settled[face] {
                continue;
            }
            settled[face] = true;
            if face != source {
                reached.push((face, d));
            }
            for &(g, w) in &self.neighbours[face] {
                let nd = d + w;
                if nd < cutoff && nd < dist[g] {
                    dist[g] = nd;
                    heap.push(Entry { dist: nd, face: g });
                }
            }
        }
        reached.sort_unstable_by_key(|&(f, _)| f);
        reached
    }
}

fn add_edge(list: &mut Vec<(usize, f64)>, g: usize, w: f64) {
    match list.iter_mut().find(|(h, _)| *h == g) {
        Some(e) => e.1 = e.1.min(w),
        None => list.push((g, w)),
    }
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    dist: f64,
    face: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Min-heap on distance, ties to the lower face index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.face.cmp(&self.face))
    }
}

/// Pairwise structure of the surface CRF.
///
/// `adjacency_pairs` holds edge-adjacent faces with their normalised
/// dihedral angle; `distance_pairs` holds faces whose approximate geodesic
/// distance is below the cutoff, divided by the cutoff. Pairs are stored once
/// with `f < f'`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairwiseGraph {
    pub faces: usize,
    pub adjacency_pairs: Vec<(usize, usize, f64)>,
    pub distance_pairs: Vec<(usize, usize, f64)>,
}

impl PairwiseGraph {
    /// A graph with no pairs at all.
    pub fn empty(faces: usize) -> PairwiseGraph {
        PairwiseGraph {
            faces,
            ..Default::default()
        }
    }
}

/// Builds the CRF graph with the geodesic cutoff given as a fraction of the
/// bounding sphere radius.
pub fn build_pairwise_graph(mesh: &Mesh, cutoff_fraction: f64) -> PairwiseGraph {
    let n = mesh.face_count();
    let normals = mesh.face_normals();
    let mut adjacency_pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (_, faces) in mesh.edge_faces() {
        for (i, &f) in faces.iter().enumerate() {
            for &g in &faces[i + 1..] {
                let (a, b) = (f.min(g), f.max(g));
                let cos = normals[a].dot(&normals[b]).clamp(-1.0, 1.0);
                adjacency_pairs.push((a, b, cos.acos() / std::f64::consts::PI));
            }
        }
    }
    adjacency_pairs.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    adjacency_pairs.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);

    let dual = DualGraph::new(mesh);
    let cutoff = cutoff_fraction * mesh.bounding_sphere().radius;
    let distance_pairs = (0..n)
        .into_par_iter()
        .map(|f| {
            dual.distances_within(f, cutoff)
                .into_iter()
                .filter(|&(g, _)| g > f)
                .map(|(g, d)| (f, g, d / cutoff))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    PairwiseGraph {
        faces: n,
        adjacency_pairs,
        distance_pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_shapes::flat_grid;
    use crate::mesh::Vec3;
    use nalgebra::{Rotation3, Unit};

    fn folded_pair(angle: f64) -> Mesh {
        // Two triangles sharing the edge (0,0,0)-(1,0,0); the second is
        // rotated by `angle` about that edge.
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0.5, 1., 0.),
            Vec3::new(0.5, -angle.cos(), angle.sin()),
        ];
        Mesh::from_polygons(v, &[vec![0, 1, 2], vec![1, 0, 3]]).unwrap()
    }

    #[test]
    fn coplanar_pair_has_zero_omega() {
        let g = build_pairwise_graph(&folded_pair(0.0), DEFAULT_GEODESIC_CUTOFF);
        assert_eq!(g.adjacency_pairs.len(), 1);
        assert!(g.adjacency_pairs[0].2.abs() < 1e-9);
    }

    #[test]
    fn perpendicular_pair_has_half_omega() {
        let g = build_pairwise_graph(&folded_pair(std::f64::consts::FRAC_PI_2), 0.1);
        assert!((g.adjacency_pairs[0].2 - 0.5).abs() < 1e-9);
    }

    /// Independent all-pairs oracle: Floyd–Warshall over the dual graph with
    /// weights computed directly from the grid geometry.
    fn floyd_warshall(mesh: &Mesh) -> Vec<Vec<f64>> {
        let n = mesh.face_count();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for f in 0..n {
            for g in 0..n {
                let shared: Vec<usize> = mesh.faces()[f]
                    .iter()
                    .copied()
                    .filter(|v| mesh.faces()[g].contains(v))
                    .collect();
                if f != g && shared.len() == 2 {
                    let m = (mesh.vertices()[shared[0]] + mesh.vertices()[shared[1]]) / 2.0;
                    d[f][g] = (mesh.face_centroid(f) - m).norm() + (m - mesh.face_centroid(g)).norm();
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn grid_distance_pairs_match_all_pairs_oracle() {
        let mesh = flat_grid(10, 0.1);
        let graph = build_pairwise_graph(&mesh, DEFAULT_GEODESIC_CUTOFF);
        let cutoff = DEFAULT_GEODESIC_CUTOFF * mesh.bounding_sphere().radius;
        let d = floyd_warshall(&mesh);
        let mut expected = Vec::new();
        for f in 0..mesh.face_count() {
            for g in f + 1..mesh.face_count() {
                if d[f][g] < cutoff {
                    expected.push((f, g, d[f][g] / cutoff));
                }
            }
        }
        assert!(!expected.is_empty());
        assert_eq!(graph.distance_pairs.len(), expected.len());
        for (a, b) in graph.distance_pairs.iter().zip(&expected) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a.2));
        }
        // Flat: every adjacency has omega 0.
        assert!(graph.adjacency_pairs.iter().all(|p| p.2.abs() < 1e-9));
    }

    #[test]
    fn geodesic_is_a_metric_on_sampled_triples() {
        let mesh = flat_grid(6, 0.2).map_vertices(|v| Vec3::new(v.x, v.y, (3.0 * v.x).sin() * 0.2));
        let dual = DualGraph::new(&mesh);
        let n = mesh.face_count();
        let all: Vec<Vec<f64>> = (0..n)
            .map(|f| {
                let mut row = vec![0.0; n];
                for (g, d) in dual.distances_within(f, f64::INFINITY) {
                    row[g] = d;
                }
                row
            })
            .collect();
        for i in (0..n).step_by(5) {
            for j in (0..n).step_by(7) {
                assert!((all[i][j] - all[j][i]).abs() < 1e-12);
                for k in (0..n).step_by(11) {
                    assert!(all[i][j] <= all[i][k] + all[k][j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rigid_motion_and_uniform_scale_leave_graph_unchanged() {
        let mesh = flat_grid(8, 0.1).map_vertices(|v| Vec3::new(v.x, v.y, 0.3 * (v.x * v.y * 4.0).cos()));
        let base = build_pairwise_graph(&mesh, 0.1);
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(1.0, 2.0, -0.5)), 0.7);
        let moved = mesh.map_vertices(|v| rot * v * 2.5 + Vec3::new(3.0, -1.0, 4.0));
        let other = build_pairwise_graph(&moved, 0.1);
        assert_eq!(base.adjacency_pairs.len(), other.adjacency_pairs.len());
        for (a, b) in base.adjacency_pairs.iter().zip(&other.adjacency_pairs) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-6);
        }
        assert_eq!(base.distance_pairs.len(), other.distance_pairs.len());
        for (a, b) in base.distance_pairs.iter().zip(&other.distance_pairs) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-9);
        }
    }

    #[test]
    fn pairs_are_unique() {
        let mesh = flat_grid(5, 0.3);
        let g = build_pairwise_graph(&mesh, 0.3);
        let mut keys: Vec<_> = g.distance_pairs.iter().map(|p| (p.0, p.1)).collect();
        let len = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), len);
        assert!(g.distance_pairs.iter().all(|p| p.0 < p.1));
    }
}
