use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mesh, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_COUNT: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub face: usize,
    pub barycentric: [f64; 3],
}

#[derive(Clone, Debug, Default)]
pub struct SampledPointSet {
    pub points: Vec<SampledPoint>,
}

impl SampledPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Area-weighted face choice followed by uniform barycentric sampling.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<SampledPointSet> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let weights =
        WeightedIndex::new(mesh.face_areas()).map_err(|e| Error::InvalidInput(format!("cannot sample faces: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let face = weights.sample(&mut rng);
            let s = rng.random::<f64>().sqrt();
            let t = rng.random::<f64>();
            let barycentric = [1.0 - s, s * (1.0 - t), s * t];
            let [a, b, c] = mesh.triangle(face);
            SampledPoint {
                position: a * barycentric[0] + b * barycentric[1] + c * barycentric[2],
                normal: mesh.face_normals()[face],
                face,
                barycentric,
            }
        })
        .collect();
    Ok(SampledPointSet { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_shapes::unit_cube;

    fn two_faces(area_a: f64, area_b: f64) -> Mesh {
        // Two disjoint right triangles with legs sqrt(2 * area).
        let la = (2.0 * area_a).sqrt();
        let lb = (2.0 * area_b).sqrt();
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(la, 0., 0.),
            Vec3::new(0., la, 0.),
            Vec3::new(10., 0., 0.),
            Vec3::new(10. + lb, 0., 0.),
            Vec3::new(10., lb, 0.),
        ];
        Mesh::from_polygons(v, &[vec![0, 1, 2], vec![3, 4, 5]]).unwrap()
    }

    #[test]
    fn single_triangle_points_lie_on_face() {
        let v = vec![Vec3::new(0., 0., 0.), Vec3::new(2., 0., 1.), Vec3::new(0., 3., 0.)];
        let mesh = Mesh::from_polygons(v, &[vec![0, 1, 2]]).unwrap();
        let pts = sample_surface(&mesh, 4, 9).unwrap();
        assert_eq!(pts.len(), 4);
        let [a, b, c] = mesh.triangle(0);
        for p in &pts.points {
            assert_eq!(p.face, 0);
            let sum: f64 = p.barycentric.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.barycentric.iter().all(|&x| (-1e-6..=1.0 + 1e-6).contains(&x)));
            let q = a * p.barycentric[0] + b * p.barycentric[1] + c * p.barycentric[2];
            assert!((q - p.position).norm() < 1e-12);
        }
    }

    #[test]
    fn face_counts_follow_area_within_binomial_bound() {
        let mesh = two_faces(1.0, 3.0);
        let pts = sample_surface(&mesh, 4000, 17).unwrap();
        let on_first = pts.points.iter().filter(|p| p.face == 0).count() as f64;
        // Binomial(4000, 1/4): mean 1000, sigma sqrt(750).
        let sigma = (4000.0_f64 * 0.25 * 0.75).sqrt();
        assert!((on_first - 1000.0).abs() <= 3.0 * sigma, "{on_first}");
    }

    #[test]
    fn chi_square_over_seeds() {
        // 12 cube faces with equal area; pooled counts over several seeds
        // must pass a chi-square test at the 0.001 level (df = 11, 31.26).
        let cube = unit_cube();
        let mut counts = [0usize; 12];
        for seed in 0..8 {
            for p in sample_surface(&cube, 1200, seed).unwrap().points {
                counts[p.face] += 1;
            }
        }
        let expected = 9600.0 / 12.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 31.26, "chi2 = {chi2}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cube = unit_cube();
        let a = sample_surface(&cube, 64, 5).unwrap();
        let b = sample_surface(&cube, 64, 5).unwrap();
        let c = sample_surface(&cube, 64, 6).unwrap();
        assert_eq!(a.points, b.points);
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(sample_surface(&unit_cube(), 0, 0).is_err());
    }

    #[test]
    fn ks_face_choice_frequencies() {
        // Kolmogorov-Smirnov on the face-index CDF, n = 1e5, faces with
        // unequal areas; critical value at alpha = 0.001 is 1.95 / sqrt(n).
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0., 1., 0.),
            Vec3::new(3., 0., 0.),
            Vec3::new(3., 0., 2.),
            Vec3::new(0., 2., 2.),
        ];
        let mesh = Mesh::from_polygons(v, &[vec![0, 1, 2], vec![1, 3, 4], vec![2, 4, 5], vec![0, 3, 5]]).unwrap();
        let n = 100_000;
        let pts = sample_surface(&mesh, n, 3).unwrap();
        let mut counts = vec![0usize; mesh.face_count()];
        for p in pts.points {
            counts[p.face] += 1;
        }
        let total = mesh.total_area();
        let (mut emp, mut theo, mut d) = (0.0, 0.0, 0.0_f64);
        for f in 0..mesh.face_count() {
            emp += counts[f] as f64 / n as f64;
            theo += mesh.face_areas()[f] / total;
            d = d.max((emp - theo).abs());
        }
        assert!(d < 1.95 / (n as f64).sqrt(), "KS statistic {d}");
    }
}
