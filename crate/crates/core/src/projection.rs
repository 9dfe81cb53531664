//! Image-to-surface projection: per-face pooling of per-pixel confidences
//! over every pixel, in every view, whose surface reference is that face.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// `M × H × W × L` confidences with the matching `M × H × W` face
/// references (−1 = none).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceStack {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub confidences: Vec<f32>,
    pub references: Vec<i32>,
}

impl ConfidenceStack {
    pub fn new(height: usize, width: usize, labels: usize) -> Self {
        ConfidenceStack {
            views: 0,
            height,
            width,
            labels,
            confidences: Vec::new(),
            references: Vec::new(),
        }
    }

    /// Appends one view: `H × W × L` confidences and `H × W` references.
    pub fn push(&mut self, confidences: &[f32], references: &[i32]) -> Result<()> {
        let px = self.height * self.width;
        if confidences.len() != px * self.labels || references.len() != px {
            return Err(Error::ShapeMismatch(format!(
                "view has {} confidences and {} references, stack expects {} and {px}",
                confidences.len(),
                references.len(),
                px * self.labels
            )));
        }
        self.confidences.extend_from_slice(confidences);
        self.references.extend_from_slice(references);
        self.views += 1;
        Ok(())
    }

    pub fn view_confidences(&self, m: usize) -> &[f32] {
        let n = self.height * self.width * self.labels;
        &self.confidences[m * n..(m + 1) * n]
    }

    pub fn view_references(&self, m: usize) -> &[i32] {
        let n = self.height * self.width;
        &self.references[m * n..(m + 1) * n]
    }

    /// Views in the given order, for permutation tests and subsets.
    pub fn select(&self, order: &[usize]) -> ConfidenceStack {
        let mut out = ConfidenceStack::new(self.height, self.width, self.labels);
        for &m in order {
            out.push(self.view_confidences(m), self.view_references(m))
                .expect("views of the same stack share a shape");
        }
        out
    }

    fn validate(&self, faces: usize) -> Result<()> {
        let px = self.views * self.height * self.width;
        if self.references.len() != px || self.confidences.len() != px * self.labels {
            return Err(Error::ShapeMismatch(
                "confidence stack arrays disagree with its shape".into(),
            ));
        }
        if let Some(r) = self.references.iter().find(|&&r| r >= faces as i32 || r < -1) {
            return Err(Error::InvalidInput(format!(
                "reference {r} out of range for {faces} faces"
            )));
        }
        Ok(())
    }
}

/// Per-face pooled confidences, `F × L` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceConfidences {
    pub faces: usize,
    pub labels: usize,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl SurfaceConfidences {
    pub fn zeros(faces: usize, labels: usize) -> Self {
        SurfaceConfidences {
            faces,
            labels,
            values: vec![0.0; faces * labels],
            observed: vec![false; faces],
        }
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.labels..(f + 1) * self.labels]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(8 + self.values.len() * 8 + self.faces);
        let w = |e: std::io::Error| Error::io(path, e);
        out.write_u32::<LittleEndian>(self.faces as u32).map_err(w)?;
        out.write_u32::<LittleEndian>(self.labels as u32).map_err(w)?;
        for v in &self.values {
            out.write_f64::<LittleEndian>(*v).map_err(w)?;
        }
        out.extend(self.observed.iter().map(|&o| o as u8));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = bytes.as_slice();
        let bad = |e: std::io::Error| Error::parse(path, e.to_string());
        let faces = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let labels = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        if r.len() != faces * labels * 8 + faces {
            return Err(Error::parse(path, "size disagrees with header"));
        }
        let mut values = vec![0.0; faces * labels];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(bad)?;
        let mut flags = Vec::with_capacity(faces);
        r.read_to_end(&mut flags).map_err(bad)?;
        Ok(SurfaceConfidences {
            faces,
            labels,
            values,
            observed: flags.into_iter().map(|b| b != 0).collect(),
        })
    }
}

/// For every `(face, label)`, the flat stack index `((m·H + i)·W + j)` of
/// the pixel that won the max, if any pixel references the face.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgmaxIndex {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub pixels: Vec<Option<usize>>,
}

/// Running element-wise max over views added one at a time. Equal to
/// projecting the full stack at once: later views only replace a value when
/// strictly larger, so ties keep the lowest `(m, i, j)`.
#[derive(Clone, Debug)]
pub struct MaxAccumulator {
    height: usize,
    width: usize,
    views: usize,
    surface: SurfaceConfidences,
    argmax: Vec<Option<usize>>,
}

impl MaxAccumulator {
    pub fn new(faces: usize, labels: usize, height: usize, width: usize) -> Self {
        MaxAccumulator {
            height,
            width,
            views: 0,
            surface: SurfaceConfidences::zeros(faces, labels),
            argmax: vec![None; faces * labels],
        }
    }

    pub fn add_view(&mut self, confidences: &[f32], references: &[i32]) -> Result<()> {
        let (faces, labels) = (self.surface.faces, self.surface.labels);
        let px = self.height * self.width;
        if confidences.len() != px * labels || references.len() != px {
            return Err(Error::ShapeMismatch("view shape differs from the accumulator".into()));
        }
        let base = self.views * px;
        for (p, &r) in references.iter().enumerate() {
            if r < 0 {
                continue;
            }
            let f = r as usize;
            if f >= faces {
                return Err(Error::InvalidInput(format!(
                    "reference {f} out of range for {faces} faces"
                )));
            }
            let first = !self.surface.observed[f];
            self.surface.observed[f] = true;
            for l in 0..labels {
                let c = confidences[p * labels + l] as f64;
                let slot = f * labels + l;
                if first || c > self.surface.values[slot] {
                    self.surface.values[slot] = c;
                    self.argmax[slot] = Some(base + p);
                }
            }
        }
        self.views += 1;
        Ok(())
    }

    pub fn finish(self) -> (SurfaceConfidences, ArgmaxIndex) {
        let index = ArgmaxIndex {
            views: self.views,
            height: self.height,
            width: self.width,
            labels: self.surface.labels,
            pixels: self.argmax,
        };
        (self.surface, index)
    }
}

/// Max pooling over all referencing pixels; unobserved faces stay zero.
pub fn project_max(stack: &ConfidenceStack, faces: usize) -> Result<(SurfaceConfidences, ArgmaxIndex)> {
    stack.validate(faces)?;
    let mut acc = MaxAccumulator::new(faces, stack.labels, stack.height, stack.width);
    for m in 0..stack.views {
        acc.add_view(stack.view_confidences(m), stack.view_references(m))?;
    }
    Ok(acc.finish())
}

/// Mean pooling over all referencing pixels; unobserved faces stay zero.
/// Sums are correctly rounded, so the result does not depend on view order.
pub fn project_mean(stack: &ConfidenceStack, faces: usize) -> Result<SurfaceConfidences> {
    stack.validate(faces)?;
    let labels = stack.labels;
    let mut out = SurfaceConfidences::zeros(faces, labels);
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); faces];
    for (p, &r) in stack.references.iter().enumerate() {
        if r >= 0 {
            pixels[r as usize].push(p);
        }
    }
    for (f, px) in pixels.iter().enumerate().filter(|(_, px)| !px.is_empty()) {
        out.observed[f] = true;
        for l in 0..labels {
            let sum = exact_sum(px.iter().map(|&p| stack.confidences[p * labels + l] as f64));
            out.values[f * labels + l] = sum / px.len() as f64;
        }
    }
    Ok(out)
}

/// Correctly rounded sum (Shewchuk's non-overlapping partials). The result
/// is independent of the order of `values`.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-way cases by the sign of the remaining partials.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Routes a surface gradient to the stack: each `(f, l)` entry lands on its
/// argmax pixel only. Returns `M × H × W × L` values.
pub fn backward_project(grad_surface: &[f64], argmax: &ArgmaxIndex) -> Result<Vec<f32>> {
    if grad_surface.len() != argmax.pixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "surface gradient has {} entries, argmax index {}",
            grad_surface.len(),
            argmax.pixels.len()
        )));
    }
    let labels = argmax.labels;
    let mut out = vec![0f32; argmax.views * argmax.height * argmax.width * labels];
    for (slot, (g, px)) in grad_surface.iter().zip(&argmax.pixels).enumerate() {
        if let Some(p) = px {
            out[p * labels + slot % labels] += *g as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(seed: u64, views: usize, faces: usize, labels: usize) -> ConfidenceStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (6, 5);
        let mut s = ConfidenceStack::new(h, w, labels);
        for _ in 0..views {
            // Coarse values make ties common.
            let c: Vec<f32> = (0..h * w * labels)
                .map(|_| rng.random_range(0..8) as f32 / 4.0 - 1.0)
                .collect();
            let r: Vec<i32> = (0..h * w).map(|_| rng.random_range(-1..faces as i32)).collect();
            s.push(&c, &r).unwrap();
        }
        s
    }

    /// Scan of every pixel of every view, tracking the first maximum.
    fn oracle_max(s: &ConfidenceStack, faces: usize) -> (Vec<f64>, Vec<Option<usize>>) {
        let mut vals = vec![0.0; faces * s.labels];
        let mut arg = vec![None; faces * s.labels];
        for f in 0..faces {
            for l in 0..s.labels {
                for m in 0..s.views {
                    for i in 0..s.height {
                        for j in 0..s.width {
                            let p = (m * s.height + i) * s.width + j;
                            if s.references[p] != f as i32 {
                                continue;
                            }
                            let c = s.confidences[p * s.labels + l] as f64;
                            if arg[f * s.labels + l].is_none() || c > vals[f * s.labels + l] {
                                vals[f * s.labels + l] = c;
                                arg[f * s.labels + l] = Some(p);
                            }
                        }
                    }
                }
            }
        }
        (vals, arg)
    }

    #[test]
    fn single_pixel_and_two_view_examples() {
        let mut s = ConfidenceStack::new(1, 1, 3);
        s.push(&[0.0, 0.0, 0.9], &[5]).unwrap();
        let (c, _) = project_max(&s, 6).unwrap();
        assert_eq!(c.values[5 * 3 + 2], 0.9f32 as f64);
        assert!(!c.observed[0] && c.observed[5]);

        let mut s = ConfidenceStack::new(1, 1, 1);
        s.push(&[0.3], &[3]).unwrap();
        s.push(&[0.7], &[3]).unwrap();
        let (c, arg) = project_max(&s, 4).unwrap();
        assert_eq!(c.values[3], 0.7f32 as f64);
        assert_eq!(arg.pixels[3], Some(1));
        let mean = project_mean(&s, 4).unwrap();
        assert!((mean.values[3] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn matches_scan_oracle_and_ignores_view_order() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, f, l) = (
                rng.random_range(1..=4),
                rng.random_range(1..=10),
                rng.random_range(1..=4),
            );
            let s = random_stack(seed, m, f, l);
            let (c, arg) = project_max(&s, f).unwrap();
            let (vals, args) = oracle_max(&s, f);
            assert_eq!(c.values, vals);
            assert_eq!(arg.pixels, args);
            for face in 0..f {
                if !c.observed[face] {
                    assert!(c.row(face).iter().all(|v| *v == 0.0));
                }
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.reverse();
            let (p, _) = project_max(&s.select(&order), f).unwrap();
            assert_eq!(p, c);
            let mean = project_mean(&s, f).unwrap();
            for face in (0..f).filter(|&x| c.observed[x]) {
                for (a, b) in c.row(face).iter().zip(mean.row(face)) {
                    assert!(a >= b);
                }
            }
        }
    }

    #[test]
    fn single_reference_mean_equals_max() {
        let mut s = ConfidenceStack::new(2, 1, 2);
        s.push(&[0.25, -1.5, 3.0, 2.0], &[0, 1]).unwrap();
        let (mx, _) = project_max(&s, 2).unwrap();
        assert_eq!(project_mean(&s, 2).unwrap(), mx);
    }

    #[test]
    fn backward_routes_to_the_argmax_pixel() {
        let mut s = ConfidenceStack::new(8, 8, 1);
        let mut refs = vec![-1; 64];
        refs[4 * 8 + 7] = 3;
        s.push(&[0.0; 64], &[-1; 64]).unwrap();
        s.push(&[0.5; 64], &refs).unwrap();
        let (_, arg) = project_max(&s, 5).unwrap();
        let mut g = vec![0.0; 5];
        g[3] = 1.0;
        g[1] = 2.0; // unobserved
        let out = backward_project(&g, &arg).unwrap();
        let nz: Vec<usize> = (0..out.len()).filter(|&i| out[i] != 0.0).collect();
        assert_eq!(nz, vec![64 + 4 * 8 + 7]);
        assert_eq!(out[64 + 4 * 8 + 7], 1.0);
        assert!(backward_project(&[0.0; 4], &arg).is_err());
    }

    #[test]
    fn bad_references_are_rejected() {
        let mut s = ConfidenceStack::new(1, 2, 1);
        s.push(&[0.0, 0.0], &[0, 4]).unwrap();
        assert!(project_max(&s, 4).is_err());
        assert!(s.push(&[0.0], &[0, 1]).is_err());
    }

    #[test]
    fn surface_confidences_round_trip() {
        let s = random_stack(3, 2, 7, 3);
        let (c, _) = project_max(&s, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        c.save(&path).unwrap();
        assert_eq!(SurfaceConfidences::load(&path).unwrap(), c);
    }

    #[test]
    fn exact_sum_examples() {
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        // 1 + 2^-53 + 2^-106 rounds up only because of the last term.
        assert_eq!(exact_sum([1.0, 2f64.powi(-53), 2f64.powi(-106)]), 1.0 + f64::EPSILON);
    }

    proptest! {
        #[test]
        fn exact_sum_ignores_order(mut v in proptest::collection::vec(-1e6f64..1e6, 0..40), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let a = exact_sum(v.iter().copied());
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a.to_bits(), exact_sum(v.iter().copied()).to_bits());
        }

        #[test]
        fn mean_projection_ignores_view_order(seed in 0u64..1000, m in 2usize..5, f in 1usize..9, l in 1usize..4) {
            let s = random_stack(seed, m, f, l);
            let order: Vec<usize> = (0..m).rev().collect();
            prop_assert_eq!(project_mean(&s, f).unwrap(), project_mean(&s.select(&order), f).unwrap());
        }

        #[test]
        fn running_max_equals_batch_projection(seed in 0u64..1000, m in 1usize..5, f in 1usize..9, l in 1usize..4) {
            let s = random_stack(seed, m, f, l);
            let batch = project_max(&s, f).unwrap();
            let mut acc = MaxAccumulator::new(f, l, s.height, s.width);
            for v in 0..m {
                acc.add_view(s.view_confidences(v), s.view_references(v)).unwrap();
            }
            prop_assert_eq!(acc.finish(), batch);
        }

        #[test]
        fn backward_has_at_most_one_nonzero_per_entry(seed in 0u64..1000, f in 1usize..9, l in 1usize..4) {
            let s = random_stack(seed, 3, f, l);
            let (_, arg) = project_max(&s, f).unwrap();
            let g: Vec<f64> = (0..f * l).map(|i| 1.0 + i as f64).collect();
            let out = backward_project(&g, &arg).unwrap();
            prop_assert!(out.iter().filter(|v| **v != 0.0).count() <= f * l);
            let total: f64 = out.iter().map(|v| *v as f64).sum();
            let routed: f64 = (0..f * l).filter(|&i| arg.pixels[i].is_some()).map(|i| g[i]).sum();
            prop_assert!((total - routed).abs() < 1e-6 * routed.max(1.0));
        }
    }
}
