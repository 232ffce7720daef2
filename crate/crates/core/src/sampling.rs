//! Subvolume extraction, sliding-window tiling and stitching.

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::phantom::reflect;
use crate::voldata::{ParticleLabel, Shape3};

/// A cubic crop with its offset in the parent volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SubvolumeSample {
    pub density: Array3<f32>,
    pub mask: Option<Array3<u8>>,
    pub origin: [i64; 3],
    pub source_label: Option<ParticleLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub stride: usize,
    pub shape: Shape3,
    pub origins: Vec<[usize; 3]>,
}

impl WindowGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Per-voxel number of covering windows.
    pub fn coverage(&self) -> Array3<u32> {
        let mut cov = Array3::<u32>::zeros(self.shape);
        let w = self.window;
        for o in &self.origins {
            cov.slice_mut(s![o[0]..o[0] + w, o[1]..o[1] + w, o[2]..o[2] + w])
                .mapv_inplace(|c| c + 1);
        }
        cov
    }
}

fn axis_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + window <= len)
        .collect();
    let last = *out.last().expect("window <= len gives origin 0");
    if last + window < len {
        out.push(len - window);
    }
    out
}

/// Tiles `shape` with cubic windows; the last window on each axis is
/// clamped flush with the volume edge.
pub fn sliding_windows(shape: Shape3, window: usize, stride: usize) -> Result<WindowGrid> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window", "window and stride must be >= 1"));
    }
    if shape.iter().any(|&d| d < window) {
        return Err(Error::invalid(
            "window",
            format!("window {window} larger than volume {shape:?}"),
        ));
    }
    let per_axis: Vec<Vec<usize>> = shape.iter().map(|&d| axis_origins(d, window, stride)).collect();
    let mut origins = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(WindowGrid {
        window,
        stride,
        shape,
        origins,
    })
}

/// Crop origin for a crop of `size` centered on `center`.
pub fn crop_origin(center: [f64; 3], size: usize) -> [i64; 3] {
    center.map(|c| (c + 0.5).floor() as i64 - (size / 2) as i64)
}

/// Copies a cube starting at `origin`, reflect-padding voxels outside the volume.
pub fn crop_reflect<T: Copy + Default>(vol: ArrayView3<'_, T>, origin: [i64; 3], size: usize) -> Array3<T> {
    let shape = vol.shape().to_vec();
    let inside = (0..3).all(|a| origin[a] >= 0 && origin[a] as usize + size <= shape[a]);
    if inside {
        let [z, y, x] = origin.map(|o| o as usize);
        return vol.slice(s![z..z + size, y..y + size, x..x + size]).to_owned();
    }
    let idx = |a: usize, i: usize| reflect((origin[a] + i as i64) as isize, shape[a]);
    let zi: Vec<usize> = (0..size).map(|i| idx(0, i)).collect();
    let yi: Vec<usize> = (0..size).map(|i| idx(1, i)).collect();
    let xi: Vec<usize> = (0..size).map(|i| idx(2, i)).collect();
    Array3::from_shape_fn((size, size, size), |(z, y, x)| vol[[zi[z], yi[y], xi[x]]])
}

/// Particle-centered crop with reflect padding at the borders.
pub fn extract_subvolume(
    density: ArrayView3<'_, f32>,
    mask: Option<ArrayView3<'_, u8>>,
    center: [f64; 3],
    size: usize,
) -> Result<SubvolumeSample> {
    if size == 0 {
        return Err(Error::invalid("size", "crop size must be positive"));
    }
    if let Some(m) = &mask {
        if m.shape() != density.shape() {
            return Err(Error::ShapeMismatch("mask and density differ".into()));
        }
    }
    let origin = crop_origin(center, size);
    Ok(SubvolumeSample {
        density: crop_reflect(density, origin, size),
        mask: mask.map(|m| crop_reflect(m, origin, size)),
        origin,
        source_label: None,
    })
}

/// Central `size`-cube of a larger cube.
pub fn center_crop<T: Clone>(vol: &Array3<T>, size: usize) -> Array3<T> {
    let n = vol.shape()[0];
    assert!(size <= n, "center crop larger than input");
    let o = (n - size) / 2;
    vol.slice(s![o..o + size, o..o + size, o..o + size]).to_owned()
}

/// Infinite stream of class-balanced label batches, drawn with replacement.
#[derive(Debug)]
pub struct BalancedBatches<R> {
    by_class: Vec<Vec<ParticleLabel>>,
    per_class: usize,
    rng: R,
}

pub fn balanced_batches<R: Rng>(
    labels: &[ParticleLabel],
    num_classes: usize,
    batch_size: usize,
    rng: R,
) -> Result<BalancedBatches<R>> {
    if num_classes == 0 || batch_size == 0 || batch_size % num_classes != 0 {
        return Err(Error::invalid(
            "batch_size",
            format!("{batch_size} is not a positive multiple of {num_classes} classes"),
        ));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for l in labels {
        let i = l.class_id as usize;
        if i == 0 || i > num_classes {
            return Err(Error::invalid("labels", format!("class id {i} out of range")));
        }
        by_class[i - 1].push(*l);
    }
    if let Some(i) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::invalid("labels", format!("class {} has no labels", i + 1)));
    }
    Ok(BalancedBatches {
        by_class,
        per_class: batch_size / num_classes,
        rng,
    })
}

impl<R: Rng> Iterator for BalancedBatches<R> {
    type Item = Vec<ParticleLabel>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch = Vec::with_capacity(self.per_class * self.by_class.len());
        for pool in &self.by_class {
            for _ in 0..self.per_class {
                batch.push(pool[self.rng.random_range(0..pool.len())]);
            }
        }
        Some(batch)
    }
}

/// Averages overlapping window probabilities and renormalizes per voxel.
///
/// Each block is `(channels, W, W, W)`; the result is `(channels, D, H, W)`.
pub fn stitch_predictions(grid: &WindowGrid, blocks: &[Array4<f32>]) -> Result<Array4<f32>> {
    if blocks.len() != grid.origins.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability blocks for {} windows",
            blocks.len(),
            grid.origins.len()
        )));
    }
    let Some(first) = blocks.first() else {
        return Err(Error::invalid("blocks", "empty window grid"));
    };
    let channels = first.shape()[0];
    let w = grid.window;
    let [d, h, wd] = grid.shape;
    let mut sum = Array4::<f64>::zeros((channels, d, h, wd));
    let mut count = Array3::<u32>::zeros(grid.shape);
    for (o, block) in grid.origins.iter().zip(blocks) {
        if block.shape() != [channels, w, w, w] {
            return Err(Error::ShapeMismatch(format!(
                "block shape {:?}, expected {:?}",
                block.shape(),
                [channels, w, w, w]
            )));
        }
        let mut dst = sum.slice_mut(s![.., o[0]..o[0] + w, o[1]..o[1] + w, o[2]..o[2] + w]);
        dst.zip_mut_with(block, |a, &b| *a += b as f64);
        count
            .slice_mut(s![o[0]..o[0] + w, o[1]..o[1] + w, o[2]..o[2] + w])
            .mapv_inplace(|c| c + 1);
    }
    let mut out = Array4::<f32>::zeros((channels, d, h, wd));
    for ((z, y, x), &n) in count.indexed_iter() {
        let n = n.max(1) as f64;
        let total: f64 = (0..channels).map(|c| sum[[c, z, y, x]] / n).sum();
        for c in 0..channels {
            let mean = sum[[c, z, y, x]] / n;
            out[[c, z, y, x]] = if total > 0.0 {
                (mean / total) as f32
            } else {
                1.0 / channels as f32
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_counts() {
        let g = sliding_windows([48, 48, 48], 24, 12).unwrap();
        assert_eq!(g.len(), 27);
        assert_eq!(axis_origins(48, 24, 12), vec![0, 12, 24]);
        let g = sliding_windows([24, 24, 24], 24, 12).unwrap();
        assert_eq!(g.origins, vec![[0, 0, 0]]);
        assert!(sliding_windows([20, 30, 30], 24, 12).is_err());
    }

    #[test]
    fn clamped_final_window_covers_everything() {
        assert_eq!(axis_origins(50, 24, 12), vec![0, 12, 24, 26]);
        let g = sliding_windows([50, 50, 50], 24, 12).unwrap();
        assert!(g.coverage().iter().all(|&c| c >= 1));
        // odd window, stride = W // 2
        let g = sliding_windows([31, 40, 23], 23, 11).unwrap();
        assert!(g.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn interior_covered_by_eight() {
        let g = sliding_windows([48, 48, 48], 24, 12).unwrap();
        let cov = g.coverage();
        assert_eq!(cov[[20, 20, 20]], 8);
        assert_eq!(cov[[0, 0, 0]], 1);
    }

    fn ramp(n: usize) -> Array3<f32> {
        Array3::from_shape_fn((n, n, n), |(z, y, x)| (z * 10000 + y * 100 + x) as f32)
    }

    #[test]
    fn interior_crop_has_expected_origin() {
        let v = ramp(48);
        let s = extract_subvolume(v.view(), None, [24.0, 24.0, 24.0], 24).unwrap();
        assert_eq!(s.origin, [12, 12, 12]);
        assert_eq!(s.density[[0, 0, 0]], v[[12, 12, 12]]);
        assert_eq!(s.density[[23, 23, 23]], v[[35, 35, 35]]);
    }

    #[test]
    fn corner_crop_is_reflect_padded() {
        let v = ramp(48);
        let s = extract_subvolume(v.view(), Some(v.mapv(|_| 1u8).view()), [0.0, 0.0, 0.0], 24).unwrap();
        assert_eq!(s.origin, [-12, -12, -12]);
        // local index 12 is the corner voxel; index 12 - k mirrors index 12 + k
        for k in 1..12 {
            assert_eq!(s.density[[12 - k, 12, 12]], s.density[[12 + k, 12, 12]]);
            assert_eq!(s.density[[12, 12 - k, 12 + 3]], v[[0, k, 3]]);
        }
        assert!(s.mask.unwrap().iter().all(|&m| m == 1));
        assert!(extract_subvolume(v.view(), None, [0.0; 3], 0).is_err());
    }

    #[test]
    fn shifted_crops_overlap() {
        let v = ramp(48);
        let a = extract_subvolume(v.view(), None, [24.0, 24.0, 24.0], 24).unwrap();
        let b = extract_subvolume(v.view(), None, [25.0, 24.0, 24.0], 24).unwrap();
        let mut shared = 0;
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let g = [a.origin[0] + z, a.origin[1] + y, a.origin[2] + x];
                    let lb = [g[0] - b.origin[0], g[1] - b.origin[1], g[2] - b.origin[2]];
                    if lb.iter().all(|&i| (0..24).contains(&i)) {
                        shared += 1;
                        let bv = b.density[[lb[0] as usize, lb[1] as usize, lb[2] as usize]];
                        assert_eq!(a.density[[z as usize, y as usize, x as usize]], bv);
                    }
                }
            }
        }
        assert_eq!(shared, 23 * 24 * 24);
    }

    fn labels(per_class: &[usize]) -> Vec<ParticleLabel> {
        per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| ParticleLabel {
                    class_id: c as u8 + 1,
                    center: [i as f64, 0.0, 0.0],
                    radius_vox: 2.0,
                })
            })
            .collect()
    }

    #[test]
    fn batches_are_balanced() {
        let ls = labels(&[3, 3, 3, 3]);
        let batches = balanced_batches(&ls, 4, 16, ChaCha8Rng::seed_from_u64(0)).unwrap();
        for b in batches.take(50) {
            assert_eq!(b.len(), 16);
            for c in 1..=4u8 {
                assert_eq!(b.iter().filter(|l| l.class_id == c).count(), 4);
            }
        }
        let single = balanced_batches(&labels(&[3]), 1, 16, ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(single.take(5).all(|b| b.len() == 16));
        let two = balanced_batches(&labels(&[2, 5]), 2, 16, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut counts = [0usize; 2];
        for b in two.take(10_000) {
            for l in b {
                counts[l.class_id as usize - 1] += 1;
            }
        }
        assert_eq!(counts[0], counts[1]);
    }

    #[test]
    fn batches_are_deterministic_and_validated() {
        let ls = labels(&[3, 4]);
        let a: Vec<_> = balanced_batches(&ls, 2, 8, ChaCha8Rng::seed_from_u64(5)).unwrap().take(3).collect();
        let b: Vec<_> = balanced_batches(&ls, 2, 8, ChaCha8Rng::seed_from_u64(5)).unwrap().take(3).collect();
        assert_eq!(a, b);
        assert!(balanced_batches(&ls, 2, 7, ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(balanced_batches(&labels(&[3, 0]), 2, 8, ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn rand_block(rng: &mut ChaCha8Rng, c: usize, w: usize) -> Array4<f32> {
        let mut b = Array4::from_shape_fn((c, w, w, w), |_| rng.random_range(0.01f32..1.0));
        for z in 0..w {
            for y in 0..w {
                for x in 0..w {
                    let t: f32 = (0..c).map(|k| b[[k, z, y, x]]).sum();
                    for k in 0..c {
                        b[[k, z, y, x]] /= t;
                    }
                }
            }
        }
        b
    }

    #[test]
    fn stitching_equal_blocks_and_single_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = rand_block(&mut rng, 3, 24);
        let g = sliding_windows([24, 24, 24], 24, 12).unwrap();
        let out = stitch_predictions(&g, std::slice::from_ref(&block)).unwrap();
        assert!(out.iter().zip(block.iter()).all(|(a, b)| (a - b).abs() < 1e-6));

        let uniform = Array4::from_elem((2, 24, 24, 24), 0.5f32);
        let g = sliding_windows([48, 48, 48], 24, 12).unwrap();
        let out = stitch_predictions(&g, &vec![uniform; 27]).unwrap();
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(stitch_predictions(&g, &[]).is_err());
    }

    #[test]
    fn stitching_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sliding_windows([48, 48, 48], 24, 12).unwrap();
        let blocks: Vec<_> = (0..g.len()).map(|_| rand_block(&mut rng, 2, 24)).collect();
        let out = stitch_predictions(&g, &blocks).unwrap();
        let v = [20usize, 21, 30];
        let mut acc = [0.0f64; 2];
        let mut n = 0;
        for (o, b) in g.origins.iter().zip(&blocks) {
            if (0..3).all(|a| v[a] >= o[a] && v[a] < o[a] + 24) {
                n += 1;
                for c in 0..2 {
                    acc[c] += b[[c, v[0] - o[0], v[1] - o[1], v[2] - o[2]]] as f64;
                }
            }
        }
        assert_eq!(n, 8);
        let total: f64 = acc.iter().sum::<f64>() / n as f64;
        for c in 0..2 {
            let expect = acc[c] / n as f64 / total;
            assert!((out[[c, v[0], v[1], v[2]]] as f64 - expect).abs() < 1e-6);
        }
    }
}
