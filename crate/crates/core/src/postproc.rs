//! From stitched probabilities to particle detections.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastcc::{label_components, CcBackend};
use crate::voldata::{ClassCatalog, LabelVolume};

pub const DEFAULT_MIN_SIZE: usize = 5;
const MEANSHIFT_TOL: f64 = 1e-3;
const MEANSHIFT_MAX_ITER: usize = 100;
/// Point sets larger than this are seeded from occupied bins.
const MEANSHIFT_FULL_SEEDING_MAX: usize = 2000;

/// Component ids per voxel, `0` for background, dense in `1..=component_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentVolume {
    pub labels: Array3<u32>,
    pub component_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u8,
    pub center: [f64; 3],
    pub size_vox: usize,
    pub score: f64,
}

/// Per-voxel channel argmax of a `(C+1, D, H, W)` probability volume.
pub fn argmax_labels(probs: &Array4<f32>) -> Result<LabelVolume> {
    if let Some(i) = probs.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let c = probs.shape()[0];
    if c == 0 || c > 256 {
        return Err(Error::ShapeMismatch(format!("{c} channels")));
    }
    let s = probs.shape();
    let data = Array3::from_shape_fn((s[1], s[2], s[3]), |(z, y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[k, z, y, x]] > probs[[best, z, y, x]] {
                best = k;
            }
        }
        best as u8
    });
    Ok(LabelVolume::new(data))
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let (ra, rb) = (find(parent, a), find(parent, b));
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// 26-connected labeling by two raster passes with union-find. Ids follow
/// first encounter in z-major scan order.
pub fn connected_components_26(binary: ArrayView3<'_, u8>) -> Result<ComponentVolume> {
    if let Some(i) = binary.iter().position(|&v| v > 1) {
        return Err(Error::invalid("binary", format!("value {} at flat index {i}", binary.iter().nth(i).unwrap())));
    }
    let s = binary.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let mut labels = Array3::<u32>::zeros((d, h, w));
    // provisional label 0 is reserved for background
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if binary[[z, y, x]] == 0 {
                    continue;
                }
                let mut current = 0u32;
                for dz in -1i64..=0 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            // only neighbors already visited in raster order
                            if dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)) {
                                continue;
                            }
                            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if nz < 0 || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let l = labels[[nz as usize, ny as usize, nx as usize]];
                            if l == 0 {
                                continue;
                            }
                            current = if current == 0 { find(&mut parent, l) } else { union(&mut parent, current, l) };
                        }
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                labels[[z, y, x]] = current;
            }
        }
    }
    let mut dense = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if dense[root] == 0 {
            count += 1;
            dense[root] = count;
        }
        *l = dense[root];
    }
    Ok(ComponentVolume {
        labels,
        component_count: count as usize,
    })
}

/// Component labeler used for per-class post-processing.
pub type Labeler<'a> = dyn Fn(ArrayView3<'_, u8>) -> Result<ComponentVolume> + 'a;

/// Runs `labeler` on each class mask and converts components to detections.
pub fn components_to_detections(
    labels: &LabelVolume,
    probs: &Array4<f32>,
    num_classes: usize,
    min_size: usize,
    labeler: &Labeler<'_>,
) -> Result<Vec<Detection>> {
    check_probs(labels, probs, num_classes)?;
    let mut out = Vec::new();
    for class in 1..=num_classes as u8 {
        let mask = labels.data().mapv(|v| u8::from(v == class));
        let comps = labeler(mask.view())?;
        if comps.labels.shape() != mask.shape() {
            return Err(Error::Backend("labeler returned a different shape".into()));
        }
        let n = comps.component_count;
        let mut sums = vec![[0.0f64; 3]; n];
        let mut sizes = vec![0usize; n];
        let mut score = vec![0.0f64; n];
        for ((z, y, x), &id) in comps.labels.indexed_iter() {
            if id == 0 {
                continue;
            }
            let i = id as usize - 1;
            if i >= n {
                return Err(Error::Backend(format!("component id {id} exceeds count {n}")));
            }
            sums[i][0] += z as f64;
            sums[i][1] += y as f64;
            sums[i][2] += x as f64;
            sizes[i] += 1;
            score[i] += 1.0 - probs[[0, z, y, x]] as f64;
        }
        for i in 0..n {
            if sizes[i] < min_size.max(1) {
                continue;
            }
            let k = sizes[i] as f64;
            out.push(Detection {
                class_id: class,
                center: sums[i].map(|s| s / k),
                size_vox: sizes[i],
                score: score[i] / k,
            });
        }
    }
    sort_detections(&mut out);
    Ok(out)
}

fn sort_detections(d: &mut [Detection]) {
    d.sort_by(|a, b| b.size_vox.cmp(&a.size_vox).then(a.class_id.cmp(&b.class_id)));
}

fn check_probs(labels: &LabelVolume, probs: &Array4<f32>, num_classes: usize) -> Result<()> {
    let s = probs.shape();
    if s[0] != num_classes + 1 || s[1..] != labels.shape()[..] {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?} with {num_classes} classes",
            s,
            labels.shape()
        )));
    }
    Ok(())
}

/// Uniform grid over points with cells of one bandwidth.
struct Grid {
    cell: f64,
    cells: std::collections::HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], cell: f64) -> Self {
        let mut cells: std::collections::HashMap<[i64; 3], Vec<usize>> = Default::default();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn neighbors<'a>(&'a self, p: &[f64; 3]) -> impl Iterator<Item = usize> + 'a {
        let k = key(p, self.cell);
        (-1..=1)
            .flat_map(move |a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| [k[0] + a, k[1] + b, k[2] + c])))
            .filter_map(|kk| self.cells.get(&kk))
            .flatten()
            .copied()
    }
}

fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
    p.map(|v| (v / cell).floor() as i64)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Flat-kernel mean shift. Seeds are all points for small sets and bin
/// centroids (bins of half a bandwidth) otherwise; modes closer than half a
/// bandwidth are merged, keeping the one with more support.
pub fn mean_shift_centers(points: &[[f64; 3]], bandwidth: f64) -> Result<Vec<[f64; 3]>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid("bandwidth", "must be positive"));
    }
    if points.is_empty() {
        return Err(Error::invalid("points", "empty point set"));
    }
    let grid = Grid::new(points, bandwidth);
    let bw2 = bandwidth * bandwidth;
    let seeds: Vec<[f64; 3]> = if points.len() <= MEANSHIFT_FULL_SEEDING_MAX {
        points.to_vec()
    } else {
        let mut bins: std::collections::BTreeMap<[i64; 3], ([f64; 3], usize)> = Default::default();
        for p in points {
            let e = bins.entry(key(p, bandwidth / 2.0)).or_insert(([0.0; 3], 0));
            (0..3).for_each(|i| e.0[i] += p[i]);
            e.1 += 1;
        }
        bins.values().map(|(s, n)| s.map(|v| v / *n as f64)).collect()
    };
    let mut modes: Vec<([f64; 3], usize)> = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let mut c = seed;
        let mut support = 0;
        for _ in 0..MEANSHIFT_MAX_ITER {
            let mut sum = [0.0; 3];
            let mut n = 0usize;
            for i in grid.neighbors(&c) {
                if dist2(&points[i], &c) <= bw2 {
                    (0..3).for_each(|a| sum[a] += points[i][a]);
                    n += 1;
                }
            }
            if n == 0 {
                break;
            }
            support = n;
            let next = sum.map(|v| v / n as f64);
            let moved = dist2(&next, &c).sqrt();
            c = next;
            if moved < MEANSHIFT_TOL {
                break;
            }
        }
        modes.push((c, support));
    }
    modes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal)));
    let merge2 = (bandwidth / 2.0).powi(2);
    let mut kept: Vec<[f64; 3]> = Vec::new();
    for (m, _) in modes {
        if kept.iter().all(|k| dist2(k, &m) > merge2) {
            kept.push(m);
        }
    }
    Ok(kept)
}

/// Mean-shift detections per class: each foreground voxel is assigned to its
/// nearest mode, detections report the assigned voxel count and mean
/// foreground probability.
pub fn meanshift_detections(
    labels: &LabelVolume,
    probs: &Array4<f32>,
    bandwidths: &[f64],
    min_size: usize,
) -> Result<Vec<Detection>> {
    let num_classes = bandwidths.len();
    check_probs(labels, probs, num_classes)?;
    let mut out = Vec::new();
    for class in 1..=num_classes as u8 {
        let voxels: Vec<[usize; 3]> = labels
            .data()
            .indexed_iter()
            .filter(|(_, &v)| v == class)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        if voxels.is_empty() {
            continue;
        }
        let points: Vec<[f64; 3]> = voxels.iter().map(|v| v.map(|c| c as f64)).collect();
        let centers = mean_shift_centers(&points, bandwidths[class as usize - 1])?;
        let mut sizes = vec![0usize; centers.len()];
        let mut score = vec![0.0f64; centers.len()];
        for (p, v) in points.iter().zip(&voxels) {
            let nearest = (0..centers.len())
                .min_by(|&a, &b| dist2(&centers[a], p).total_cmp(&dist2(&centers[b], p)))
                .expect("at least one mode");
            sizes[nearest] += 1;
            score[nearest] += 1.0 - probs[[0, v[0], v[1], v[2]]] as f64;
        }
        for (i, c) in centers.iter().enumerate() {
            if sizes[i] >= min_size.max(1) {
                out.push(Detection {
                    class_id: class,
                    center: *c,
                    size_vox: sizes[i],
                    score: score[i] / sizes[i] as f64,
                });
            }
        }
    }
    sort_detections(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostProcMethod {
    #[default]
    Cc3d,
    MeanShift,
}

impl std::str::FromStr for PostProcMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc3d" => Ok(Self::Cc3d),
            "meanshift" => Ok(Self::MeanShift),
            other => Err(Error::invalid("postproc", format!("'{other}' (expected cc3d or meanshift)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcConfig {
    pub method: PostProcMethod,
    pub min_size: usize,
    /// Mean-shift bandwidth; `None` uses each class radius.
    pub bandwidth: Option<f64>,
    #[serde(skip)]
    pub backend: CcBackend,
}

impl Default for PostProcConfig {
    fn default() -> Self {
        Self {
            method: PostProcMethod::Cc3d,
            min_size: DEFAULT_MIN_SIZE,
            bandwidth: None,
            backend: CcBackend::Reference,
        }
    }
}

/// Argmax followed by the configured clustering.
pub fn detect(probs: &Array4<f32>, catalog: &ClassCatalog, cfg: &PostProcConfig) -> Result<Vec<Detection>> {
    let labels = argmax_labels(probs)?;
    match cfg.method {
        PostProcMethod::Cc3d => {
            let backend = cfg.backend;
            components_to_detections(&labels, probs, catalog.len(), cfg.min_size, &|m| label_components(m, backend))
        }
        PostProcMethod::MeanShift => {
            let bw: Vec<f64> = catalog
                .entries()
                .iter()
                .map(|e| cfg.bandwidth.unwrap_or(e.radius_vox))
                .collect();
            meanshift_detections(&labels, probs, &bw, cfg.min_size)
        }
    }
}

pub const DETECTIONS_HEADER: &str = "class_name\tz\ty\tx\tsize\tscore";

pub fn write_detections(dets: &[Detection], catalog: &ClassCatalog) -> Result<String> {
    let mut s = String::from(DETECTIONS_HEADER);
    s.push('\n');
    for d in dets {
        let name = catalog
            .name(d.class_id)
            .ok_or_else(|| Error::invalid("class_id", format!("{} not in catalog", d.class_id)))?;
        let [z, y, x] = d.center;
        writeln!(s, "{name}\t{z:.3}\t{y:.3}\t{x:.3}\t{}\t{:.6}", d.size_vox, d.score).expect("string write");
    }
    Ok(s)
}

pub fn save_detections(path: &Path, dets: &[Detection], catalog: &ClassCatalog) -> Result<()> {
    std::fs::write(path, write_detections(dets, catalog)?).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str, catalog: &ClassCatalog) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if t.split('\t').next() == Some("class_name") {
                continue;
            }
        }
        let f: Vec<&str> = t.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let class = catalog.by_name(f[0]).ok_or_else(|| Error::Parse {
            line: line_no,
            reason: format!("unknown class '{}'", f[0]),
        })?;
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line: line_no,
                reason: format!("invalid number '{s}'"),
            })
        };
        out.push(Detection {
            class_id: class.id,
            center: [num(f[1])?, num(f[2])?, num(f[3])?],
            size_vox: f[4].parse().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("invalid size '{}'", f[4]),
            })?,
            score: num(f[5])?,
        });
    }
    Ok(out)
}

pub fn load_detections(path: &Path, catalog: &ClassCatalog) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, catalog)
}
