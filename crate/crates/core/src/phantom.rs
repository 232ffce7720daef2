//! Synthetic tomograms with known particle positions.
//!
//! Particles are stamped at rejection-sampled positions, optionally blurred
//! along z (a crude stand-in for missing-wedge elongation) and corrupted with
//! additive Gaussian noise. The background level is 0.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::voldata::{ClassCatalog, ParticleLabel, Shape3, Tomogram};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Density profile stamped for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeTemplate {
    SolidSphere,
    /// Bright rim with a dimmer core.
    HollowShell,
    /// Elongated along x with semi-axes `(r, r, 1.6 r)`.
    Ellipsoid,
}

impl ShapeTemplate {
    const ELLIPSOID_X: f64 = 1.6;
    const SHELL_CORE: f32 = 0.4;

    /// Half-width of the template's bounding box.
    pub fn extent(self, radius: f64) -> f64 {
        match self {
            ShapeTemplate::Ellipsoid => radius * Self::ELLIPSOID_X,
            _ => radius,
        }
    }

    /// Relative density (0..=1) at an offset from the particle center.
    pub fn profile(self, radius: f64, dz: f64, dy: f64, dx: f64) -> f32 {
        match self {
            ShapeTemplate::SolidSphere => {
                if dz * dz + dy * dy + dx * dx <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            }
            ShapeTemplate::HollowShell => {
                let d = (dz * dz + dy * dy + dx * dx).sqrt();
                let rim = (0.35 * radius).max(1.0);
                if d > radius {
                    0.0
                } else if d >= radius - rim {
                    1.0
                } else {
                    Self::SHELL_CORE
                }
            }
            ShapeTemplate::Ellipsoid => {
                let ax = radius * Self::ELLIPSOID_X;
                let q = (dz * dz + dy * dy) / (radius * radius) + dx * dx / (ax * ax);
                if q <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for ShapeTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" | "solid" => Ok(ShapeTemplate::SolidSphere),
            "shell" | "hollow" => Ok(ShapeTemplate::HollowShell),
            "ellipsoid" => Ok(ShapeTemplate::Ellipsoid),
            other => Err(Error::invalid("template", format!("unknown template {other}"))),
        }
    }
}

impl std::fmt::Display for ShapeTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeTemplate::SolidSphere => "sphere",
            ShapeTemplate::HollowShell => "shell",
            ShapeTemplate::Ellipsoid => "ellipsoid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub shape: Shape3,
    pub catalog: ClassCatalog,
    /// One template per catalog entry, in catalog order.
    pub templates: Vec<ShapeTemplate>,
    pub particles_per_class: usize,
    pub density_contrast: f32,
    pub noise_sigma: f32,
    pub anisotropy_blur: f32,
    pub min_separation_vox: f64,
    pub seed: u64,
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        if self.templates.len() != self.catalog.len() {
            return Err(Error::invalid("templates", "need one template per class"));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("shape", "dimensions must be >= 1"));
        }
        if !(self.density_contrast > 0.0 && self.density_contrast.is_finite()) {
            return Err(Error::invalid("density_contrast", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.anisotropy_blur >= 0.0 && self.min_separation_vox >= 0.0) {
            return Err(Error::invalid("phantom", "noise, blur and separation must be non-negative"));
        }
        Ok(())
    }
}

/// Generates a phantom tomogram and the labels of every stamped particle.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Tomogram, Vec<ParticleLabel>)> {
    cfg.validate()?;
    let mut place_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let requested = cfg.particles_per_class * cfg.catalog.len();
    let mut labels: Vec<ParticleLabel> = Vec::with_capacity(requested);

    for (entry, &template) in cfg.catalog.entries().iter().zip(&cfg.templates) {
        let margin = template.extent(entry.radius_vox).ceil();
        let ranges: Vec<(f64, f64)> = cfg
            .shape
            .iter()
            .map(|&d| (margin, (d as f64 - 1.0 - margin)))
            .collect();
        if ranges.iter().any(|&(lo, hi)| hi < lo) {
            return Err(Error::Placement {
                achieved: labels.len(),
                requested,
            });
        }
        for _ in 0..cfg.particles_per_class {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let c = [
                    sample_in(&mut place_rng, ranges[0]),
                    sample_in(&mut place_rng, ranges[1]),
                    sample_in(&mut place_rng, ranges[2]),
                ];
                if labels.iter().all(|l| l.distance_to(c) >= cfg.min_separation_vox) {
                    labels.push(ParticleLabel {
                        class_id: entry.id,
                        center: c,
                        radius_vox: entry.radius_vox,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Placement {
                    achieved: labels.len(),
                    requested,
                });
            }
        }
    }

    let mut data = Array3::<f32>::zeros(cfg.shape);
    for l in &labels {
        let template = cfg.templates[l.class_id as usize - 1];
        stamp(&mut data, l, template, cfg.density_contrast);
    }
    if cfg.anisotropy_blur > 0.0 {
        blur_axis(&mut data, Axis(0), cfg.anisotropy_blur);
    }
    if cfg.noise_sigma > 0.0 {
        // Independent stream so noise never perturbs placement.
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(1);
        let normal = Normal::new(0.0f32, cfg.noise_sigma).expect("sigma validated");
        for v in data.iter_mut() {
            *v += normal.sample(&mut noise_rng);
        }
    }
    let tomo = Tomogram::new(data, format!("phantom-{}", cfg.seed))?;
    Ok((tomo, labels))
}

fn sample_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn stamp(data: &mut Array3<f32>, l: &ParticleLabel, template: ShapeTemplate, contrast: f32) {
    let shape = data.shape().to_vec();
    let r = l.radius_vox;
    let ext = [r, r, template.extent(r)];
    let mut bounds = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = (l.center[a] - ext[a]).ceil().max(0.0) as usize;
        let hi = ((l.center[a] + ext[a]).floor() as usize).min(shape[a] - 1);
        bounds[a] = (lo, hi);
    }
    for z in bounds[0].0..=bounds[0].1 {
        for y in bounds[1].0..=bounds[1].1 {
            for x in bounds[2].0..=bounds[2].1 {
                let p = template.profile(
                    r,
                    z as f64 - l.center[0],
                    y as f64 - l.center[1],
                    x as f64 - l.center[2],
                );
                if p > 0.0 {
                    let v = &mut data[[z, y, x]];
                    *v = v.max(p * contrast);
                }
            }
        }
    }
}

/// Separable Gaussian blur along one axis with reflect boundaries.
pub(crate) fn blur_axis(data: &mut Array3<f32>, axis: Axis, sigma: f32) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let n = data.len_of(axis);
    let mut buf = vec![0.0f32; n];
    for mut lane in data.lanes_mut(axis) {
        for (i, out) in buf.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = reflect(i as isize + k as isize - radius, n);
                acc += w * lane[j];
            }
            *out = acc;
        }
        for (dst, &src) in lane.iter_mut().zip(&buf) {
            *dst = src;
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
