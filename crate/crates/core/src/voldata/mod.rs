//! Volumetric data model: tomograms, point annotations, class catalogs and
//! label volumes, plus file I/O.
//!
//! Coordinates are always `(z, y, x)` in voxel units. Voxel `(i, j, k)` has
//! its center at the real coordinate `(i, j, k)`.

mod annotations;
mod io;
mod raster;

pub use annotations::{load_annotations, parse_annotations, save_annotations, write_annotations};
pub use io::{load_volume, save_raw_channels, save_volume, VolumeFormat};
pub use raster::rasterize_spheres;

use ndarray::Array3;

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

/// A 3D density grid in `(z, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tomogram {
    data: Array3<f32>,
    voxel_size_nm: Option<f32>,
    name: String,
}

impl Tomogram {
    pub fn new(data: Array3<f32>, name: impl Into<String>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::invalid("data", "every dimension must be >= 1"));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            data,
            voxel_size_nm: None,
            name: name.into(),
        })
    }

    pub fn with_voxel_size(mut self, voxel_size_nm: Option<f32>) -> Result<Self> {
        if let Some(v) = voxel_size_nm {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("voxel_size_nm", format!("{v} is not positive")));
            }
        }
        self.voxel_size_nm = voxel_size_nm;
        Ok(self)
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn voxel_size_nm(&self) -> Option<f32> {
        self.voxel_size_nm
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn contains(&self, center: [f64; 3]) -> bool {
        in_bounds(self.shape(), center)
    }
}

pub(crate) fn in_bounds(shape: Shape3, c: [f64; 3]) -> bool {
    c.iter()
        .zip(shape.iter())
        .all(|(&v, &d)| v.is_finite() && v >= 0.0 && v <= (d - 1) as f64)
}

/// A weak point annotation: class, centroid and the class's minimum radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleLabel {
    pub class_id: u8,
    pub center: [f64; 3],
    pub radius_vox: f64,
}

impl ParticleLabel {
    pub fn distance_to(&self, p: [f64; 3]) -> f64 {
        distance(self.center, p)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub radius_vox: f64,
}

/// Ordered particle classes. Ids run contiguously from 1; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    entries: Vec<ClassEntry>,
}

impl ClassCatalog {
    /// Builds a catalog from `(name, radius)` pairs; ids are assigned 1..=C in order.
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let mut entries: Vec<ClassEntry> = Vec::new();
        for (i, (name, radius)) in classes.into_iter().enumerate() {
            let name = name.into();
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::invalid("catalog", format!("bad class name {name:?}")));
            }
            if entries.iter().any(|e| e.name == name) {
                return Err(Error::invalid("catalog", format!("duplicate class name {name}")));
            }
            if !(radius.is_finite() && radius > 0.0) {
                return Err(Error::invalid("catalog", format!("class {name}: radius must be > 0")));
            }
            if i >= u8::MAX as usize {
                return Err(Error::invalid("catalog", "at most 254 classes are supported"));
            }
            entries.push(ClassEntry {
                id: (i + 1) as u8,
                name,
                radius_vox: radius,
            });
        }
        if entries.is_empty() {
            return Err(Error::invalid("catalog", "at least one class is required"));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of output channels including background.
    pub fn num_channels(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn by_id(&self, id: u8) -> Option<&ClassEntry> {
        if id == 0 {
            return None;
        }
        self.entries.get(id as usize - 1)
    }

    pub fn radius(&self, id: u8) -> Option<f64> {
        self.by_id(id).map(|e| e.radius_vox)
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.by_id(id).map(|e| e.name.as_str())
    }
}

/// Per-voxel class indices aligned with a tomogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u8>,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    /// Checks every value against a catalog of `num_classes` foreground classes.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize > num_classes) {
            Some(v) => Err(Error::invalid(
                "labels",
                format!("value {v} exceeds class count {num_classes}"),
            )),
            None => Ok(()),
        }
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u8> {
        self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}
