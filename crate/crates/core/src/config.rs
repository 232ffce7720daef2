//! Flat `key = value` settings with `#` comments and `--set` overrides.
//!
//! Every key has a default; files and overrides only need to list changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalx::ToleranceMode;
use crate::phantom::{PhantomConfig, ShapeTemplate};
use crate::postproc::{PostProcConfig, PostProcMethod};
use crate::trainer::{ComponentSet, TrainConfig};
use crate::voldata::{ClassCatalog, Shape3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub radius_vox: f64,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhantomSettings {
    pub shape: Shape3,
    pub particles_per_class: usize,
    pub density_contrast: f32,
    pub noise_sigma: f32,
    pub anisotropy_blur: f32,
    pub min_separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateSettings {
    pub seeds: Vec<u64>,
    /// Phantom seed of the held-out evaluation volume.
    pub heldout_seed: u64,
    pub subsets: Vec<ComponentSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub classes: Vec<ClassSpec>,
    pub phantom: PhantomSettings,
    pub train: TrainConfig,
    /// Labels per class used for training; `None` uses every label.
    pub shots: Option<usize>,
    pub postproc: PostProcConfig,
    pub tolerance: ToleranceMode,
    pub ablate: AblateSettings,
}

impl Default for Settings {
    fn default() -> Self {
        let classes = vec![
            ClassSpec {
                name: "shell".into(),
                radius_vox: 5.0,
                template: "shell".into(),
            },
            ClassSpec {
                name: "sphere".into(),
                radius_vox: 3.0,
                template: "sphere".into(),
            },
            ClassSpec {
                name: "rod".into(),
                radius_vox: 4.0,
                template: "ellipsoid".into(),
            },
        ];
        Self {
            train: TrainConfig::new(classes.len()),
            classes,
            phantom: PhantomSettings {
                shape: [96, 96, 96],
                particles_per_class: 40,
                density_contrast: 1.0,
                noise_sigma: 0.8,
                anisotropy_blur: 1.0,
                min_separation: 12.0,
                seed: 1,
            },
            shots: None,
            postproc: PostProcConfig::default(),
            tolerance: ToleranceMode::PerClassRadius,
            ablate: AblateSettings {
                seeds: vec![0, 1, 2],
                heldout_seed: 2,
                subsets: ComponentSet::all_subsets().collect(),
            },
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        reason: format!("invalid value '{v}'"),
    })
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_string(),
            reason: format!("expected true or false, got '{v}'"),
        }),
    }
}

fn config_err(key: &str, e: Error) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: e.to_string(),
    }
}

fn parse_classes(v: &str) -> Result<Vec<ClassSpec>> {
    let key = "catalog.classes";
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config {
                key: key.into(),
                reason: format!("'{item}' is not name:radius:template"),
            });
        }
        parts[2].parse::<ShapeTemplate>().map_err(|e| config_err(key, e))?;
        out.push(ClassSpec {
            name: parts[0].to_string(),
            radius_vox: num(key, parts[1])?,
            template: parts[2].to_string(),
        });
    }
    Ok(out)
}

impl Settings {
    /// Applies one assignment. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "catalog.classes" => self.classes = parse_classes(v)?,
            "phantom.shape" => {
                let dims: Vec<usize> = list(key, v)?;
                self.phantom.shape = match dims[..] {
                    [n] => [n; 3],
                    [d, h, w] => [d, h, w],
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            reason: "expected one or three dimensions".into(),
                        })
                    }
                };
            }
            "phantom.particles_per_class" => self.phantom.particles_per_class = num(key, v)?,
            "phantom.density_contrast" => self.phantom.density_contrast = num(key, v)?,
            "phantom.noise_sigma" => self.phantom.noise_sigma = num(key, v)?,
            "phantom.anisotropy_blur" => self.phantom.anisotropy_blur = num(key, v)?,
            "phantom.min_separation" => self.phantom.min_separation = num(key, v)?,
            "phantom.seed" => self.phantom.seed = num(key, v)?,
            "train.total_epochs" => t.total_epochs = num(key, v)?,
            "train.ssl_epochs" => t.ssl_epochs = num(key, v)?,
            "train.cg_until_epoch" => t.cg_until_epoch = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.subvolume" => t.subvolume = num(key, v)?,
            "train.stride" => t.stride = num(key, v)?,
            "train.components" => t.components = v.parse().map_err(|e| config_err(key, e))?,
            "train.seed" => t.seed = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.oversample" => t.oversample = num(key, v)?,
            "train.base_augment" => t.base_augment = boolean(key, v)?,
            "train.shots" => self.shots = if v == "all" { None } else { Some(num(key, v)?) },
            "model.depth" => t.model.depth = num(key, v)?,
            "model.channels" => t.model.channels = list(key, v)?,
            "model.projection_dim" => t.model.projection_dim = num(key, v)?,
            "vi.m" => t.vi.m = num(key, v)?,
            "vi.k_max" => t.vi.k_max = num(key, v)?,
            "vi.alpha" => t.vi.dirichlet_alpha = num(key, v)?,
            "vi.beta_a" => t.vi.beta_params.0 = num(key, v)?,
            "vi.beta_b" => t.vi.beta_params.1 = num(key, v)?,
            "loss.lambda_dice" => t.loss.lambda_dice = num(key, v)?,
            "loss.lambda_focal" => t.loss.lambda_focal = num(key, v)?,
            "loss.lambda_cg" => t.loss.lambda_cg = num(key, v)?,
            "loss.gamma" => t.loss.focal_gamma = num(key, v)?,
            "ssl.temperature" => t.loss.temperature = num(key, v)?,
            "postproc.method" => self.postproc.method = v.parse::<PostProcMethod>().map_err(|e| config_err(key, e))?,
            "postproc.min_size" => self.postproc.min_size = num(key, v)?,
            "postproc.bandwidth" => {
                self.postproc.bandwidth = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "postproc.backend" => self.postproc.backend = v.parse().map_err(|e| config_err(key, e))?,
            "eval.tolerance" => self.tolerance = v.parse().map_err(|e| config_err(key, e))?,
            "ablate.seeds" => self.ablate.seeds = list(key, v)?,
            "ablate.heldout_seed" => self.ablate.heldout_seed = num(key, v)?,
            "ablate.subsets" => {
                self.ablate.subsets = if v == "all" {
                    ComponentSet::all_subsets().collect()
                } else {
                    v.split(';').map(|s| s.parse().map_err(|e| config_err(key, e))).collect::<Result<_>>()?
                }
            }
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("expected key = value, got {line:?}"),
                });
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.to_string(),
            reason: "override must look like key=value".into(),
        })?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the optional file, then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            s.apply_text(&text)?;
        }
        for o in overrides {
            s.apply_override(o)?;
        }
        s.finish()
    }

    fn finish(mut self) -> Result<Self> {
        let catalog = self.catalog()?;
        self.train.model.num_classes = catalog.num_channels();
        Ok(self)
    }

    /// Checks settings that only matter for training.
    pub fn check_training(&self) -> Result<()> {
        let catalog = self.catalog()?;
        if self.train.batch_size % catalog.len().max(1) != 0 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                reason: format!(
                    "{} is not a multiple of the {} classes in catalog.classes",
                    self.train.batch_size,
                    catalog.len()
                ),
            });
        }
        self.train.validate()
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        ClassCatalog::new(self.classes.iter().map(|c| (c.name.clone(), c.radius_vox)))
    }

    pub fn phantom_config(&self, seed: u64) -> Result<PhantomConfig> {
        Ok(PhantomConfig {
            shape: self.phantom.shape,
            catalog: self.catalog()?,
            templates: self
                .classes
                .iter()
                .map(|c| c.template.parse())
                .collect::<Result<_>>()?,
            particles_per_class: self.phantom.particles_per_class,
            density_contrast: self.phantom.density_contrast,
            noise_sigma: self.phantom.noise_sigma,
            anisotropy_blur: self.phantom.anisotropy_blur,
            min_separation_vox: self.phantom.min_separation,
            seed,
        })
    }
}
