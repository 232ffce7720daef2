//! Training schedule and full-tomogram prediction.
//!
//! Epochs `1..=ssl_epochs` run contrastive pretraining on sliding-window
//! crops (plus consistency guidance when enabled); the remaining epochs run
//! supervised training on particle-centered, class-balanced crops, with
//! consistency guidance up to `cg_until_epoch`. Without SSP every epoch is
//! supervised.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, sample_transform, transform_density, volume_infill, AugChainSpec, TransformDesc};
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, ntxent_with_grad, supervised_loss_from_logits, LossWeights};
use crate::model::ops::softmax_channels;
use crate::model::{init_model, Adam, ForwardCache, Heads, ModelConfig, ModelParams, Tensor};
use crate::sampling::{balanced_batches, center_crop, extract_subvolume, sliding_windows, stitch_predictions};
use crate::voldata::{rasterize_spheres, ClassCatalog, ParticleLabel, Tomogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Ssp,
    Vi,
    Cg,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Ssp, Component::Vi, Component::Cg];

    fn bit(self) -> u8 {
        match self {
            Component::Ssp => 1,
            Component::Vi => 2,
            Component::Cg => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Ssp => "SSP",
            Component::Vi => "VI",
            Component::Cg => "CG",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SSP" => Ok(Component::Ssp),
            "VI" => Ok(Component::Vi),
            "CG" => Ok(Component::Cg),
            other => Err(Error::invalid("components", format!("unknown component '{other}'"))),
        }
    }
}

/// Subset of {SSP, VI, CG}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const NONE: ComponentSet = ComponentSet(0);
    pub const FULL: ComponentSet = ComponentSet(7);

    pub fn contains(self, c: Component) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn with(self, c: Component) -> Self {
        Self(self.0 | c.bit())
    }

    pub fn without(self, c: Component) -> Self {
        Self(self.0 & !c.bit())
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// All eight subsets in bitmask order.
    pub fn all_subsets() -> impl Iterator<Item = ComponentSet> {
        (0..8).map(ComponentSet)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl FromIterator<Component> for ComponentSet {
    fn from_iter<I: IntoIterator<Item = Component>>(iter: I) -> Self {
        iter.into_iter().fold(ComponentSet::NONE, ComponentSet::with)
    }
}

impl FromStr for ComponentSet {
    type Err = Error;

    /// Comma- or plus-separated names; empty, `none` or `baseline` is the empty set.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("baseline") {
            return Ok(ComponentSet::NONE);
        }
        t.split([',', '+']).map(str::parse).collect()
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("baseline");
        }
        let names: Vec<&str> = Component::ALL.iter().filter(|c| self.contains(**c)).map(|c| c.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl From<ComponentSet> for String {
    fn from(c: ComponentSet) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ComponentSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub ssl_epochs: usize,
    /// Consistency guidance is applied in epochs `1..=cg_until_epoch`.
    pub cg_until_epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub subvolume: usize,
    /// Window stride for the contrastive phase and for prediction.
    pub stride: usize,
    pub components: ComponentSet,
    pub seed: u64,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Supervised batches per epoch are `ceil(#labels / batch) * oversample`.
    pub oversample: usize,
    /// Random transform applied to every supervised crop, with or without VI.
    pub base_augment: bool,
    pub loss: LossWeights,
    pub vi: AugChainSpec,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            total_epochs: 8000,
            ssl_epochs: 10,
            cg_until_epoch: 4000,
            lr: 1e-4,
            batch_size: 16,
            subvolume: 24,
            stride: 12,
            components: ComponentSet::FULL,
            seed: 0,
            checkpoint_every: 0,
            oversample: 4,
            base_augment: true,
            loss: LossWeights::default(),
            vi: AugChainSpec::default(),
            model: ModelConfig::new(num_classes + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ssl_epochs <= self.cg_until_epoch && self.cg_until_epoch <= self.total_epochs) {
            return Err(Error::invalid(
                "train",
                format!(
                    "need ssl_epochs <= cg_until_epoch <= total_epochs, got {} / {} / {}",
                    self.ssl_epochs, self.cg_until_epoch, self.total_epochs
                ),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr", "must be positive"));
        }
        if self.batch_size == 0 || self.oversample == 0 || self.stride == 0 {
            return Err(Error::invalid("train", "batch_size, oversample and stride must be >= 1"));
        }
        self.model.validate()?;
        self.model.check_input([self.subvolume; 3])?;
        self.loss.validate()?;
        self.vi.validate()
    }

    /// Crop edge before augmentation: `ceil(sqrt(2) * W)`, so rotated corners
    /// stay inside real data.
    pub fn enlarged_size(&self) -> usize {
        (std::f64::consts::SQRT_2 * self.subvolume as f64).ceil() as usize
    }

    fn ssp(&self) -> bool {
        self.components.contains(Component::Ssp)
    }

    fn cg_active(&self, epoch: usize) -> bool {
        self.components.contains(Component::Cg) && epoch <= self.cg_until_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ssl,
    Supervised,
}

/// Mean loss terms over the batches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub supervised: f64,
    pub cg: f64,
    pub ntxent: f64,
    pub batches: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub supervised_batches_per_epoch: usize,
    pub ssl_batches_per_epoch: usize,
    pub optimizer_resets: Vec<usize>,
    pub wall_ms: u64,
}

/// Zero-mean, unit-variance copy of the volume.
pub fn standardize(data: &Array3<f32>) -> Array3<f32> {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
    data.mapv(|v| ((v as f64 - mean) / sd) as f32)
}

struct Context<'a> {
    cfg: &'a TrainConfig,
    density: Array3<f32>,
    mask: Array3<u8>,
    num_classes: usize,
}

/// Trains a model; `on_epoch` sees each completed epoch and the current parameters.
pub fn train_with(
    cfg: &TrainConfig,
    tomogram: &Tomogram,
    labels: &[ParticleLabel],
    catalog: &ClassCatalog,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, TrainReport)> {
    let mut cfg = cfg.clone();
    cfg.model.num_classes = catalog.num_channels();
    cfg.model.seed = cfg.seed;
    cfg.validate()?;
    for e in catalog.entries() {
        if !labels.iter().any(|l| l.class_id == e.id) {
            return Err(Error::invalid("labels", format!("class '{}' has no labels", e.name)));
        }
    }
    if let Some(l) = labels.iter().find(|l| catalog.by_id(l.class_id).is_none()) {
        return Err(Error::invalid("labels", format!("class id {} not in catalog", l.class_id)));
    }
    let started = Instant::now();
    let mut params = init_model(&cfg.model)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let ctx = Context {
        cfg: &cfg,
        density: standardize(tomogram.data()),
        mask: rasterize_spheres(labels, tomogram.shape())?.into_data(),
        num_classes: catalog.len(),
    };
    let windows = if cfg.ssp() && cfg.ssl_epochs > 0 {
        let grid = sliding_windows(tomogram.shape(), cfg.subvolume, cfg.stride)?;
        if grid.len() < 2 {
            return Err(Error::invalid("ssl", "contrastive phase needs at least two windows"));
        }
        grid.origins
    } else {
        Vec::new()
    };
    let ssl_batches = windows.len().div_ceil(cfg.batch_size).max(usize::from(!windows.is_empty()));
    let sup_batches = labels.len().div_ceil(cfg.batch_size) * cfg.oversample;
    let mut batcher = balanced_batches(labels, catalog.len(), cfg.batch_size, ChaCha8Rng::seed_from_u64(rng.random()))?;

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.total_epochs),
        supervised_batches_per_epoch: sup_batches,
        ssl_batches_per_epoch: ssl_batches,
        optimizer_resets: Vec::new(),
        wall_ms: 0,
    };
    let ssl_until = if cfg.ssp() { cfg.ssl_epochs } else { 0 };
    for epoch in 1..=cfg.total_epochs {
        let t0 = Instant::now();
        let phase = if epoch <= ssl_until { Phase::Ssl } else { Phase::Supervised };
        if epoch == ssl_until + 1 && ssl_until > 0 {
            opt.reset();
            report.optimizer_resets.push(epoch);
        }
        let mut rec = EpochRecord {
            epoch,
            phase,
            supervised: 0.0,
            cg: 0.0,
            ntxent: 0.0,
            batches: 0,
            wall_ms: 0,
        };
        match phase {
            Phase::Ssl => {
                let mut order = windows.clone();
                order.shuffle(&mut rng);
                let mut chunks: Vec<Vec<[usize; 3]>> = order.chunks(cfg.batch_size).map(<[_]>::to_vec).collect();
                if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
                    let tail = chunks.pop().expect("non-empty");
                    chunks.last_mut().expect("non-empty").extend(tail);
                }
                for chunk in chunks {
                    let (nt, cg) = ssl_step(&ctx, &mut params, &mut opt, &chunk, epoch, &mut rng)?;
                    rec.ntxent += nt;
                    rec.cg += cg;
                    rec.batches += 1;
                }
            }
            Phase::Supervised => {
                for _ in 0..sup_batches {
                    let batch = batcher.next().expect("infinite stream");
                    let (sup, cg) = supervised_step(&ctx, &mut params, &mut opt, &batch, epoch, &mut rng)?;
                    rec.supervised += sup;
                    rec.cg += cg;
                    rec.batches += 1;
                }
            }
        }
        let nb = rec.batches.max(1) as f64;
        rec.supervised /= nb;
        rec.cg /= nb;
        rec.ntxent /= nb;
        rec.wall_ms = t0.elapsed().as_millis() as u64;
        on_epoch(&rec, &params)?;
        report.epochs.push(rec);
    }
    report.wall_ms = started.elapsed().as_millis() as u64;
    Ok((params, report))
}

pub fn train(
    cfg: &TrainConfig,
    tomogram: &Tomogram,
    labels: &[ParticleLabel],
    catalog: &ClassCatalog,
) -> Result<(ModelParams, TrainReport)> {
    train_with(cfg, tomogram, labels, catalog, &mut |_, _| Ok(()))
}

fn crop_center(origin: [usize; 3], w: usize) -> [f64; 3] {
    origin.map(|o| o as f64 + (w as f64 - 1.0) / 2.0)
}

/// One augmented view of a density crop.
fn ssl_view(ctx: &Context<'_>, big: &Array3<f32>, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
    let cfg = ctx.cfg;
    let out = if cfg.components.contains(Component::Vi) {
        let zeros = Array3::<u8>::zeros(big.raw_dim());
        volume_infill(big, &zeros, &cfg.vi, rng, cfg.subvolume)?.density_mix
    } else {
        transform_density(big.view(), &sample_transform(rng, cfg.subvolume))?
    };
    Ok(center_crop(&out, cfg.subvolume))
}

fn ssl_step(
    ctx: &Context<'_>,
    params: &mut ModelParams,
    opt: &mut Adam,
    origins: &[[usize; 3]],
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let cfg = ctx.cfg;
    let use_cg = cfg.cg_active(epoch);
    let big = cfg.enlarged_size();
    let mut caches1 = Vec::with_capacity(origins.len());
    let mut caches2 = Vec::with_capacity(origins.len());
    let mut first_views = Vec::with_capacity(origins.len());
    for &o in origins {
        let crop = extract_subvolume(ctx.density.view(), None, crop_center(o, cfg.subvolume), big)?.density;
        let v1 = ssl_view(ctx, &crop, rng)?;
        let v2 = ssl_view(ctx, &crop, rng)?;
        let heads1 = if use_cg { Heads::BOTH } else { Heads::PROJECT };
        caches1.push(params.forward_train(&v1, heads1)?);
        caches2.push(params.forward_train(&v2, Heads::PROJECT)?);
        first_views.push(v1);
    }
    let z1: Vec<Vec<f32>> = caches1.iter().map(|c| c.projection.clone().expect("projection")).collect();
    let z2: Vec<Vec<f32>> = caches2.iter().map(|c| c.projection.clone().expect("projection")).collect();
    let (nt, (g1, g2)) = ntxent_with_grad(&z1, &z2, cfg.loss.temperature)?;
    let mut grads = params.zeros_like();
    for (c, g) in caches1.iter().zip(&g1).chain(caches2.iter().zip(&g2)) {
        params.backward(c, None, Some(g), &mut grads);
    }
    drop(caches2);
    let mut cg_value = 0.0;
    if use_cg {
        cg_value = cg_step(ctx, params, &first_views, &caches1, &mut grads, rng)?;
    }
    opt.step(params, &grads);
    Ok((nt as f64, cg_value))
}

/// Adds the consistency-guidance gradient for `inputs` (whose detached
/// predictions are in `caches`) to `grads` and returns the scaled loss.
fn cg_step(
    ctx: &Context<'_>,
    params: &ModelParams,
    inputs: &[Array3<f32>],
    caches: &[ForwardCache<f32>],
    grads: &mut ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = ctx.cfg;
    let transforms: Vec<TransformDesc> = inputs.iter().map(|_| sample_transform(rng, cfg.subvolume)).collect();
    let tcaches = inputs
        .iter()
        .zip(&transforms)
        .map(|(x, t)| params.forward_train(&transform_density(x.view(), t)?, Heads::SEGMENT))
        .collect::<Result<Vec<_>>>()?;
    let m_prime: Vec<&Tensor<f32>> = tcaches.iter().map(|c| c.logits.as_ref().expect("logits")).collect();
    let m: Vec<&Tensor<f32>> = caches.iter().map(|c| c.logits.as_ref().expect("logits")).collect();
    let (parts, g) = consistency_loss(&m_prime, &m, &transforms, &cfg.loss)?;
    let lam = cfg.loss.lambda_cg as f32;
    for (c, mut gl) in tcaches.iter().zip(g) {
        gl.data.iter_mut().for_each(|v| *v *= lam);
        params.backward(c, Some(&gl), None, grads);
    }
    Ok(cfg.loss.lambda_cg * parts.total)
}

/// Particle-centered training pair: base transform, optional VI, center crop.
fn supervised_sample(
    ctx: &Context<'_>,
    label: &ParticleLabel,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, Vec<u8>)> {
    let cfg = ctx.cfg;
    let s = extract_subvolume(ctx.density.view(), Some(ctx.mask.view()), label.center, cfg.enlarged_size())?;
    let (mut d, mut m) = (s.density, s.mask.expect("mask requested"));
    if cfg.base_augment {
        (d, m) = apply_transform(&d, &m, &sample_transform(rng, cfg.subvolume))?;
    }
    if cfg.components.contains(Component::Vi) {
        let mix = volume_infill(&d, &m, &cfg.vi, rng, cfg.subvolume)?;
        (d, m) = (mix.density_mix, mix.mask_mix);
    }
    let x = center_crop(&d, cfg.subvolume);
    let t = center_crop(&m, cfg.subvolume);
    Ok((x, t.iter().copied().collect()))
}

fn supervised_step(
    ctx: &Context<'_>,
    params: &mut ModelParams,
    opt: &mut Adam,
    batch: &[ParticleLabel],
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for l in batch {
        let (x, t) = supervised_sample(ctx, l, rng)?;
        inputs.push(x);
        targets.push(t);
    }
    debug_assert!(targets.iter().flatten().all(|&v| (v as usize) <= ctx.num_classes));
    let caches = inputs
        .iter()
        .map(|x| params.forward_train(x, Heads::SEGMENT))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<&Tensor<f32>> = caches.iter().map(|c| c.logits.as_ref().expect("logits")).collect();
    let (parts, g) = supervised_loss_from_logits(&logits, &targets, &ctx.cfg.loss)?;
    let mut grads = params.zeros_like();
    for (c, gl) in caches.iter().zip(&g) {
        params.backward(c, Some(gl), None, &mut grads);
    }
    let mut cg = 0.0;
    if ctx.cfg.cg_active(epoch) {
        cg = cg_step(ctx, params, &inputs, &caches, &mut grads, rng)?;
    }
    opt.step(params, &grads);
    Ok((parts.total, cg))
}

/// Sliding-window prediction, stitched into `(C+1, D, H, W)` probabilities.
pub fn predict(params: &ModelParams, tomogram: &Tomogram, window: usize, stride: usize) -> Result<Array4<f32>> {
    params.config().check_input([window; 3]).map_err(|e| {
        Error::invalid("window", format!("window {window} incompatible with model: {e}"))
    })?;
    let grid = sliding_windows(tomogram.shape(), window, stride)?;
    let density = standardize(tomogram.data());
    let blocks = grid
        .origins
        .iter()
        .map(|o| {
            let crop = window_view(density.view(), *o, window).to_owned();
            let cache = params.forward_train(&crop, Heads::SEGMENT)?;
            let p = softmax_channels(cache.logits.as_ref().expect("logits"));
            Ok(Array4::from_shape_vec((p.channels, window, window, window), p.data).expect("block shape"))
        })
        .collect::<Result<Vec<_>>>()?;
    stitch_predictions(&grid, &blocks)
}

fn window_view(v: ArrayView3<'_, f32>, o: [usize; 3], w: usize) -> ArrayView3<'_, f32> {
    v.slice_move(s![o[0]..o[0] + w, o[1]..o[1] + w, o[2]..o[2] + w])
}
