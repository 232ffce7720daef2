//! Segmentation network, parameters, optimizer and checkpoints.

mod adam;
mod checkpoint;
pub mod ops;
mod real;
mod unet;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use ops::Tensor;
pub use real::Real;
pub use unet::{ForwardCache, Heads};

use ndarray::{Array3, Array5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use unet::Layout;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels: foreground classes plus background.
    pub num_classes: usize,
    pub depth: usize,
    /// Filters per encoder level; the first `depth` entries are used.
    pub channels: Vec<usize>,
    pub projection_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            num_classes,
            depth: 3,
            channels: vec![32, 48, 64],
            projection_dim: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("model.depth", "depth must be >= 1"));
        }
        if self.channels.len() < self.depth {
            return Err(Error::invalid(
                "model.channels",
                format!("{} widths given for depth {}", self.channels.len(), self.depth),
            ));
        }
        if self.channels[..self.depth].contains(&0) || self.in_channels == 0 {
            return Err(Error::invalid("model.channels", "widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model.num_classes", "need background plus one class"));
        }
        if self.projection_dim == 0 {
            return Err(Error::invalid("model.projection_dim", "must be positive"));
        }
        Ok(())
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.size_multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::invalid(
                "window",
                format!("input {dims:?} not divisible by {m} for depth {}", self.depth),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Network parameters in a fixed storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<ParamTensor<T>>) -> Result<Self> {
        config.validate()?;
        let (_, specs) = unet::parameter_specs(&config);
        if specs.len() != tensors.len()
            || specs
                .iter()
                .zip(&tensors)
                .any(|((n, s), t)| *n != t.name || *s != t.shape || t.data.len() != s.iter().product::<usize>())
        {
            return Err(Error::Checkpoint("parameter layout does not match config".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn data(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    pub(crate) fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [T], &mut [T]) {
        assert!(i < j);
        let (lo, hi) = self.tensors.split_at_mut(j);
        (&mut lo[i].data, &mut hi[0].data)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += scale * y);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|&v| v == T::zero()))
    }

    pub(crate) fn layout(&self) -> Layout {
        unet::parameter_specs(&self.config).0
    }

    /// Forward pass retaining activations for [`ModelParams::backward`].
    pub fn forward_train(&self, input: &Array3<f32>, heads: Heads) -> Result<ForwardCache<T>> {
        let dims = dims_of(input);
        self.config.check_input(dims)?;
        let x = Tensor::from_vec(1, dims, input.iter().map(|&v| T::from_f64(v as f64)).collect());
        Ok(unet::forward(self, &self.layout(), x, heads))
    }

    /// Accumulates the gradients of one sample into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: Option<&Tensor<T>>,
        grad_projection: Option<&[T]>,
        grads: &mut ModelParams<T>,
    ) {
        unet::backward(self, &self.layout(), cache, grad_logits, grad_projection, grads)
    }
}

fn dims_of(a: &Array3<f32>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// He-normal weights and zero biases, deterministic in `cfg.seed`.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let (_, specs) = unet::parameter_specs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = specs
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            ParamTensor { name, shape, data }
        })
        .collect();
    Ok(ModelParams {
        config: cfg.clone(),
        tensors,
    })
}

/// Per-voxel class logits for a batch of cubic subvolumes, shaped
/// `(batch, classes, d, h, w)`.
pub fn forward_segment(params: &ModelParams<f32>, batch: &[Array3<f32>]) -> Result<Array5<f32>> {
    let Some(first) = batch.first() else {
        return Err(Error::invalid("batch", "empty batch"));
    };
    let dims = dims_of(first);
    if batch.iter().any(|b| dims_of(b) != dims) {
        return Err(Error::ShapeMismatch("batch members differ in shape".into()));
    }
    let c = params.config.num_classes;
    let logits: Vec<Tensor<f32>> = batch
        .iter()
        .map(|x| {
            params
                .forward_train(x, Heads::SEGMENT)
                .map(|cache| cache.logits.expect("segment head"))
        })
        .collect::<Result<_>>()?;
    let mut out = Array5::<f32>::zeros((batch.len(), c, dims[0], dims[1], dims[2]));
    for (mut slot, l) in out.axis_iter_mut(Axis(0)).zip(logits) {
        let view = ndarray::ArrayView4::from_shape((c, dims[0], dims[1], dims[2]), &l.data).expect("logit shape");
        slot.assign(&view);
    }
    Ok(out)
}

/// Contrastive projection of one subvolume.
pub fn forward_project(params: &ModelParams<f32>, subvolume: &Array3<f32>) -> Result<Vec<f32>> {
    Ok(project_with_hidden(params, subvolume)?.1)
}

/// Returns the post-ReLU squashed embedding and the projection.
pub fn project_with_hidden(params: &ModelParams<f32>, subvolume: &Array3<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let cache = params.forward_train(subvolume, Heads::PROJECT)?;
    let hidden = unet::hidden(&cache).expect("projection head").to_vec();
    Ok((hidden, cache.projection.expect("projection head")))
}
