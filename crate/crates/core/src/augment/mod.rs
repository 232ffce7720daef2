//! Spatial transformation algebra and Volume Infill mixing.

mod infill;
mod transform;

pub use infill::{mix_chains, sample_dirichlet, volume_infill, AugChainSpec, MixResult};
pub use transform::{
    apply_chain, apply_transform, sample_transform, transform_density, transform_mask, TransformDesc,
};
