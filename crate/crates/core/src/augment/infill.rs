//! Volume Infill: AugMix-style mixing of spatially transformed copies of a
//! subvolume, applied jointly to densities and class masks.

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::transform::{apply_chain, sample_transform, TransformDesc};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugChainSpec {
    /// Number of augmentation chains.
    pub m: usize,
    /// Maximum chain depth; each chain draws its depth uniformly from `1..=k_max`.
    pub k_max: usize,
    pub dirichlet_alpha: f64,
    pub beta_params: (f64, f64),
}

impl Default for AugChainSpec {
    fn default() -> Self {
        Self {
            m: 3,
            k_max: 3,
            dirichlet_alpha: 1.0,
            beta_params: (1.0, 1.0),
        }
    }
}

impl AugChainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.k_max < 1 {
            return Err(Error::invalid("vi", "m and k_max must be >= 1"));
        }
        let (a, b) = self.beta_params;
        if !(self.dirichlet_alpha > 0.0 && a > 0.0 && b > 0.0) {
            return Err(Error::invalid("vi", "alpha and beta parameters must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub density_mix: Array3<f32>,
    pub mask_mix: Array3<u8>,
    pub weights: Vec<f64>,
    pub beta: f64,
    pub chain_descs: Vec<Vec<TransformDesc>>,
}

/// Symmetric Dirichlet sample via normalized Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Samples chains, weights and the skip coefficient, then mixes.
pub fn volume_infill<R: Rng + ?Sized>(
    density: &Array3<f32>,
    mask: &Array3<u8>,
    spec: &AugChainSpec,
    rng: &mut R,
    subvol_size: usize,
) -> Result<MixResult> {
    spec.validate()?;
    if density.shape() != mask.shape() {
        return Err(Error::ShapeMismatch("density and mask differ".into()));
    }
    let chains: Vec<Vec<TransformDesc>> = (0..spec.m)
        .map(|_| {
            let k = rng.random_range(1..=spec.k_max);
            (0..k).map(|_| sample_transform(rng, subvol_size)).collect()
        })
        .collect();
    let weights = sample_dirichlet(rng, spec.dirichlet_alpha, spec.m);
    let (a, b) = spec.beta_params;
    let beta = Beta::new(a, b).expect("beta validated").sample(rng);
    mix_chains(density, mask, chains, weights, beta)
}

/// Deterministic mixing core.
///
/// Densities: `beta * x + (1 - beta) * sum_i w_i * chain_i(x)`.
/// Masks: one-hot channels mixed with the same coefficients, then argmax;
/// ties go to foreground over background, then to the lower class id.
pub fn mix_chains(
    density: &Array3<f32>,
    mask: &Array3<u8>,
    chains: Vec<Vec<TransformDesc>>,
    weights: Vec<f64>,
    beta: f64,
) -> Result<MixResult> {
    if chains.is_empty() || chains.len() != weights.len() {
        return Err(Error::invalid("weights", "one weight per chain is required"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("beta", format!("{beta} outside [0, 1]")));
    }
    let outputs = chains
        .iter()
        .map(|c| apply_chain(density, mask, c))
        .collect::<Result<Vec<_>>>()?;

    let mut aug = Array3::<f64>::zeros(density.raw_dim());
    for ((d, _), &w) in outputs.iter().zip(&weights) {
        Zip::from(&mut aug).and(d).for_each(|a, &v| *a += w * v as f64);
    }
    let mut density_mix = Array3::<f32>::zeros(density.raw_dim());
    Zip::from(&mut density_mix)
        .and(density)
        .and(&aug)
        .for_each(|o, &x, &a| *o = (beta * x as f64 + (1.0 - beta) * a) as f32);

    let mut mask_mix = Array3::<u8>::zeros(mask.raw_dim());
    let mut votes: Vec<(u8, f64)> = Vec::with_capacity(outputs.len() + 1);
    for (idx, out) in mask_mix.indexed_iter_mut() {
        votes.clear();
        add_vote(&mut votes, mask[idx], beta);
        for ((_, m), &w) in outputs.iter().zip(&weights) {
            add_vote(&mut votes, m[idx], (1.0 - beta) * w);
        }
        *out = pick(&votes);
    }
    Ok(MixResult {
        density_mix,
        mask_mix,
        weights,
        beta,
        chain_descs: chains,
    })
}

fn add_vote(votes: &mut Vec<(u8, f64)>, class: u8, w: f64) {
    match votes.iter_mut().find(|(c, _)| *c == class) {
        Some((_, acc)) => *acc += w,
        None => votes.push((class, w)),
    }
}

/// Argmax over mixed one-hot channels; absent channels carry zero weight.
fn pick(votes: &[(u8, f64)]) -> u8 {
    let mut best = (0u8, 0.0f64);
    for &(c, w) in votes {
        let better = w > best.1
            || (w == best.1 && best.0 == 0 && c != 0)
            || (w == best.1 && c != 0 && c < best.0);
        if better {
            best = (c, w);
        }
    }
    best.0
}
