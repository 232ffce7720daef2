//! Training objectives with analytic gradients.
//!
//! Segmentation losses take per-sample probability tensors `(C, voxels)`
//! and per-sample class-index targets; sums for Dice run over the whole
//! batch. All gradients are with respect to the losses' direct inputs
//! (probabilities or projections); [`supervised_loss_from_logits`] chains
//! through the channel softmax.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::augment::{transform_density, TransformDesc};
use crate::error::{Error, Result};
use crate::model::ops::{softmax_backward, softmax_channels};
use crate::model::{Real, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const FOCAL_CLAMP: f64 = 1e-8;
const NORMALIZATION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_cg: f64,
    pub temperature: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dice: 20.0,
            lambda_focal: 1.0,
            lambda_cg: 1.0,
            temperature: 0.1,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_dice, self.lambda_focal, self.lambda_cg, self.focal_gamma];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss", "weights and gamma must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("ssl.temperature", "must be positive"));
        }
        Ok(())
    }
}

fn check_inputs<T: Real>(probs: &[Tensor<T>], target: &[Vec<u8>]) -> Result<usize> {
    if probs.is_empty() || probs.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability tensors for {} targets",
            probs.len(),
            target.len()
        )));
    }
    let c = probs[0].channels;
    for (p, t) in probs.iter().zip(target) {
        if p.channels != c || p.voxels() != t.len() {
            return Err(Error::ShapeMismatch("probabilities and target differ in shape".into()));
        }
        if let Some(&bad) = t.iter().find(|&&v| v as usize >= c) {
            return Err(Error::ShapeMismatch(format!("target class {bad} >= {c} channels")));
        }
        let n = p.voxels();
        for v in 0..n {
            let s: f64 = (0..c).map(|k| p.data[k * n + v].to_f64()).sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::invalid("probs", format!("channel sum {s} at voxel {v}")));
            }
        }
    }
    Ok(c)
}

/// Soft Dice over all channels including background:
/// `1 - mean_c (2 sum p t + eps) / (sum p + sum t + eps)`.
pub fn dice_loss<T: Real>(probs: &[Tensor<T>], target: &[Vec<u8>]) -> Result<T> {
    Ok(dice_with_grad(probs, target, false)?.0)
}

pub fn dice_with_grad<T: Real>(
    probs: &[Tensor<T>],
    target: &[Vec<u8>],
    want_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>)> {
    let c = check_inputs(probs, target)?;
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut tsum = vec![0.0f64; c];
    for (p, t) in probs.iter().zip(target) {
        let n = p.voxels();
        for k in 0..c {
            psum[k] += p.channel(k).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        for (v, &cls) in t.iter().enumerate() {
            let k = cls as usize;
            tsum[k] += 1.0;
            inter[k] += p.data[k * n + v].to_f64();
        }
    }
    let denom: Vec<f64> = (0..c).map(|k| psum[k] + tsum[k] + DICE_EPS).collect();
    let mean_dice = (0..c).map(|k| (2.0 * inter[k] + DICE_EPS) / denom[k]).sum::<f64>() / c as f64;
    let loss = T::from_f64(1.0 - mean_dice);
    if !want_grad {
        return Ok((loss, None));
    }
    let grads = probs
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let n = p.voxels();
            let mut g = Tensor::zeros(c, p.dims);
            for k in 0..c {
                let base = -(2.0 * inter[k] + DICE_EPS) / (denom[k] * denom[k]);
                let on = 2.0 / denom[k];
                for v in 0..n {
                    let tv = if t[v] as usize == k { on } else { 0.0 };
                    g.data[k * n + v] = T::from_f64(-(tv + base) / c as f64);
                }
            }
            g
        })
        .collect();
    Ok((loss, Some(grads)))
}

/// Mean over voxels of `-(1 - p_t)^gamma * ln(p_t)`; `p_t` is clamped at 1e-8.
pub fn focal_loss<T: Real>(probs: &[Tensor<T>], target: &[Vec<u8>], gamma: f64) -> Result<T> {
    Ok(focal_with_grad(probs, target, gamma, false)?.0)
}

pub fn focal_with_grad<T: Real>(
    probs: &[Tensor<T>],
    target: &[Vec<u8>],
    gamma: f64,
    want_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>)> {
    let c = check_inputs(probs, target)?;
    let total: usize = target.iter().map(Vec::len).sum();
    let inv = 1.0 / total as f64;
    let mut acc = 0.0f64;
    let mut grads = Vec::with_capacity(if want_grad { probs.len() } else { 0 });
    for (p, t) in probs.iter().zip(target) {
        let n = p.voxels();
        let mut g = want_grad.then(|| Tensor::zeros(c, p.dims));
        for (v, &cls) in t.iter().enumerate() {
            let i = cls as usize * n + v;
            let raw = p.data[i].to_f64();
            let pt = raw.max(FOCAL_CLAMP);
            let q = (1.0 - pt).max(0.0);
            let ln = pt.ln();
            acc += -q.powf(gamma) * ln;
            if let Some(g) = g.as_mut() {
                let d = if raw < FOCAL_CLAMP {
                    0.0
                } else {
                    let focus = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln };
                    focus - q.powf(gamma) / pt
                };
                g.data[i] = T::from_f64(d * inv);
            }
        }
        if let Some(g) = g {
            grads.push(g);
        }
    }
    Ok((T::from_f64(acc * inv), want_grad.then_some(grads)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedParts {
    pub total: f64,
    pub dice: f64,
    pub focal: f64,
}

/// `lambda_dice * dice + lambda_focal * focal`.
pub fn supervised_loss<T: Real>(probs: &[Tensor<T>], target: &[Vec<u8>], w: &LossWeights) -> Result<SupervisedParts> {
    let dice = dice_loss(probs, target)?.to_f64();
    let focal = focal_loss(probs, target, w.focal_gamma)?.to_f64();
    Ok(SupervisedParts {
        total: w.lambda_dice * dice + w.lambda_focal * focal,
        dice,
        focal,
    })
}

/// Focal loss evaluated on logits through a stable log-softmax, so
/// saturated predictions keep a gradient. Returns the loss and its
/// gradient with respect to the logits.
pub fn focal_from_logits<T: Real>(
    logits: &[&Tensor<T>],
    probs: &[Tensor<T>],
    target: &[Vec<u8>],
    gamma: f64,
) -> (f64, Vec<Tensor<T>>) {
    let total: usize = target.iter().map(Vec::len).sum();
    let inv = 1.0 / total as f64;
    let mut acc = 0.0f64;
    let grads = logits
        .iter()
        .zip(probs)
        .zip(target)
        .map(|((z, p), t)| {
            let (c, n) = (z.channels, z.voxels());
            let mut g = Tensor::zeros(c, z.dims);
            for (v, &cls) in t.iter().enumerate() {
                let k_t = cls as usize;
                let m = (0..c).map(|k| z.data[k * n + v].to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (z.data[k * n + v].to_f64() - m).exp()).sum::<f64>().ln();
                let ln_pt = z.data[k_t * n + v].to_f64() - lse;
                let pt = ln_pt.exp();
                let q = -ln_pt.exp_m1();
                acc += -q.powf(gamma) * ln_pt;
                let focus = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln_pt * pt };
                let coef = (focus - q.powf(gamma)) * inv;
                for k in 0..c {
                    let on = if k == k_t { 1.0 } else { 0.0 };
                    g.data[k * n + v] = T::from_f64(coef * (on - p.data[k * n + v].to_f64()));
                }
            }
            g
        })
        .collect();
    (acc * inv, grads)
}

/// Supervised loss on logits, returning gradients with respect to the logits.
pub fn supervised_loss_from_logits<T: Real>(
    logits: &[&Tensor<T>],
    target: &[Vec<u8>],
    w: &LossWeights,
) -> Result<(SupervisedParts, Vec<Tensor<T>>)> {
    let probs: Vec<Tensor<T>> = logits.iter().map(|l| softmax_channels(l)).collect();
    let (dice, gd) = dice_with_grad(&probs, target, true)?;
    let (focal, gf) = focal_from_logits(logits, &probs, target, w.focal_gamma);
    let (ld, lf) = (T::from_f64(w.lambda_dice), T::from_f64(w.lambda_focal));
    let grads = probs
        .iter()
        .zip(gd.expect("grad"))
        .zip(gf)
        .map(|((p, gd), gf)| {
            let mut g = softmax_backward(p, &gd);
            g.data.iter_mut().zip(&gf.data).for_each(|(a, &b)| *a = ld * *a + lf * b);
            g
        })
        .collect();
    let dice = dice.to_f64();
    Ok((
        SupervisedParts {
            total: w.lambda_dice * dice + w.lambda_focal * focal,
            dice,
            focal,
        },
        grads,
    ))
}

/// NT-Xent over the `2B` views `[z1; z2]`: each view's positive is its pair,
/// the remaining `2B - 2` views are negatives; similarities are cosines over
/// `tau`. Returns the mean over anchors.
pub fn ntxent_loss<T: Real>(z1: &[Vec<T>], z2: &[Vec<T>], tau: f64) -> Result<T> {
    Ok(ntxent_with_grad(z1, z2, tau)?.0)
}

pub type ProjectionGrads<T> = (Vec<Vec<T>>, Vec<Vec<T>>);

pub fn ntxent_with_grad<T: Real>(z1: &[Vec<T>], z2: &[Vec<T>], tau: f64) -> Result<(T, ProjectionGrads<T>)> {
    let b = z1.len();
    if b < 2 || z2.len() != b {
        return Err(Error::invalid("batch", format!("need matched batches of >= 2, got {b} and {}", z2.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("ssl.temperature", "must be positive"));
    }
    let dim = z1[0].len();
    let views: Vec<&Vec<T>> = z1.iter().chain(z2).collect();
    if views.iter().any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("projection lengths differ".into()));
    }
    let n = 2 * b;
    let mut unit = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for v in &views {
        let norm = v.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::invalid("projection", "zero-norm vector"));
        }
        norms.push(norm);
        unit.push(v.iter().map(|x| x.to_f64() / norm).collect::<Vec<f64>>());
    }
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            sim[i][k] = dot(&unit[i], &unit[k]) / tau;
        }
    }
    let pos = |i: usize| if i < b { i + b } else { i - b };
    let mut loss = 0.0;
    // dL/dsim[i][k]
    let mut gs = vec![vec![0.0; n]; n];
    for i in 0..n {
        let m = (0..n).filter(|&k| k != i).map(|k| sim[i][k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (sim[i][k] - m).exp()).sum();
        loss += -(sim[i][pos(i)] - m) + denom.ln();
        for k in (0..n).filter(|&k| k != i) {
            let soft = (sim[i][k] - m).exp() / denom;
            gs[i][k] = (soft - if k == pos(i) { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;
    let mut grads: Vec<Vec<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut gu = vec![0.0f64; dim];
        for k in 0..n {
            let coef = (gs[i][k] + gs[k][i]) / tau;
            if coef != 0.0 {
                gu.iter_mut().zip(&unit[k]).for_each(|(g, &u)| *g += coef * u);
            }
        }
        let proj = dot(&gu, &unit[i]);
        grads.push(
            gu.iter()
                .zip(&unit[i])
                .map(|(&g, &u)| T::from_f64((g - proj * u) / norms[i]))
                .collect(),
        );
    }
    let g2 = grads.split_off(b);
    Ok((T::from_f64(loss), (grads, g2)))
}

/// Per-voxel argmax over channels; ties go to the lower channel.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let n = t.voxels();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..t.channels {
                if t.data[k * n + v] > t.data[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Applies `t` channel-wise to a `(C, d, h, w)` map.
pub fn transform_map<T: Real>(m: &Tensor<T>, t: &TransformDesc) -> Result<Tensor<T>> {
    let n = m.voxels();
    let dims = m.dims;
    let mut out = Vec::with_capacity(m.data.len());
    for c in 0..m.channels {
        let ch = Array3::from_shape_vec(dims, m.channel(c).iter().map(|v| v.to_f64() as f32).collect())
            .expect("channel shape");
        let tr = transform_density(ch.view(), t)?;
        out.extend(tr.iter().map(|&v| T::from_f64(v as f64)));
    }
    debug_assert_eq!(out.len(), n * m.channels);
    Ok(Tensor::from_vec(m.channels, dims, out))
}

/// Consistency target: argmax of the transformed, detached prediction map.
pub fn consistency_target<T: Real>(m: &Tensor<T>, t: &TransformDesc) -> Result<Vec<u8>> {
    Ok(argmax_channels(&transform_map(m, t)?))
}

/// `supervised_loss(softmax(m'), argmax(T(m)))` with `T(m)` treated as a
/// constant. Returns the loss and its gradient with respect to `m'`.
pub fn consistency_loss<T: Real>(
    m_prime: &[&Tensor<T>],
    m: &[&Tensor<T>],
    transforms: &[TransformDesc],
    w: &LossWeights,
) -> Result<(SupervisedParts, Vec<Tensor<T>>)> {
    if m_prime.len() != m.len() || m.len() != transforms.len() {
        return Err(Error::ShapeMismatch("consistency batch sizes differ".into()));
    }
    let targets = m
        .iter()
        .zip(transforms)
        .map(|(mm, t)| consistency_target(mm, t))
        .collect::<Result<Vec<_>>>()?;
    for (mp, mm) in m_prime.iter().zip(m) {
        if mp.dims != mm.dims || mp.channels != mm.channels {
            return Err(Error::ShapeMismatch("transformed map differs from prediction".into()));
        }
    }
    supervised_loss_from_logits(m_prime, &targets, w)
}
