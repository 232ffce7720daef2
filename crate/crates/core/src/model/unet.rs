//! 3D U-Net with a contrastive projection head.
//!
//! Encoder level `l` runs two 3x3x3 conv+ReLU layers with `channels[l]`
//! filters and max-pools into level `l + 1`. Decoder level `l` upsamples the
//! level below, concatenates the encoder skip and runs two conv+ReLU layers.
//! A 1x1x1 head produces per-voxel class logits. The projection head squashes
//! the bottleneck by global average pooling, applies ReLU and one affine map.

use super::ops::{self, Tensor};
use super::real::Real;
use super::{ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSlot {
    pub cout: usize,
    pub k: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc: Vec<[ConvSlot; 2]>,
    /// Indexed by level; `dec[l]` exists for `l < depth - 1`.
    pub dec: Vec<[ConvSlot; 2]>,
    pub head: ConvSlot,
    pub proj_weight: usize,
    pub proj_bias: usize,
    pub bottleneck_channels: usize,
    pub projection_dim: usize,
}

/// Parameter names and shapes in storage order.
pub(crate) fn parameter_specs(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
    let mut specs = Vec::new();
    let conv = |name: String, cin: usize, cout: usize, k: usize, specs: &mut Vec<(String, Vec<usize>)>| {
        let weight = specs.len();
        specs.push((format!("{name}.weight"), vec![cout, cin, k, k, k]));
        specs.push((format!("{name}.bias"), vec![cout]));
        ConvSlot { cout, k, weight, bias: weight + 1 }
    };
    let ch = &cfg.channels;
    let depth = cfg.depth;
    let mut enc = Vec::with_capacity(depth);
    for l in 0..depth {
        let cin = if l == 0 { cfg.in_channels } else { ch[l - 1] };
        let a = conv(format!("enc{l}.conv_a"), cin, ch[l], 3, &mut specs);
        let b = conv(format!("enc{l}.conv_b"), ch[l], ch[l], 3, &mut specs);
        enc.push([a, b]);
    }
    let mut dec = Vec::with_capacity(depth.saturating_sub(1));
    for l in 0..depth - 1 {
        let a = conv(format!("dec{l}.conv_a"), ch[l] + ch[l + 1], ch[l], 3, &mut specs);
        let b = conv(format!("dec{l}.conv_b"), ch[l], ch[l], 3, &mut specs);
        dec.push([a, b]);
    }
    let head = conv("head".into(), ch[0], cfg.num_classes, 1, &mut specs);
    let bottleneck_channels = ch[depth - 1];
    let proj_weight = specs.len();
    specs.push(("proj.weight".into(), vec![cfg.projection_dim, bottleneck_channels]));
    specs.push(("proj.bias".into(), vec![cfg.projection_dim]));
    let layout = Layout {
        enc,
        dec,
        head,
        proj_weight,
        proj_bias: proj_weight + 1,
        bottleneck_channels,
        projection_dim: cfg.projection_dim,
    };
    (layout, specs)
}

#[derive(Debug, Clone)]
pub(crate) struct EncCache<T> {
    input: Tensor<T>,
    a_out: Tensor<T>,
    b_out: Tensor<T>,
    pool_idx: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecCache<T> {
    cat: Tensor<T>,
    below_dims: [usize; 3],
    a_out: Tensor<T>,
    b_out: Tensor<T>,
}

/// Activations retained for the backward pass of one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    enc: Vec<EncCache<T>>,
    /// Decoder entries in execution order (deepest level first).
    dec: Vec<(usize, DecCache<T>)>,
    head_in: Option<Tensor<T>>,
    pub logits: Option<Tensor<T>>,
    gap: Option<Vec<T>>,
    hidden: Option<Vec<T>>,
    pub projection: Option<Vec<T>>,
}

/// Which heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub segment: bool,
    pub project: bool,
}

impl Heads {
    pub const SEGMENT: Heads = Heads { segment: true, project: false };
    pub const PROJECT: Heads = Heads { segment: false, project: true };
    pub const BOTH: Heads = Heads { segment: true, project: true };
}

fn conv_relu<T: Real>(p: &ModelParams<T>, slot: &ConvSlot, x: &Tensor<T>) -> Tensor<T> {
    let mut y = ops::conv_forward(x, p.data(slot.weight), p.data(slot.bias), slot.cout, slot.k);
    ops::relu_inplace(&mut y);
    y
}

pub(crate) fn forward<T: Real>(p: &ModelParams<T>, layout: &Layout, x: Tensor<T>, heads: Heads) -> ForwardCache<T> {
    let depth = layout.enc.len();
    let mut enc: Vec<EncCache<T>> = Vec::with_capacity(depth);
    let mut input = x;
    for (l, slots) in layout.enc.iter().enumerate() {
        let a_out = conv_relu(p, &slots[0], &input);
        let b_out = conv_relu(p, &slots[1], &a_out);
        let (next, pool_idx) = if l + 1 < depth {
            let (pooled, idx) = ops::maxpool2_forward(&b_out);
            (Some(pooled), Some(idx))
        } else {
            (None, None)
        };
        enc.push(EncCache { input, a_out, b_out, pool_idx });
        match next {
            Some(n) => input = n,
            None => break,
        }
    }

    let mut cache = ForwardCache {
        enc,
        dec: Vec::new(),
        head_in: None,
        logits: None,
        gap: None,
        hidden: None,
        projection: None,
    };

    if heads.project {
        let bott = &cache.enc[depth - 1].b_out;
        let n = T::from_f64(bott.voxels() as f64);
        let gap: Vec<T> = (0..bott.channels)
            .map(|c| bott.channel(c).iter().copied().sum::<T>() / n)
            .collect();
        let hidden: Vec<T> = gap.iter().map(|&g| g.max(T::zero())).collect();
        let w = p.data(layout.proj_weight);
        let b = p.data(layout.proj_bias);
        let k = layout.bottleneck_channels;
        let z: Vec<T> = (0..layout.projection_dim)
            .map(|o| {
                let row = &w[o * k..(o + 1) * k];
                b[o] + row.iter().zip(&hidden).map(|(&a, &h)| a * h).sum::<T>()
            })
            .collect();
        cache.gap = Some(gap);
        cache.hidden = Some(hidden);
        cache.projection = Some(z);
    }

    if heads.segment {
        let mut below = cache.enc[depth - 1].b_out.clone();
        for l in (0..depth - 1).rev() {
            let slots = &layout.dec[l];
            let below_dims = below.dims;
            let up = ops::upsample2_forward(&below);
            let cat = ops::concat(&cache.enc[l].b_out, &up);
            let a_out = conv_relu(p, &slots[0], &cat);
            let b_out = conv_relu(p, &slots[1], &a_out);
            below = b_out.clone();
            cache.dec.push((l, DecCache { cat, below_dims, a_out, b_out }));
        }
        let h = layout.head;
        let logits = ops::conv_forward(&below, p.data(h.weight), p.data(h.bias), h.cout, h.k);
        cache.head_in = Some(below);
        cache.logits = Some(logits);
    }
    cache
}

/// Intermediate ReLU output of the projection head.
pub(crate) fn hidden<T: Real>(cache: &ForwardCache<T>) -> Option<&[T]> {
    cache.hidden.as_deref()
}

fn conv_relu_backward<T: Real>(
    p: &ModelParams<T>,
    slot: &ConvSlot,
    input: &Tensor<T>,
    out: &Tensor<T>,
    mut grad: Tensor<T>,
    grads: &mut ModelParams<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    ops::relu_backward(out, &mut grad);
    let (gw, gb) = grads.pair_mut(slot.weight, slot.bias);
    ops::conv_backward(input, p.data(slot.weight), &grad, gw, gb, slot.k, need_input_grad)
}

fn add_into<T: Real>(acc: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match acc {
        Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, &y)| *x += y),
        None => *acc = Some(g),
    }
}

/// Accumulates parameter gradients of one sample into `grads`.
pub(crate) fn backward<T: Real>(
    p: &ModelParams<T>,
    layout: &Layout,
    cache: &ForwardCache<T>,
    grad_logits: Option<&Tensor<T>>,
    grad_projection: Option<&[T]>,
    grads: &mut ModelParams<T>,
) {
    let depth = layout.enc.len();
    // Gradient w.r.t. each encoder level's b_out.
    let mut enc_grad: Vec<Option<Tensor<T>>> = vec![None; depth];

    if let Some(gl) = grad_logits {
        let head_in = cache.head_in.as_ref().expect("segment head was evaluated");
        let h = layout.head;
        let (gw, gb) = grads.pair_mut(h.weight, h.bias);
        let mut g = ops::conv_backward(head_in, p.data(h.weight), gl, gw, gb, h.k, true).expect("input grad");
        // Decoder entries were pushed deepest first, so walk them in reverse.
        for (l, dc) in cache.dec.iter().rev() {
            let slots = &layout.dec[*l];
            let ga = conv_relu_backward(p, &slots[1], &dc.a_out, &dc.b_out, g, grads, true).expect("input grad");
            let gcat = conv_relu_backward(p, &slots[0], &dc.cat, &dc.a_out, ga, grads, true).expect("input grad");
            let (gskip, gup) = ops::split(gcat, slots[0].cout);
            add_into(&mut enc_grad[*l], gskip);
            g = ops::upsample2_backward(&gup, dc.below_dims);
        }
        add_into(&mut enc_grad[depth - 1], g);
    }

    if let Some(gz) = grad_projection {
        let hidden = cache.hidden.as_ref().expect("projection head was evaluated");
        let gap = cache.gap.as_ref().expect("projection head was evaluated");
        let k = layout.bottleneck_channels;
        let w = p.data(layout.proj_weight);
        let mut ghidden = vec![T::zero(); k];
        {
            let (gw, gb) = grads.pair_mut(layout.proj_weight, layout.proj_bias);
            for (o, &g) in gz.iter().enumerate() {
                gb[o] += g;
                for j in 0..k {
                    gw[o * k + j] += g * hidden[j];
                    ghidden[j] += g * w[o * k + j];
                }
            }
        }
        let bott = &cache.enc[depth - 1].b_out;
        let n = bott.voxels();
        let inv = T::one() / T::from_f64(n as f64);
        let mut gb = Tensor::zeros(bott.channels, bott.dims);
        for c in 0..k {
            if gap[c] > T::zero() {
                let v = ghidden[c] * inv;
                gb.data[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = v);
            }
        }
        add_into(&mut enc_grad[depth - 1], gb);
    }

    for l in (0..depth).rev() {
        let Some(g) = enc_grad[l].take() else { continue };
        let ec = &cache.enc[l];
        let slots = &layout.enc[l];
        let ga = conv_relu_backward(p, &slots[1], &ec.a_out, &ec.b_out, g, grads, true).expect("input grad");
        let gin = conv_relu_backward(p, &slots[0], &ec.input, &ec.a_out, ga, grads, l > 0);
        if l > 0 {
            let gin = gin.expect("input grad");
            let below = &cache.enc[l - 1];
            let idx = below.pool_idx.as_ref().expect("pooled level");
            let gprev = ops::maxpool2_backward(&gin, idx, below.b_out.channels, below.b_out.dims);
            add_into(&mut enc_grad[l - 1], gprev);
        }
    }
}
