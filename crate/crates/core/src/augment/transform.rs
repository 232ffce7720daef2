//! Spatial transforms applied identically to densities and class masks.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::reflect;

/// One spatial transformation. Shifts and flips are index maps; rotations
/// turn the y-x plane about the z axis around the cube center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformDesc {
    Shift { shift_vox: [i32; 3] },
    RotateZ { angle_deg: f64 },
    Flip { flip_axes: [bool; 3] },
}

impl TransformDesc {
    pub const IDENTITY: TransformDesc = TransformDesc::Shift { shift_vox: [0, 0, 0] };

    pub fn is_identity(&self) -> bool {
        match *self {
            TransformDesc::Shift { shift_vox } => shift_vox == [0, 0, 0],
            TransformDesc::RotateZ { angle_deg } => quarter_turns(angle_deg) == Some(0),
            TransformDesc::Flip { flip_axes } => flip_axes == [false; 3],
        }
    }

    /// True when the transform is a pure index map (no interpolation).
    pub fn is_exact(&self) -> bool {
        match *self {
            TransformDesc::RotateZ { angle_deg } => quarter_turns(angle_deg).is_some(),
            _ => true,
        }
    }
}

fn quarter_turns(angle_deg: f64) -> Option<i64> {
    let q = angle_deg / 90.0;
    let r = q.round();
    ((q - r).abs() < 1e-9).then(|| (r as i64).rem_euclid(4))
}

/// Draws a transform: kind uniform over shift/rotate/flip, shifts uniform
/// in `[-size/2, size/2]`, angles uniform in `[0, 360)`, each flip axis with
/// probability one half.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, subvol_size: usize) -> TransformDesc {
    let half = (subvol_size / 2) as i32;
    match rng.random_range(0..3u8) {
        0 => TransformDesc::Shift {
            shift_vox: [(); 3].map(|_| rng.random_range(-half..=half)),
        },
        1 => TransformDesc::RotateZ {
            angle_deg: rng.random_range(0.0..360.0),
        },
        _ => TransformDesc::Flip {
            flip_axes: [(); 3].map(|_| rng.random_bool(0.5)),
        },
    }
}

/// Maps an output voxel to its source voxel for index-exact transforms.
fn exact_source(t: &TransformDesc, shape: [usize; 3], v: [usize; 3]) -> [usize; 3] {
    match *t {
        TransformDesc::Shift { shift_vox } => {
            [0, 1, 2].map(|a| reflect(v[a] as isize - shift_vox[a] as isize, shape[a]))
        }
        TransformDesc::Flip { flip_axes } => {
            [0, 1, 2].map(|a| if flip_axes[a] { shape[a] - 1 - v[a] } else { v[a] })
        }
        TransformDesc::RotateZ { angle_deg } => {
            let n = shape[1] - 1;
            let (y, x) = (v[1], v[2]);
            let (sy, sx) = match quarter_turns(angle_deg).expect("exact rotation") {
                0 => (y, x),
                1 => (n - x, y),
                2 => (n - y, n - x),
                _ => (x, n - y),
            };
            [v[0], sy, sx]
        }
    }
}

/// Continuous source coordinate in the y-x plane for a rotation about z.
fn rotation_source(angle_deg: f64, n: usize, y: usize, x: usize) -> (f64, f64) {
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (dy, dx) = (y as f64 - c, x as f64 - c);
    (c + cos * dy - sin * dx, c + sin * dy + cos * dx)
}

fn check_rotatable(shape: &[usize]) -> Result<()> {
    if shape[1] != shape[2] {
        return Err(Error::ShapeMismatch(format!(
            "rotation about z needs a square y-x plane, got {shape:?}"
        )));
    }
    Ok(())
}

fn remap<T: Copy>(vol: ArrayView3<'_, T>, t: &TransformDesc) -> Array3<T> {
    let sh = vol.shape();
    let shape = [sh[0], sh[1], sh[2]];
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let s = exact_source(t, shape, [z, y, x]);
        vol[s]
    })
}

/// Transforms a density volume; arbitrary rotations use bilinear
/// interpolation in the y-x plane with reflected borders.
pub fn transform_density(vol: ArrayView3<'_, f32>, t: &TransformDesc) -> Result<Array3<f32>> {
    if let TransformDesc::RotateZ { .. } = t {
        check_rotatable(vol.shape())?;
    }
    if t.is_exact() {
        return Ok(remap(vol, t));
    }
    let TransformDesc::RotateZ { angle_deg } = *t else { unreachable!() };
    let sh = vol.shape();
    let n = sh[1];
    let mut out = Array3::<f32>::zeros((sh[0], sh[1], sh[2]));
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = rotation_source(angle_deg, n, y, x);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (ty, tx) = ((sy - y0) as f32, (sx - x0) as f32);
            let yi = [reflect(y0 as isize, n), reflect(y0 as isize + 1, n)];
            let xi = [reflect(x0 as isize, n), reflect(x0 as isize + 1, n)];
            for z in 0..sh[0] {
                let a = lerp(vol[[z, yi[0], xi[0]]], vol[[z, yi[0], xi[1]]], tx);
                let b = lerp(vol[[z, yi[1], xi[0]]], vol[[z, yi[1], xi[1]]], tx);
                out[[z, y, x]] = lerp(a, b, ty);
            }
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if a == b {
        a
    } else {
        a + t * (b - a)
    }
}

/// Transforms a class-index volume with nearest-neighbor sampling only.
pub fn transform_mask(vol: ArrayView3<'_, u8>, t: &TransformDesc) -> Result<Array3<u8>> {
    if let TransformDesc::RotateZ { .. } = t {
        check_rotatable(vol.shape())?;
    }
    if t.is_exact() {
        return Ok(remap(vol, t));
    }
    let TransformDesc::RotateZ { angle_deg } = *t else { unreachable!() };
    let sh = vol.shape();
    let n = sh[1];
    let mut out = Array3::<u8>::zeros((sh[0], sh[1], sh[2]));
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = rotation_source(angle_deg, n, y, x);
            let yi = reflect(sy.round() as isize, n);
            let xi = reflect(sx.round() as isize, n);
            for z in 0..sh[0] {
                out[[z, y, x]] = vol[[z, yi, xi]];
            }
        }
    }
    Ok(out)
}

/// Applies `t` to a density/mask pair.
pub fn apply_transform(
    density: &Array3<f32>,
    mask: &Array3<u8>,
    t: &TransformDesc,
) -> Result<(Array3<f32>, Array3<u8>)> {
    if density.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "density {:?} vs mask {:?}",
            density.shape(),
            mask.shape()
        )));
    }
    Ok((transform_density(density.view(), t)?, transform_mask(mask.view(), t)?))
}

/// Applies a chain of transforms left to right.
pub fn apply_chain(
    density: &Array3<f32>,
    mask: &Array3<u8>,
    chain: &[TransformDesc],
) -> Result<(Array3<f32>, Array3<u8>)> {
    let mut d = density.clone();
    let mut m = mask.clone();
    for t in chain {
        let (nd, nm) = apply_transform(&d, &m, t)?;
        d = nd;
        m = nm;
    }
    Ok((d, m))
}
