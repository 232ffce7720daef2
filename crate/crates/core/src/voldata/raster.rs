use ndarray::Array3;

use super::{in_bounds, LabelVolume, ParticleLabel, Shape3};
use crate::error::{Error, Result};

/// Rasterizes weak point labels into solid spheres.
///
/// A voxel takes the class of a label when its center lies within the label's
/// radius. Where spheres overlap, the nearest center wins, ties going to the
/// lower class id.
pub fn rasterize_spheres(labels: &[ParticleLabel], shape: Shape3) -> Result<LabelVolume> {
    let mut classes = Array3::<u8>::zeros(shape);
    let mut best = Array3::<f64>::from_elem(shape, f64::INFINITY);
    for l in labels {
        if !in_bounds(shape, l.center) {
            return Err(Error::invalid(
                "labels",
                format!("center {:?} outside shape {:?}", l.center, shape),
            ));
        }
        if !(l.radius_vox > 0.0) {
            return Err(Error::invalid("labels", "radius must be positive"));
        }
        let r = l.radius_vox;
        let r2 = r * r;
        let lo = |c: f64| (c - r).ceil().max(0.0) as usize;
        let hi = |c: f64, d: usize| ((c + r).floor() as usize).min(d - 1);
        let [cz, cy, cx] = l.center;
        for z in lo(cz)..=hi(cz, shape[0]) {
            let dz = z as f64 - cz;
            for y in lo(cy)..=hi(cy, shape[1]) {
                let dy = y as f64 - cy;
                for x in lo(cx)..=hi(cx, shape[2]) {
                    let dx = x as f64 - cx;
                    let d2 = dz * dz + dy * dy + dx * dx;
                    if d2 > r2 {
                        continue;
                    }
                    let cur = best[[z, y, x]];
                    let cls = classes[[z, y, x]];
                    if d2 < cur || (d2 == cur && l.class_id < cls) {
                        best[[z, y, x]] = d2;
                        classes[[z, y, x]] = l.class_id;
                    }
                }
            }
        }
    }
    Ok(LabelVolume::new(classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(center: [f64; 3], r: f64) -> ParticleLabel {
        ParticleLabel { class_id: 1, center, radius_vox: r }
    }

    /// Exhaustive distance test over every voxel.
    fn brute_count(center: [f64; 3], r: f64, shape: Shape3) -> usize {
        let mut n = 0;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let d2 = (z as f64 - center[0]).powi(2)
                        + (y as f64 - center[1]).powi(2)
                        + (x as f64 - center[2]).powi(2);
                    if d2 <= r * r {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn half_voxel_radius_is_single_voxel() {
        let lv = rasterize_spheres(&[label([3.0, 3.0, 3.0], 0.5)], [7, 7, 7]).unwrap();
        assert_eq!(lv.foreground_count(), 1);
        assert_eq!(lv.data()[[3, 3, 3]], 1);
    }

    #[test]
    fn unit_radius_is_seven_voxels() {
        assert_eq!(brute_count([3.0, 3.0, 3.0], 1.0, [7, 7, 7]), 7);
        let lv = rasterize_spheres(&[label([3.0, 3.0, 3.0], 1.0)], [7, 7, 7]).unwrap();
        assert_eq!(lv.foreground_count(), 7);
    }

    #[test]
    fn radius_four_near_analytic_volume() {
        let shape = [16, 16, 16];
        let brute = brute_count([8.0, 8.0, 8.0], 4.0, shape);
        let lv = rasterize_spheres(&[label([8.0, 8.0, 8.0], 4.0)], shape).unwrap();
        assert_eq!(lv.foreground_count(), brute);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 64.0;
        let ratio = brute as f64 / analytic;
        assert!((0.75..=1.25).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn overlap_nearest_center_then_lower_class() {
        let a = ParticleLabel { class_id: 2, center: [4.0, 4.0, 2.0], radius_vox: 3.0 };
        let b = ParticleLabel { class_id: 1, center: [4.0, 4.0, 6.0], radius_vox: 3.0 };
        let lv = rasterize_spheres(&[a, b], [9, 9, 9]).unwrap();
        assert_eq!(lv.data()[[4, 4, 3]], 2);
        assert_eq!(lv.data()[[4, 4, 5]], 1);
        // equidistant voxel goes to the lower class id
        assert_eq!(lv.data()[[4, 4, 4]], 1);
    }

    #[test]
    fn out_of_bounds_center_rejected() {
        assert!(rasterize_spheres(&[label([9.0, 0.0, 0.0], 1.0)], [8, 8, 8]).is_err());
    }

    proptest! {
        #[test]
        fn translation_equivariant(
            c in prop::array::uniform3(6.0f64..10.0),
            shift in prop::array::uniform3(-3i32..=3),
            r in 0.5f64..4.0,
        ) {
            let shape = [20, 20, 20];
            let a = rasterize_spheres(&[label(c, r)], shape).unwrap();
            let moved = [c[0] + shift[0] as f64, c[1] + shift[1] as f64, c[2] + shift[2] as f64];
            let b = rasterize_spheres(&[label(moved, r)], shape).unwrap();
            for ((z, y, x), &v) in a.data().indexed_iter() {
                let t = [z as i32 + shift[0], y as i32 + shift[1], x as i32 + shift[2]];
                if t.iter().all(|&i| (0..20).contains(&i)) {
                    prop_assert_eq!(v, b.data()[[t[0] as usize, t[1] as usize, t[2] as usize]]);
                }
            }
            prop_assert_eq!(a.foreground_count(), b.foreground_count());
        }

        #[test]
        fn count_monotone_in_radius(c in prop::array::uniform3(5.0f64..11.0), r in 0.3f64..4.0, dr in 0.0f64..1.5) {
            let shape = [16, 16, 16];
            let small = rasterize_spheres(&[label(c, r)], shape).unwrap().foreground_count();
            let big = rasterize_spheres(&[label(c, r + dr)], shape).unwrap().foreground_count();
            prop_assert!(big >= small);
        }
    }
}
