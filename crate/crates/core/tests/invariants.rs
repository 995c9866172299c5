use std::collections::BTreeSet;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use proptest::prelude::*;
use st_guidance::geometry::{
    from_thousand, project, to_thousand, unproject, CameraIntrinsics, DepthMap, Mask, Pixel, Point3, RigidTransform,
};
use st_guidance::guidance::{distance_transform, inpaint, masking_weight_map, InpaintParams, InstanceMask, WeightMap};
use st_guidance::metrics::{pointing_stats, traj_errors};
use st_guidance::trajectory::{reject_outliers, resample_uniform, Track2D, TrackEntry};
use st_guidance::ExecMode;

fn point() -> impl Strategy<Value = Point3> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn track() -> impl Strategy<Value = Track2D> {
    prop::collection::vec((1i64..4, 0.0..640.0f64, 0.0..480.0f64), 2..40).prop_map(|steps| {
        let mut frame = 0;
        let entries = steps
            .into_iter()
            .map(|(df, u, v)| {
                frame += df;
                TrackEntry {
                    frame,
                    pixel: Pixel::new(u, v),
                }
            })
            .collect();
        Track2D::new(entries).unwrap()
    })
}

fn mask(w: u32, h: u32) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.2), (w * h) as usize).prop_map(move |d| Mask::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rigid_transform_matches_nalgebra(
        axis in point(), angle in -3.0..3.0f64, t in point(), p in point()
    ) {
        prop_assume!(axis.norm() > 1e-3);
        let x = RigidTransform::from_axis_angle(axis, angle, t);
        let iso = Isometry3::from_parts(
            Translation3::new(t.x, t.y, t.z),
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::new(axis.x, axis.y, axis.z)), angle),
        );
        let want = iso.transform_point(&p.to_array().into());
        let got = x.apply(p);
        prop_assert!((got.x - want.x).abs() < 1e-12 && (got.y - want.y).abs() < 1e-12 && (got.z - want.z).abs() < 1e-12);
        let back = x.inverse().apply(got);
        prop_assert!(back.distance(&p) < 1e-12);
    }

    #[test]
    fn unproject_then_project_is_identity(u in 0.0..640.0f64, v in 0.0..480.0f64, z in 0.05..20.0f64) {
        let k = CameraIntrinsics::new(520.0, 515.0, 319.5, 239.5, 640, 480).unwrap();
        let p = Pixel::new(u, v);
        let q = project(unproject(p, z, &k).unwrap(), &k, &RigidTransform::identity()).unwrap();
        prop_assert!(p.distance(&q) < 1e-9);
    }

    #[test]
    fn thousand_scale_stays_within_one_step(u in 0.0..848.0f64, v in 0.0..480.0f64) {
        let k = CameraIntrinsics::new(427.0, 427.0, 424.0, 240.0, 848, 480).unwrap();
        let q = to_thousand(Pixel::new(u, v), &k).unwrap();
        prop_assert!(q[0] <= 1000 && q[1] <= 1000);
        let back = from_thousand(q, &k);
        prop_assert!((back.u - u).abs() <= 0.5 * 848.0 / 1000.0 + 1e-9);
        prop_assert!((back.v - v).abs() <= 0.5 * 480.0 / 1000.0 + 1e-9);
    }

    #[test]
    fn outlier_rejection_keeps_endpoints_and_inliers(t in track(), eps in 0.5..80.0f64) {
        let r = reject_outliers(&t, eps).unwrap();
        let kept = r.track.entries();
        let all = t.entries();
        prop_assert_eq!(kept.first(), all.first());
        prop_assert_eq!(kept.last(), all.last());
        prop_assert_eq!(kept.len() + r.removed_frames.len(), all.len());
        // kept entries form a subsequence of the input
        let mut it = all.iter();
        for e in kept {
            prop_assert!(it.any(|x| x == e));
        }
    }

    #[test]
    fn resampling_has_fixed_length_and_exact_endpoints(
        pts in prop::collection::vec(point(), 2..30), k in 2usize..16
    ) {
        let out = resample_uniform(&pts, k).unwrap();
        prop_assert_eq!(out.len(), k);
        prop_assert_eq!(out[0], pts[0]);
        prop_assert_eq!(out[k - 1], pts[pts.len() - 1]);
    }

    #[test]
    fn distance_transform_matches_brute_force(m in mask(13, 9)) {
        let d = distance_transform(&m, ExecMode::Sequential);
        let set: Vec<(i64, i64)> = (0..9).flat_map(|r| (0..13).map(move |c| (c, r)))
            .filter(|&(c, r)| m.get(c as u32, r as u32)).collect();
        for r in 0..9i64 {
            for c in 0..13i64 {
                let want = set.iter().map(|(x, y)| (((x - c).pow(2) + (y - r).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min);
                let got = d[(r * 13 + c) as usize];
                prop_assert!(got == want || (got.is_infinite() && want.is_infinite()) || (got - want).abs() < 1e-9,
                    "({c},{r}): {got} vs {want}");
            }
        }
        prop_assert_eq!(d, distance_transform(&m, ExecMode::Parallel));
    }

    #[test]
    fn weight_map_is_unit_bounded_and_keeps_relevant(a in mask(24, 16), b in mask(24, 16), sigma in 0.5..10.0f64) {
        let all = vec![InstanceMask::new("a", a.clone()), InstanceMask::new("b", b.clone())];
        let rel: BTreeSet<String> = ["a".to_string()].into();
        let w = masking_weight_map(&all, &rel, (24, 16), sigma, ExecMode::Parallel).unwrap();
        prop_assert!(w.values().iter().all(|v| (0.0..=1.0).contains(v)));
        for (i, keep) in a.data().iter().enumerate() {
            if *keep {
                prop_assert_eq!(w.values()[i], 1.0);
            }
        }
        let seq = masking_weight_map(&all, &rel, (24, 16), sigma, ExecMode::Sequential).unwrap();
        prop_assert_eq!(w, seq);
    }

    #[test]
    fn inpaint_leaves_kept_pixels_and_is_schedule_independent(
        hole in mask(20, 14), vals in prop::collection::vec(0.3f32..3.0, 280)
    ) {
        let depth = DepthMap::new(20, 14, vals.clone()).unwrap();
        let rgb = image::RgbImage::from_fn(20, 14, |c, r| image::Rgb([(c * 12) as u8, (r * 17) as u8, 90]));
        let weights = WeightMap::new(20, 14, hole.data().iter().map(|h| if *h { 0.0 } else { 1.0 }).collect()).unwrap();
        let params = InpaintParams::default();
        let (c1, d1) = inpaint(&rgb, &depth, &weights, &params, ExecMode::Parallel).unwrap();
        let (c2, d2) = inpaint(&rgb, &depth, &weights, &params, ExecMode::Sequential).unwrap();
        prop_assert_eq!(&c1, &c2);
        prop_assert_eq!(&d1, &d2);
        for (i, h) in hole.data().iter().enumerate() {
            if !*h {
                prop_assert_eq!(d1.values()[i], vals[i]);
                prop_assert_eq!(&c1.as_raw()[3 * i..3 * i + 3], &rgb.as_raw()[3 * i..3 * i + 3]);
            }
        }
    }

    #[test]
    fn rmse_bounds_mae(pairs in prop::collection::vec((0.0..1000.0f64, 0.0..1000.0f64, 0.0..1000.0f64, 0.0..1000.0f64), 1..20)) {
        let a: Vec<Pixel> = pairs.iter().map(|p| Pixel::new(p.0, p.1)).collect();
        let b: Vec<Pixel> = pairs.iter().map(|p| Pixel::new(p.2, p.3)).collect();
        let e = traj_errors(&a, &b).unwrap();
        prop_assert!(e.rmse + 1e-9 >= e.mae && e.mae >= 0.0);
        let s = pointing_stats(&a, &b, 50.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.sr) && s.med >= 0.0);
    }
}
