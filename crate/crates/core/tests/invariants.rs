use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use panoduet::duet::model::roll_tensor;
use panoduet::layout::{iou_2d, iou_3d, RoomLayout};
use panoduet::metrics::{frechet_distance, FeatureStats};
use panoduet::ntf::{ntf_read, ntf_write, NtfTensor};
use panoduet::nn::{Conv2d, Padding, ParamStore, Tensor4};
use panoduet::resample::joint_noise_init;
use panoduet::sphere::{erp_pixel_from_ray, erp_pixel_from_sph, icosahedron_rig, sph_from_erp_pixel, ErpGrid, SphericalCoord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wrapped(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn erp_sphere_ray_round_trip(h in 2usize..40, fu in 0.0f64..1.0, fv in 0.001f64..0.999) {
        let grid = ErpGrid::pixel(2 * h).unwrap();
        let (w, hh) = (grid.width() as f64, grid.height() as f64);
        let (u, v) = (fu * w, fv * hh);
        let s = sph_from_erp_pixel(&grid, u, v).unwrap();
        let (u1, v1) = erp_pixel_from_sph(&grid, &s);
        let (u2, v2) = erp_pixel_from_ray(&grid, &(s.to_direction() * 3.5)).unwrap();
        prop_assert!(wrapped(u, u1, w) < 1e-12 && (v - v1).abs() < 1e-12);
        prop_assert!(wrapped(u, u2, w) < 1e-12 && (v - v2).abs() < 1e-12);
    }

    #[test]
    fn sphere_direction_round_trip(theta in -PI..PI, phi in -1.5f64..1.5) {
        let s = SphericalCoord::new(theta, phi).unwrap();
        let back = SphericalCoord::from_direction(&s.to_direction()).unwrap();
        prop_assert!(wrapped(back.theta(), theta, 2.0 * PI) < 1e-12 && (back.phi() - phi).abs() < 1e-12);
    }

    #[test]
    fn circular_conv_commutes_with_roll(seed in any::<u64>(), shift in -40i64..40, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, stride, &mut rng);
        let (h, w) = (4, 16);
        let x = Tensor4::new(1, 2, h, w, (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (y, _) = conv.forward(&store, &x, Padding::Circular).unwrap();
        let shift = shift * stride as i64;
        let (ys, _) = conv.forward(&store, &roll_tensor(&x, shift), Padding::Circular).unwrap();
        prop_assert!(ys.max_abs_diff(&roll_tensor(&y, shift / stride as i64)) <= 1e-12);
    }

    #[test]
    fn joint_noise_views_read_the_panorama(seed in any::<u64>()) {
        let grid = ErpGrid::new(32, 2).unwrap();
        let (pano, views) = joint_noise_init(&grid, &icosahedron_rig(8).unwrap(), 2, seed).unwrap();
        let latent = grid.latent().unwrap();
        for view in &views {
            let side = view.intrinsics.width();
            for py in 0..side {
                for px in 0..side {
                    let cam = view.intrinsics.unproject(px as f64 + 0.5, py as f64 + 0.5);
                    let (u, v) = erp_pixel_from_ray(&latent, &view.pose.camera_to_world(&cam)).unwrap();
                    let (col, row) = (u.floor() as usize % latent.width(), (v.floor() as usize).min(latent.height() - 1));
                    for c in 0..2 {
                        prop_assert_eq!(view.pixels.at(c, py, px), pano.at(c, row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        (ax, ay, bx, by) in (1.0f64..5.0, 1.0f64..5.0, 1.0f64..5.0, 1.0f64..5.0),
        (ca, cb) in (2.0f64..4.0, 2.0f64..4.0),
    ) {
        let a = RoomLayout::rectangle(ax, ay, 1.5, ca).unwrap();
        let b = RoomLayout::rectangle(bx, by, 1.5, cb).unwrap();
        for f in [iou_2d, iou_3d] {
            let (ab, ba) = (f(&a, &b), f(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-12 && ab > 0.0 && ab <= 1.0 + 1e-12);
            prop_assert!((f(&a, &a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_symmetric_nonnegative(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = || {
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            FeatureStats::new(DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)), &a * a.transpose(), 4).unwrap()
        };
        let (a, b) = (gen(), gen());
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-9);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn ntf_file_round_trip_is_bitwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..4 * 64 * 128).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        let t = NtfTensor::new(vec![4, 64, 128], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/t.ntf");
        ntf_write(&t, &path).unwrap();
        let back = ntf_read(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
