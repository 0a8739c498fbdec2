use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moe_sim::mechanics::{EndEffector, FingerModel, FingerState, TendonState};
use moe_sim::scene::HeadModel;
use moe_sim::sensing::*;

/// Odd-sized camera so one pixel sits exactly on the optical axis.
fn centered_camera() -> CameraModel {
    CameraModel { width: 65, height: 65, cx: 32.0, cy: 32.0, ..CameraModel::default() }
}

/// One-link finger lying along x, its axis crossing the optical axis at `z`.
fn bar(z: f64) -> (FingerModel, FingerState) {
    let m = FingerModel { n_links: 1, length: 0.04, radius: 0.005, ..FingerModel::default() };
    let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
    let base = Isometry3::from_parts(Translation3::new(-0.02, 0.0, z), rot);
    let st = FingerState::straight(&m, base);
    (m, st)
}

#[test]
fn capsule_on_axis_reads_its_distance() {
    let cam = centered_camera();
    let (m, st) = bar(0.105);
    let f = render_depth(&cam, &Isometry3::identity(), &m, std::slice::from_ref(&st), None);
    // Perpendicular axis at 105 mm, radius 5 mm: surface at 100 mm.
    let near = f.get(32, 32) as i32;
    assert!((near - 100).abs() <= 1, "{near}");
    let (m, st) = bar(0.115);
    let far = render_depth(&cam, &Isometry3::identity(), &m, std::slice::from_ref(&st), None).get(32, 32) as i32;
    assert!((far - near - 10).abs() <= 1, "{far} vs {near}");
}

#[test]
fn mask_grows_when_a_finger_enters_the_frame() {
    let cam = centered_camera();
    let (m, mut st) = bar(0.105);
    st.base_pose.translation.vector.x = 1.0;
    let out = finger_mask(&cam, &Isometry3::identity(), &m, std::slice::from_ref(&st), None);
    assert_eq!(out.count(), 0);
    st.base_pose.translation.vector.x = -0.02;
    let inside = finger_mask(&cam, &Isometry3::identity(), &m, std::slice::from_ref(&st), None);
    assert!(inside.count() > 0);
}

#[test]
fn finger_occluding_the_head_is_masked() {
    let cam = centered_camera();
    let (m, st) = bar(0.105);
    let head = HeadModel { center: Vector3::new(0.0, 0.0, 0.3), ..HeadModel::default() };
    let (frame, mask) = render(&cam, &Isometry3::identity(), &m, std::slice::from_ref(&st), Some(&head), None);
    assert!(mask.get(32, 32));
    assert!(!mask.get(32, 20));
    assert!(frame.get(32, 20) > frame.get(32, 32));
}

#[test]
fn parallel_render_matches_single_thread() {
    let ee = EndEffector::default();
    let head = HeadModel { center: Vector3::new(0.0, 0.0, 0.2), ..HeadModel::default() };
    let cam = CameraModel { depth_noise_mm: 1.0, ..CameraModel::default() };
    let fingers = ee.rest_state(&Isometry3::identity());
    let pose = cam.world_pose(&Isometry3::identity());
    let go = || render(&cam, &pose, &ee.finger, &fingers, Some(&head), Some(9));
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(go);
    let multi = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(go);
    assert_eq!(single, multi);
    assert_eq!(go(), go());
    assert!(multi.1.count() > 0);
}

#[test]
fn load_is_linear_above_the_deadband() {
    let model = CurrentModel { k_s: 2.0, deadband: 0.05, noise_sigma: 0.0 };
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..10 {
        let t = 0.2 + 0.3 * k as f64;
        let mut tensions = [0.0; 8];
        tensions[TendonState::index(0, 0, 0)] = t;
        let ts = TendonState { tensions, commanded_displacements: [0.0; 4] };
        let q = actuator_load(&ts, &model, 3).0;
        assert!((q[0] - (t - 0.05) / 2.0).abs() <= 1e-9);
        assert_eq!(&q[1..], &[0.0; 3]);
        if let Some((t0, q0)) = prev {
            assert!(((q[0] - q0) / (t - t0) - 0.5).abs() <= 1e-9);
        }
        prev = Some((t, q[0]));
    }
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthFrame {
    let depth = (0..w * h)
        .map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(MIN_RANGE_MM..=MAX_RANGE_MM) })
        .collect();
    DepthFrame { width: w, height: h, depth }
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    Mask { width: w, height: h, bits: (0..w * h).map(|_| rng.random_bool(0.5)).collect() }
}

#[test]
fn mask_dimension_mismatch_is_rejected() {
    let f = DepthFrame::zeros(64, 64);
    assert!(apply_mask(&f, &Mask::filled(64, 63, true)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn masking_is_the_pixelwise_product(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_frame(&mut rng, 64, 64);
        let m = random_mask(&mut rng, 64, 64);
        let out = apply_mask(&f, &m).unwrap();
        for i in 0..64 * 64 {
            prop_assert_eq!(out.frame().depth[i], f.depth[i] * m.bits[i] as u16);
        }
        let twice = apply_mask(out.frame(), &m).unwrap();
        prop_assert_eq!(twice.frame(), out.frame());
        let ones = apply_mask(&f, &Mask::filled(64, 64, true)).unwrap();
        prop_assert_eq!(ones.frame(), &f);
        let zeros = apply_mask(&f, &Mask::filled(64, 64, false)).unwrap();
        prop_assert!(zeros.frame().depth.iter().all(|&d| d == 0));
    }

    #[test]
    fn frame_codec_round_trips(seed in any::<u64>(), w in 1usize..40, h in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_frame(&mut rng, w, h);
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), FRAME_HEADER_LEN + 2 * w * h);
        prop_assert_eq!(&bytes[..4], FRAME_MAGIC);
        let (back, used) = DepthFrame::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, f);
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        prop_assert!(DepthFrame::decode(&bad).is_err());
    }

    #[test]
    fn head_depth_matches_analytic_sphere(x in -0.05f64..0.05, y in -0.05f64..0.05, z in 0.2f64..0.35) {
        let cam = CameraModel::default();
        let head = HeadModel { center: Vector3::new(x, y, z), ..HeadModel::default() };
        let m = FingerModel::default();
        let f = render_depth(&cam, &Isometry3::identity(), &m, &[], Some(&head));
        let r = head.outer_radius();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let ray = cam.pixel_ray(u, v);
                let d = ray.normalize();
                // |t d - c|^2 = r^2, nearest root, converted to z depth.
                let b = d.dot(&head.center);
                let disc = b * b - head.center.norm_squared() + r * r;
                let got = f.get(u, v);
                if disc < 0.0 {
                    prop_assert_eq!(got, 0);
                    continue;
                }
                let zmm = (b - disc.sqrt()) * d.z * 1000.0;
                if zmm < MIN_RANGE_MM as f64 + 1.0 || zmm > MAX_RANGE_MM as f64 - 1.0 || disc < 1e-9 {
                    continue;
                }
                prop_assert!((got as f64 - zmm).abs() <= 1.0, "pixel ({}, {}): {} vs {}", u, v, got, zmm);
            }
        }
    }

    #[test]
    fn flips_touch_exactly_the_requested_fraction(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, 32, 32);
        let out = corrupt_mask(&m, Corruption::Flip, frac, seed);
        let changed = m.bits.iter().zip(&out.bits).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (frac * 1024.0).round() as usize);
        prop_assert_eq!(corrupt_mask(&m, Corruption::Flip, frac, seed), out);
    }

    #[test]
    fn dilation_contains_and_erosion_is_contained(seed in any::<u64>(), r in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, 24, 24);
        let d = corrupt_mask(&m, Corruption::Dilate, r as f64, 0);
        let e = corrupt_mask(&m, Corruption::Erode, r as f64, 0);
        for i in 0..m.bits.len() {
            prop_assert!(!m.bits[i] || d.bits[i]);
            prop_assert!(!e.bits[i] || m.bits[i]);
        }
    }
}
