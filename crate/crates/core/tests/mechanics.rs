use approx::assert_abs_diff_eq;
use nalgebra::{Isometry3, Vector3};
use proptest::prelude::*;

use moe_sim::mechanics::*;
use moe_sim::scene::HeadModel;

fn single_joint(k: f64, r: f64, ks: f64) -> FingerModel {
    FingerModel { n_links: 1, joint_stiffness: k, moment_arm: r, tendon_series_stiffness: ks, ..FingerModel::default() }
}

/// Scalar bisection on k·θ = r·(T+ − T−) with both tensions re-evaluated at θ.
fn bisect_fixed_point(k: f64, r: f64, ks: f64, c: f64) -> f64 {
    let g = |th: f64| {
        let plus = ks * (c - r * th).max(0.0);
        let minus = ks * (-c + r * th).max(0.0);
        k * th - r * (plus - minus)
    };
    let (mut lo, mut hi) = (-1.5, 1.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn single_finger_ee(model: FingerModel) -> EndEffector {
    EndEffector { finger: model, jaw_separation: 0.04 }
}

#[test]
fn single_joint_matches_bisection() {
    for (k, r, ks, c) in [(0.05, 0.006, 500.0, 0.002), (0.02, 0.004, 800.0, -0.003), (0.2, 0.007, 300.0, 0.005)] {
        let ee = single_finger_ee(single_joint(k, r, ks));
        let eq = equilibrium_solve(&ee, &[c, 0.0, c, 0.0], None, &Isometry3::identity(), None).unwrap();
        let want = bisect_fixed_point(k, r, ks, c);
        for f in &eq.fingers {
            assert!((f.joint_angles[0][0] - want).abs() <= 1e-6, "{} vs {want}", f.joint_angles[0][0]);
            assert_eq!(f.joint_angles[1][0], 0.0);
        }
    }
}

#[test]
fn fk_two_link_hand_evaluation() {
    let m = FingerModel { n_links: 2, ..FingerModel::default() };
    let mut st = FingerState::straight(&m, Isometry3::identity());
    st.joint_angles[0] = vec![0.1, 0.1];
    let tip = forward_kinematics(&m, &st).unwrap().tip;
    // Plane-a rotations are about y: each link of length L/2 tilts toward +x.
    let h = 0.105 / 2.0;
    let want = Vector3::new(h * 0.1f64.sin() + h * 0.2f64.sin(), 0.0, h * 0.1f64.cos() + h * 0.2f64.cos());
    assert_abs_diff_eq!(tip, want, epsilon = 1e-12);
}

#[test]
fn symmetric_commands_leave_fingers_straight() {
    let ee =
        EndEffector { finger: FingerModel { pretension: 0.003, ..FingerModel::default() }, ..EndEffector::default() };
    let eq = equilibrium_solve(&ee, &[0.0; 4], None, &Isometry3::translation(0.0, 0.0, 1.0), None).unwrap();
    for f in &eq.fingers {
        assert!(f.joint_angles.iter().flatten().all(|a| a.abs() < 1e-12));
    }
}

fn pressed(depth: f64, commands: [f64; 4]) -> (HeadModel, Equilibrium) {
    let ee = EndEffector::default();
    let head = HeadModel::default();
    let (_, eq) = soft_press(&ee, &commands, &head, &Vector3::z(), depth, 8).unwrap();
    (head, eq)
}

#[test]
fn pressed_solves_meet_the_residual_bound() {
    let ee = EndEffector::default();
    for (depth, c) in [(0.01, [0.0; 4]), (0.04, [-0.008, 0.0, -0.008, 0.0]), (0.07, [-0.012, 0.001, -0.01, -0.001])] {
        let (head, eq) = pressed(depth, c);
        assert!(!eq.contacts.is_empty());
        assert!(eq.residual <= 1e-6);
        assert!(torque_residual(&ee, &c, Some(&head), &eq.fingers).unwrap() <= 1e-6);
    }
}

#[test]
fn action_reaction_on_solved_contacts() {
    let ee = EndEffector::default();
    let (head, eq) = pressed(0.05, [-0.01, 0.0, -0.01, 0.0]);
    let w = head_wrench(&eq.contacts, &head);
    // Reactions on the fingers, recomputed from each finger's state.
    let on_fingers: Vector3<f64> =
        eq.fingers.iter().flat_map(|st| contact_forces(&ee.finger, st, &head).unwrap()).map(|c| -c.force).sum();
    for k in 0..3 {
        assert!((w.force[k] + on_fingers[k]).abs() <= 1e-12);
    }
    // Penalty forces are radial, so they exert no torque about the center.
    assert!(w.torque.norm() <= 1e-12 * (1.0 + w.force.norm()));
    for c in &eq.contacts {
        assert!(c.penetration >= 0.0);
        assert!(c.force.dot(&c.normal) >= 0.0);
    }
}

#[test]
fn contact_law_is_continuous_at_the_knee() {
    let head = HeadModel::default();
    let eps = 1e-9;
    let jump = contact_force_magnitude(&head, head.h_hair + eps) - contact_force_magnitude(&head, head.h_hair - eps);
    assert!(jump.abs() <= 1e-4);
}

#[test]
fn loaded_tendons_tighten_with_obstruction() {
    // Finger 0 bends toward -x under a positive command; a head beside it
    // pushes it back, stretching the loaded tendon.
    let ee = EndEffector::default();
    let c = [0.004, 0.0, 0.0, 0.0];
    let mut last = 0.0;
    for gap in [0.02, 0.015, 0.01, 0.005, 0.0, -0.003, -0.006] {
        let mut head = HeadModel::default();
        let reach = head.outer_radius() + ee.finger.radius + ee.jaw_separation / 2.0;
        head.center = Vector3::new(-(reach + gap), 0.0, 0.09);
        let eq = equilibrium_solve(&ee, &c, Some(&head), &Isometry3::identity(), None).unwrap();
        let loaded = eq.tendons.tensions[TendonState::index(0, 0, 0)];
        assert!(loaded >= last - 1e-9, "gap {gap}: {loaded} < {last}");
        last = loaded;
    }
    assert!(last > 0.0);
}

#[test]
fn rigid_presses_harder_than_soft() {
    // Fingers curled inward, the posture the skills use.
    let curl = [-0.008, 0.0, -0.008, 0.0];
    let head = HeadModel::default();
    let rigid = RigidGripperModel::default();
    for depth in [0.002, 0.004, 0.006] {
        let (soft, _) = soft_press(&EndEffector::default(), &curl, &head, &Vector3::z(), depth, 4).unwrap();
        assert!(rigid_press(&rigid, &head, depth) > soft, "depth {depth}");
    }
}

#[test]
fn solver_rejects_bad_inputs() {
    let ee = EndEffector::default();
    assert!(matches!(
        equilibrium_solve(&ee, &[0.0; 3], None, &Isometry3::identity(), None),
        Err(MechanicsError::Dimension { .. })
    ));
    assert!(equilibrium_solve(&ee, &[f64::NAN, 0.0, 0.0, 0.0], None, &Isometry3::identity(), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn every_solve_meets_the_residual_bound(
        ca in -0.012f64..0.004, cb in -0.002f64..0.002,
        polar in 0.0f64..0.6, azimuth in -3.1f64..3.1, depth in -0.01f64..0.06,
    ) {
        let ee = EndEffector::default();
        let head = HeadModel::default();
        let dir = Vector3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), polar.cos());
        let c = [ca, cb, ca, cb];
        let s0 = contact_standoff(&ee, &c, &head, &dir, 0.0).unwrap();
        let pose = approach_pose(&head, &dir, s0 - depth, 0.0);
        let eq = equilibrium_solve(&ee, &c, Some(&head), &pose, None).unwrap();
        prop_assert!(eq.residual <= 1e-6);
        let w = head_wrench(&eq.contacts, &head);
        prop_assert!(w.force.iter().chain(w.torque.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn single_joint_fixed_point(k in 0.01f64..0.3, ks in 100.0f64..2000.0, c in -0.006f64..0.006) {
        let r = 0.006;
        let ee = single_finger_ee(single_joint(k, r, ks));
        let eq = equilibrium_solve(&ee, &[c, 0.0, 0.0, 0.0], None, &Isometry3::identity(), None).unwrap();
        prop_assert!((eq.fingers[0].joint_angles[0][0] - bisect_fixed_point(k, r, ks, c)).abs() <= 1e-6);
    }

    #[test]
    fn contact_law_is_monotone(a in -0.01f64..0.06, b in -0.01f64..0.06) {
        let head = HeadModel::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(contact_force_magnitude(&head, lo) <= contact_force_magnitude(&head, hi));
        prop_assert!(contact_force_magnitude(&head, lo) >= 0.0);
    }

    #[test]
    fn fk_preserves_link_lengths(angles in proptest::collection::vec(-1.5f64..1.5, 16)) {
        let m = FingerModel::default();
        let mut st = FingerState::straight(&m, Isometry3::translation(0.01, 0.02, 0.03));
        st.joint_angles = [angles[..8].to_vec(), angles[8..].to_vec()];
        let fk = forward_kinematics(&m, &st).unwrap();
        let mut origins: Vec<Vector3<f64>> = fk.links.iter().map(|l| l.translation.vector).collect();
        origins.push(fk.tip);
        for pair in origins.windows(2) {
            prop_assert!(((pair[1] - pair[0]).norm() - m.link_length()).abs() < 1e-12);
        }
    }

    #[test]
    fn tensions_follow_the_series_law(ca in -0.01f64..0.01, cb in -0.01f64..0.01, bend in -0.3f64..0.3) {
        let m = FingerModel::default();
        let ee = EndEffector::default();
        let mut st = ee.rest_state(&Isometry3::identity());
        st[0].joint_angles[0] = vec![bend; m.n_links];
        let t = tendon_tensions(&m, &st, &[ca, cb, 0.0, 0.0]).unwrap();
        let short = m.moment_arm * bend * m.n_links as f64;
        prop_assert!((t.tensions[0] - m.tendon_series_stiffness * (ca - short).max(0.0)).abs() < 1e-12);
        prop_assert!((t.tensions[1] - m.tendon_series_stiffness * (short - ca).max(0.0)).abs() < 1e-12);
        prop_assert!(t.tensions.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rigid_press_is_monotone(a in 0.0f64..0.05, b in 0.0f64..0.05) {
        let head = HeadModel::default();
        let g = RigidGripperModel::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rigid_press(&g, &head, lo) <= rigid_press(&g, &head, hi));
    }
}
