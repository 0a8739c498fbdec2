use std::sync::OnceLock;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

use moe_sim::config::GlobalConfig;
use moe_sim::control::*;
use moe_sim::dataset::{collect, split, CollectContext, SamplerConfig};
use moe_sim::estimator::{train, Estimator, EstimatorParams, ForceVector, TrainConfig, Variant};
use moe_sim::mechanics::{EndEffector, RigidGripperModel};
use moe_sim::scene::{synth_demonstration, DemoStyle, HeadModel, HeadPoseProvider, PoseMode};
use moe_sim::sensing::CurrentModel;

/// Fused estimator trained on presses around the setpoint, shared by the
/// tests in this file.
fn estimator() -> &'static Estimator {
    static EST: OnceLock<Estimator> = OnceLock::new();
    EST.get_or_init(|| {
        let config = GlobalConfig::default();
        let ee = config.end_effector();
        let head = config.head(None);
        let sampler = SamplerConfig::task_regime();
        let ctx = CollectContext {
            sampler: &sampler,
            ee: &ee,
            head: &head,
            camera: &config.camera,
            current: &config.current_model,
        };
        let file = collect(&ctx, "default").unwrap();
        let (tr, te) = split(&file, 0.2, 0).unwrap();
        let out = train(&file.select(&tr), &file.select(&te), &TrainConfig::default(), Variant::Fused).unwrap();
        Estimator::new(out.params).unwrap()
    })
}

struct World {
    ee: EndEffector,
    head: HeadModel,
    config: GlobalConfig,
}

impl World {
    fn new() -> Self {
        let config = GlobalConfig::default();
        Self { ee: config.end_effector(), head: config.head(None), config }
    }

    fn run(
        &self,
        spec: &TaskSpec,
        mode: FeedbackMode,
        provider: &HeadPoseProvider,
        est: Option<&Estimator>,
    ) -> TaskResult {
        let camera = self.config.task_camera();
        let current = CurrentModel::default();
        let scene = TaskScene { ee: &self.ee, head: &self.head, camera: &camera, current: &current, provider };
        run_task(spec, mode, &scene, est, &self.config.controller, 0).unwrap()
    }
}

fn norm(f: [f64; 3]) -> f64 {
    Vector3::from(f).norm()
}

fn drift() -> HeadPoseProvider {
    HeadPoseProvider { mode: PoseMode::SinusoidalDrift, amplitude: 0.008, ..HeadPoseProvider::default() }
}

#[test]
fn pat_makes_three_firm_contacts() {
    let w = World::new();
    let r = w.run(
        &TaskSpec::pat(Approach::Top),
        FeedbackMode::ForceFeedback,
        &HeadPoseProvider::default(),
        Some(estimator()),
    );
    assert!(!r.metrics.aborted);
    // Contact episodes are maximal runs of steps above the contact threshold.
    let mut peaks = Vec::new();
    let mut current: Option<f64> = None;
    for row in &r.trace {
        let f = norm(row.true_force);
        match (f > CONTACT_FORCE, current.as_mut()) {
            (true, Some(p)) => *p = p.max(f),
            (true, None) => current = Some(f),
            (false, Some(_)) => peaks.push(current.take().unwrap()),
            (false, None) => {}
        }
    }
    peaks.extend(current);
    assert_eq!(peaks.len(), 3, "{peaks:?}");
    assert!(peaks.iter().all(|&p| p >= 0.5), "{peaks:?}");
    assert!(r.metrics.contact_ratio >= 0.9);
    assert!(r.metrics.max_true_force <= 2.0 * r.metrics.target_force);
}

#[test]
fn grasp_stays_under_one_and_a_half_times_target() {
    let w = World::new();
    let r = w.run(
        &TaskSpec::grasp(Approach::Top),
        FeedbackMode::ForceFeedback,
        &HeadPoseProvider::default(),
        Some(estimator()),
    );
    assert!(!r.metrics.aborted);
    assert!(r.metrics.max_true_force <= 1.5 * 2.0, "{}", r.metrics.max_true_force);
    assert!(r.metrics.strand_count.unwrap() > 0);
}

#[test]
fn force_feedback_beats_vision_only_under_drift() {
    let w = World::new();
    let spec = TaskSpec::pat(Approach::Top);
    let ff = w.run(&spec, FeedbackMode::ForceFeedback, &drift(), Some(estimator()));
    let vo = w.run(&spec, FeedbackMode::VisionOnly, &drift(), None);
    assert!(ff.metrics.mean_abs_deviation < vo.metrics.mean_abs_deviation);
    assert!(ff.metrics.max_true_force <= 2.0 * ff.metrics.target_force);
}

#[test]
fn comb_runs_for_the_demonstration() {
    let w = World::new();
    let demo = synth_demonstration(&w.head, DemoStyle::Arc, 12.0, 2).unwrap();
    let d = demo.duration();
    let r = w.run(&TaskSpec::comb(demo), FeedbackMode::VisionOnly, &HeadPoseProvider::default(), None);
    let dt = w.config.controller.dt();
    let p = &w.config.controller.profile;
    let allowance = p.approach_time + p.press_time + p.retreat_time;
    let span = r.trace.last().unwrap().t - r.trace[0].t;
    assert!((span - (d + allowance)).abs() <= dt + 1e-9, "{span} vs {}", d + allowance);
    for pair in r.trace.windows(2) {
        assert!((pair[1].t - pair[0].t - dt).abs() < 1e-9);
    }
}

#[test]
fn vision_only_ignores_the_estimator() {
    let w = World::new();
    let spec = TaskSpec::pat(Approach::Side);
    let other = Estimator::new(EstimatorParams::init(Default::default(), Variant::Fused, 99).unwrap()).unwrap();
    let a = w.run(&spec, FeedbackMode::VisionOnly, &HeadPoseProvider::default(), Some(estimator()));
    let b = w.run(&spec, FeedbackMode::VisionOnly, &HeadPoseProvider::default(), Some(&other));
    let c = w.run(&spec, FeedbackMode::VisionOnly, &HeadPoseProvider::default(), None);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace, c.trace);
}

#[test]
fn force_feedback_requires_an_estimator() {
    let w = World::new();
    let camera = w.config.task_camera();
    let current = CurrentModel::default();
    let provider = HeadPoseProvider::default();
    let scene = TaskScene { ee: &w.ee, head: &w.head, camera: &camera, current: &current, provider: &provider };
    let r = run_task(&TaskSpec::pat(Approach::Top), FeedbackMode::ForceFeedback, &scene, None, &w.config.controller, 0);
    assert!(matches!(r, Err(ControlError::MissingEstimator)));
}

#[test]
fn runs_are_deterministic() {
    let w = World::new();
    let spec = TaskSpec::grasp(Approach::Side);
    let a = w.run(&spec, FeedbackMode::ForceFeedback, &drift(), Some(estimator()));
    let b = w.run(&spec, FeedbackMode::ForceFeedback, &drift(), Some(estimator()));
    assert_eq!(a, b);
}

#[test]
fn grasp_compare_orders_rigid_above_soft() {
    let w = World::new();
    let rows =
        grasp_compare(&w.ee, &RigidGripperModel::default(), &w.head, &TaskProfile::default(), &[0.002, 0.004, 0.006])
            .unwrap();
    assert_eq!(rows.len(), 6);
    let (rigid, moe): (Vec<&GraspRow>, Vec<&GraspRow>) = rows.iter().partition(|r| r.end_effector == "rigid");
    for (r, m) in rigid.iter().zip(&moe) {
        assert_eq!(r.depth_mm, m.depth_mm);
        assert!(r.max_force_n > m.max_force_n);
    }
    for series in [&rigid, &moe] {
        for pair in series.windows(2) {
            assert!(pair[1].max_force_n > pair[0].max_force_n);
        }
    }
}

#[test]
fn fingers_that_never_close_hold_nothing() {
    let w = World::new();
    let profile = TaskProfile { close_command: -0.008, ..TaskProfile::default() };
    let rows = grasp_compare(&w.ee, &RigidGripperModel::default(), &w.head, &profile, &[0.004]).unwrap();
    assert_eq!(rows.iter().find(|r| r.end_effector == "moe").unwrap().strand_count, 0);
}

#[test]
fn deeper_presses_enclose_at_least_as_many_strands() {
    let w = World::new();
    let rows =
        grasp_compare(&w.ee, &RigidGripperModel::default(), &w.head, &TaskProfile::default(), &[0.002, 0.01, 0.02])
            .unwrap();
    let moe: Vec<usize> = rows.iter().filter(|r| r.end_effector == "moe").map(|r| r.strand_count).collect();
    assert!(moe.windows(2).all(|p| p[1] >= p[0]), "{moe:?}");
    assert!(moe[0] > 0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn strand_count_is_invariant_under_rigid_motion(
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..3.1,
        tx in -0.2f64..0.2, ty in -0.2f64..0.2, tz in -0.2f64..0.2,
    ) {
        let head = HeadModel::default();
        let dir = Vector3::z();
        // A ring of points above the crown standing in for closed fingers.
        let pts: Vec<Vector3<f64>> = (0..16)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 16.0;
                Vector3::new(0.03 * a.cos(), 0.02 * a.sin(), 0.1)
            })
            .collect();
        let base = enclosed_strands(&head, &dir, &pts, 0.004);
        let axis = Vector3::new(ax, ay, az);
        prop_assume!(axis.norm() > 0.1);
        let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let shift = Vector3::new(tx, ty, tz);
        let moved = HeadModel { center: rot * head.center + shift, orientation: rot * head.orientation, ..head.clone() };
        let moved_pts: Vec<Vector3<f64>> = pts.iter().map(|p| rot * p + shift).collect();
        prop_assert!(base > 0);
        prop_assert_eq!(enclosed_strands(&moved, &(rot * dir), &moved_pts, 0.004), base);
    }

    #[test]
    fn feedback_corrections_are_bounded(fz in -10.0f64..10.0, steps in 1usize..50) {
        let config = ControllerConfig::default();
        let mut state = ControllerState::default();
        for _ in 0..steps {
            let c = feedback_step(&config, FeedbackMode::ForceFeedback, &mut state, &ForceVector([0.0, 0.0, fz]));
            prop_assert!(c.abs() <= config.max_step + 1e-15);
            prop_assert!(state.integral.abs() <= config.integral_clamp + 1e-15);
            // Press deeper when under target, back off when over.
            prop_assert!(c * (config.target_force - fz) >= 0.0);
        }
        let mut vo = ControllerState::default();
        prop_assert_eq!(feedback_step(&config, FeedbackMode::VisionOnly, &mut vo, &ForceVector([0.0, 0.0, fz])), 0.0);
        prop_assert_eq!(vo.integral, 0.0);
    }
}
