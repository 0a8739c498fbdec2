//! Force-feedback execution of the pat, comb and grasp skills, the
//! vision-only baseline, and the grasped-strand proxy.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use geo::{ConvexHull, Distance, Euclidean, Intersects, MultiPoint, Point, Rect};
use nalgebra::{Isometry3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ee_force;
use crate::estimator::{Estimator, EstimatorError, ForceVector};
use crate::mechanics::{
    approach_pose, contact_standoff, equilibrium_solve, finger_points, head_wrench, rigid_press, EndEffector,
    Equilibrium, FingerState, MechanicsError, RigidGripperModel,
};
use crate::rng::{derive_seed, STREAM_POSE, STREAM_TASK};
use crate::scene::{observed_head_pose, Demonstration, HeadModel, HeadPose, HeadPoseProvider};
use crate::sensing::{actuator_load, apply_mask, render, CameraModel, CurrentModel, SensingError};

/// Half-width of the acceptable band around the force setpoint, newtons.
pub const TRACKING_BAND: f64 = 0.25;
/// Force magnitude that counts as contact in the metrics, newtons.
pub const CONTACT_FORCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("force feedback needs a trained estimator")]
    MissingEstimator,
    #[error("no depth up to {0} m reaches the force setpoint")]
    Unreachable(f64),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ControlError>;

/// Timing and actuation of the skills.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskProfile {
    /// Gap above first hair contact where approaches start, meters.
    pub clearance: f64,
    pub approach_time: f64,
    /// Feed-forward ramp from first contact to the calibrated depth.
    pub press_time: f64,
    pub pat_hold: f64,
    pub retreat_time: f64,
    /// Regulated press before the fingers start closing in a grasp.
    pub grasp_settle: f64,
    pub close_time: f64,
    pub release_time: f64,
    /// Inward curl held on the bending actuators while pressing, meters.
    pub curl_command: f64,
    /// Bending command the grasp closes to, meters.
    pub close_command: f64,
    /// Deepest press considered when calibrating the open-loop depth.
    pub max_depth: f64,
}

impl Default for TaskProfile {
    fn default() -> Self {
        Self {
            clearance: 0.02,
            approach_time: 1.0,
            press_time: 1.0,
            pat_hold: 2.0,
            retreat_time: 1.0,
            grasp_settle: 8.0,
            close_time: 5.0,
            release_time: 5.0,
            curl_command: -0.008,
            close_command: -0.012,
            max_depth: 0.12,
        }
    }
}

impl TaskProfile {
    pub fn curl(&self) -> [f64; 4] {
        [self.curl_command, 0.0, self.curl_command, 0.0]
    }

    fn commands_at(&self, closure: f64) -> [f64; 4] {
        let c = self.curl_command + (self.close_command - self.curl_command) * closure;
        [c, 0.0, c, 0.0]
    }

    /// A grasp closes only when its final command curls further inward.
    pub fn closes(&self) -> bool {
        self.close_command < self.curl_command
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Newtons.
    pub target_force: f64,
    /// m/N.
    pub kp: f64,
    /// m/(N·s).
    pub ki: f64,
    /// Bound on the integral contribution, meters.
    pub integral_clamp: f64,
    pub rate_hz: f64,
    /// Bound on one correction, meters.
    pub max_step: f64,
    /// Seconds after regulation starts that the tracking metrics ignore.
    pub settle_window: f64,
    /// Time constant of the smoothing applied to tracked head positions,
    /// seconds; zero uses raw observations.
    pub pose_filter: f64,
    pub profile: TaskProfile,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            target_force: 2.0,
            kp: 0.003,
            ki: 0.002,
            integral_clamp: 0.001,
            rate_hz: 10.0,
            max_step: 0.005,
            settle_window: 1.0,
            pose_filter: 0.5,
            profile: TaskProfile::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ControlError::InvalidConfig(m.into()));
        let p = &self.profile;
        if !(self.target_force > 0.0) {
            return bad("target_force must be positive");
        }
        if !(self.kp >= 0.0 && self.ki >= 0.0) {
            return bad("gains must be non-negative");
        }
        if !(self.rate_hz > 0.0) {
            return bad("rate_hz must be positive");
        }
        if !(self.integral_clamp >= 0.0 && self.max_step >= 0.0 && self.settle_window >= 0.0 && self.pose_filter >= 0.0)
        {
            return bad("clamps, settle window and pose filter must be non-negative");
        }
        let times =
            [p.approach_time, p.press_time, p.pat_hold, p.retreat_time, p.grasp_settle, p.close_time, p.release_time];
        if times.iter().any(|t| !(*t > 0.0)) {
            return bad("phase durations must be positive");
        }
        if !(p.clearance >= 0.0 && p.max_depth > 0.0) {
            return bad("clearance must be non-negative and max_depth positive");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    ForceFeedback,
    VisionOnly,
}

impl FeedbackMode {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackMode::ForceFeedback => "force-feedback",
            FeedbackMode::VisionOnly => "vision-only",
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeedbackMode {
    type Err = ControlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "force-feedback" => Ok(FeedbackMode::ForceFeedback),
            "vision-only" => Ok(FeedbackMode::VisionOnly),
            other => Err(ControlError::InvalidTask(format!("unknown mode {other:?}"))),
        }
    }
}

/// Integral memory of the PI law, stored as its contribution in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControllerState {
    pub integral: f64,
}

/// Depth correction for one control period from the estimated force.
///
/// Positive corrections press deeper. Vision-only mode and non-finite
/// estimates leave the depth and the integral untouched.
pub fn feedback_step(
    config: &ControllerConfig,
    mode: FeedbackMode,
    state: &mut ControllerState,
    estimated: &ForceVector,
) -> f64 {
    if mode == FeedbackMode::VisionOnly || !estimated.0[2].is_finite() {
        return 0.0;
    }
    let e = config.target_force - estimated.0[2];
    let clamp = config.integral_clamp;
    state.integral = (state.integral + config.ki * e * config.dt()).clamp(-clamp, clamp);
    (config.kp * e + state.integral).clamp(-config.max_step, config.max_step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pat,
    Comb,
    Grasp,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pat => "pat",
            TaskKind::Comb => "comb",
            TaskKind::Grasp => "grasp",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = ControlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pat" => Ok(TaskKind::Pat),
            "comb" => Ok(TaskKind::Comb),
            "grasp" => Ok(TaskKind::Grasp),
            other => Err(ControlError::InvalidTask(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Top,
    Side,
}

impl Approach {
    /// Approach direction in the head frame, from the head center outward.
    pub fn direction(self) -> Vector3<f64> {
        match self {
            Approach::Top => Vector3::z(),
            Approach::Side => Vector3::y(),
        }
    }
}

impl FromStr for Approach {
    type Err = ControlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Approach::Top),
            "side" => Ok(Approach::Side),
            other => Err(ControlError::InvalidTask(format!("unknown approach {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub approach: Option<Approach>,
    pub demonstration: Option<Demonstration>,
    pub pat_count: usize,
    /// Seconds the closed grasp is held.
    pub grasp_hold: f64,
}

impl TaskSpec {
    pub fn pat(approach: Approach) -> Self {
        Self { kind: TaskKind::Pat, approach: Some(approach), demonstration: None, pat_count: 3, grasp_hold: 3.0 }
    }

    pub fn comb(demonstration: Demonstration) -> Self {
        Self { kind: TaskKind::Comb, approach: None, demonstration: Some(demonstration), pat_count: 3, grasp_hold: 3.0 }
    }

    pub fn grasp(approach: Approach) -> Self {
        Self { kind: TaskKind::Grasp, approach: Some(approach), demonstration: None, pat_count: 3, grasp_hold: 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ControlError::InvalidTask(m.into()));
        match self.kind {
            TaskKind::Comb if self.demonstration.is_none() => bad("comb requires a demonstration"),
            TaskKind::Pat | TaskKind::Grasp if self.approach.is_none() => bad("pat and grasp require an approach"),
            TaskKind::Pat if self.pat_count == 0 => bad("pat count must be positive"),
            TaskKind::Grasp if !(self.grasp_hold > 0.0) => bad("grasp hold must be positive"),
            _ => Ok(()),
        }
    }

    /// Head-frame direction the end-effector presses along at schedule time `t`.
    fn direction(&self, schedule: &Schedule, t: f64) -> Vector3<f64> {
        match (&self.demonstration, self.kind) {
            (Some(demo), TaskKind::Comb) => {
                let start = schedule.first_intended().unwrap_or(0.0);
                demo.point_at(demo.samples[0].0 + (t - start).max(0.0)).normalize()
            }
            _ => self.approach.map_or(Vector3::z(), Approach::direction),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Approach,
    Press,
    Hold,
    Close,
    Closed,
    Release,
    Retreat,
}

impl Phase {
    /// Phases in which the fingers are meant to stay on the head.
    fn intended(self) -> bool {
        matches!(self, Phase::Hold | Phase::Close | Phase::Closed | Phase::Release)
    }
}

struct Schedule(Vec<(Phase, f64, f64)>);

impl Schedule {
    fn new(spec: &TaskSpec, p: &TaskProfile) -> Self {
        let mut phases = Vec::new();
        let mut push = |phase, dur| phases.push((phase, dur));
        match spec.kind {
            TaskKind::Pat => {
                for _ in 0..spec.pat_count {
                    push(Phase::Approach, p.approach_time);
                    push(Phase::Press, p.press_time);
                    push(Phase::Hold, p.pat_hold);
                    push(Phase::Retreat, p.retreat_time);
                }
            }
            TaskKind::Comb => {
                let d = spec.demonstration.as_ref().map_or(0.0, Demonstration::duration);
                push(Phase::Approach, p.approach_time);
                push(Phase::Press, p.press_time);
                push(Phase::Hold, d);
                push(Phase::Retreat, p.retreat_time);
            }
            TaskKind::Grasp => {
                push(Phase::Approach, p.approach_time);
                push(Phase::Press, p.press_time);
                push(Phase::Hold, p.grasp_settle);
                push(Phase::Close, p.close_time);
                push(Phase::Closed, spec.grasp_hold);
                push(Phase::Release, p.release_time);
                push(Phase::Retreat, p.retreat_time);
            }
        }
        let mut t = 0.0;
        Self(
            phases
                .into_iter()
                .filter(|(_, d)| *d > 0.0)
                .map(|(ph, d)| {
                    let start = t;
                    t += d;
                    (ph, start, d)
                })
                .collect(),
        )
    }

    fn duration(&self) -> f64 {
        self.0.last().map_or(0.0, |(_, s, d)| s + d)
    }

    /// Phase index and progress in `[0, 1]` at time `t`.
    fn at(&self, t: f64) -> (usize, f64) {
        let i = self.0.iter().rposition(|(_, s, _)| *s <= t + 1e-9).unwrap_or(0);
        let (_, s, d) = self.0[i];
        (i, ((t - s) / d).clamp(0.0, 1.0))
    }

    fn first_intended(&self) -> Option<f64> {
        self.0.iter().find(|(ph, _, _)| ph.intended()).map(|(_, s, _)| *s)
    }

    /// Start of the run of intended phases containing phase `i`.
    fn block_start(&self, i: usize) -> f64 {
        let mut j = i;
        while j > 0 && self.0[j - 1].0.intended() {
            j -= 1;
        }
        self.0[j].1
    }
}

/// Objects a task runs against. `head` is the head at rest.
#[derive(Clone, Copy, Debug)]
pub struct TaskScene<'a> {
    pub ee: &'a EndEffector,
    pub head: &'a HeadModel,
    pub camera: &'a CameraModel,
    pub current: &'a CurrentModel,
    pub provider: &'a HeadPoseProvider,
}

/// One control tick. Forces are in the end-effector frame, whose `z` axis
/// points into the head.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub true_force: [f64; 3],
    pub estimated: [f64; 3],
    /// Commanded press past first contact, meters.
    pub depth_cmd: f64,
    pub intended: bool,
    /// Intended contact after the settle window.
    pub tracked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskKind,
    pub mode: FeedbackMode,
    pub target_force: f64,
    pub max_true_force: f64,
    /// Fraction of intended-contact steps with force above the contact threshold.
    pub contact_ratio: f64,
    /// Mean `|F_normal - target|` over tracked steps.
    pub mean_abs_deviation: f64,
    /// Fraction of tracked steps within the tracking band.
    pub within_band: f64,
    pub tracked_steps: usize,
    pub strand_count: Option<usize>,
    pub aborted: bool,
    pub abort_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub trace: Vec<TraceRow>,
    pub metrics: TaskMetrics,
}

impl TaskResult {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "fx", "fy", "fz", "fx_hat", "fy_hat", "fz_hat", "depth_cmd"])?;
        for r in &self.trace {
            let f = r.true_force;
            let e = r.estimated;
            wr.serialize((r.t, f[0], f[1], f[2], e[0], e[1], e[2], r.depth_cmd))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_metrics_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.metrics)?;
        Ok(())
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn metrics(spec: &TaskSpec, mode: FeedbackMode, config: &ControllerConfig, trace: &[TraceRow]) -> TaskMetrics {
    let intended: Vec<&TraceRow> = trace.iter().filter(|r| r.intended).collect();
    let tracked: Vec<f64> =
        trace.iter().filter(|r| r.tracked).map(|r| (r.true_force[2] - config.target_force).abs()).collect();
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    TaskMetrics {
        task: spec.kind,
        mode,
        target_force: config.target_force,
        max_true_force: trace.iter().map(|r| norm3(&r.true_force)).fold(0.0, f64::max),
        contact_ratio: frac(intended.iter().filter(|r| norm3(&r.true_force) > CONTACT_FORCE).count(), intended.len()),
        mean_abs_deviation: if tracked.is_empty() { 0.0 } else { tracked.iter().sum::<f64>() / tracked.len() as f64 },
        within_band: frac(tracked.iter().filter(|d| **d <= TRACKING_BAND).count(), tracked.len()),
        tracked_steps: tracked.len(),
        strand_count: None,
        aborted: false,
        abort_reason: None,
    }
}

/// Solve at `pose`, retrying from the rest shape if the warm start fails.
fn solve(
    ee: &EndEffector,
    commands: &[f64; 4],
    head: &HeadModel,
    pose: &Isometry3<f64>,
    warm: Option<&[FingerState; 2]>,
) -> std::result::Result<Equilibrium, MechanicsError> {
    match equilibrium_solve(ee, commands, Some(head), pose, warm) {
        Ok(eq) => Ok(eq),
        Err(e) if warm.is_none() => Err(e),
        Err(_) => equilibrium_solve(ee, commands, Some(head), pose, None),
    }
}

/// Press depth past first contact at which the true normal force on a
/// static head equals `target`; the open-loop depth of the vision-only mode.
pub fn calibrate_depth(
    ee: &EndEffector,
    head: &HeadModel,
    commands: &[f64; 4],
    direction: &Vector3<f64>,
    target: f64,
    max_depth: f64,
) -> Result<f64> {
    let s0 = contact_standoff(ee, commands, head, direction, 0.0)?;
    let normal = |d: f64, warm: Option<&[FingerState; 2]>| -> Result<(f64, [FingerState; 2])> {
        let pose = approach_pose(head, direction, s0 - d, 0.0);
        let eq = solve(ee, commands, head, &pose, warm)?;
        Ok((ee_force(head, &pose, &eq.contacts).0[2], eq.fingers))
    };
    let step = 0.002;
    let (mut lo, mut warm) = (0.0, None);
    let mut hi = None;
    let mut d = 0.0;
    while d < max_depth {
        d = (d + step).min(max_depth);
        let (f, fingers) = normal(d, warm.as_ref())?;
        if f >= target {
            hi = Some(d);
            break;
        }
        lo = d;
        warm = Some(fingers);
    }
    let mut hi = hi.ok_or(ControlError::Unreachable(max_depth))?;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if normal(mid, warm.as_ref())?.0 >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Run one skill under `mode`. Solver failures end the task early with the
/// partial trace and the abort flag set.
pub fn run_task(
    spec: &TaskSpec,
    mode: FeedbackMode,
    scene: &TaskScene<'_>,
    estimator: Option<&Estimator>,
    config: &ControllerConfig,
    seed: u64,
) -> Result<TaskResult> {
    spec.validate()?;
    config.validate()?;
    if mode == FeedbackMode::ForceFeedback && estimator.is_none() {
        return Err(ControlError::MissingEstimator);
    }
    let profile = &config.profile;
    let schedule = Schedule::new(spec, profile);
    let rest = scene.head.pose();
    let start_dir = rest.orientation * spec.direction(&schedule, 0.0);
    let curl = profile.curl();
    // The head is a sphere, so one standoff and depth serve every direction.
    let s0 = contact_standoff(scene.ee, &curl, scene.head, &start_dir, 0.0)?;
    let d_nom = calibrate_depth(scene.ee, scene.head, &curl, &start_dir, config.target_force, profile.max_depth)?;

    let dt = config.dt();
    let n_ticks = (schedule.duration() * config.rate_hz).round() as usize;
    let pose_seed = derive_seed(seed, STREAM_POSE);
    let alpha = if config.pose_filter > 0.0 { 1.0 - (-dt / config.pose_filter).exp() } else { 1.0 };

    let mut trace = Vec::with_capacity(n_ticks + 1);
    let mut filtered: Option<Vector3<f64>> = None;
    let mut warm: Option<[FingerState; 2]> = None;
    let mut ctrl = ControllerState::default();
    let mut offset = 0.0;
    let mut held_depth = 0.0;
    let mut prev_phase = None;
    let mut strands = None;
    let mut abort = None;

    for k in 0..=n_ticks {
        let t = k as f64 * dt;
        let obs = observed_head_pose(scene.provider, &rest, t, pose_seed);
        let f = match filtered {
            Some(p) => p + (obs.observed.position - p) * alpha,
            None => obs.observed.position,
        };
        filtered = Some(f);
        let head_obs = scene.head.posed(&HeadPose { position: f, orientation: obs.observed.orientation });
        let head_true = scene.head.posed(&obs.truth);

        let (i, s) = schedule.at(t);
        let phase = schedule.0[i].0;
        if phase.intended() && prev_phase.is_some_and(|p: Phase| !p.intended()) {
            ctrl = ControllerState::default();
            offset = 0.0;
        }
        let (clearance, depth, commands) = match phase {
            Phase::Approach => (profile.clearance * (1.0 - s), 0.0, curl),
            Phase::Press => (0.0, d_nom * s, curl),
            Phase::Hold => (0.0, d_nom + offset, curl),
            Phase::Close => (0.0, d_nom + offset, profile.commands_at(s)),
            Phase::Closed => (0.0, d_nom + offset, profile.commands_at(1.0)),
            Phase::Release => (0.0, d_nom + offset, profile.commands_at(1.0 - s)),
            Phase::Retreat => {
                if prev_phase != Some(Phase::Retreat) {
                    held_depth = d_nom + offset;
                }
                let back = (2.0 * s).min(1.0);
                let up = (2.0 * s - 1.0).max(0.0);
                (profile.clearance * up, held_depth * (1.0 - back), curl)
            }
        };
        prev_phase = Some(phase);

        let dir = head_obs.orientation * spec.direction(&schedule, t);
        let pose = approach_pose(&head_obs, &dir, s0 + clearance - depth, 0.0);
        let eq = match solve(scene.ee, &commands, &head_true, &pose, warm.as_ref()) {
            Ok(eq) => eq,
            Err(e) => {
                abort = Some(e.to_string());
                break;
            }
        };
        let true_force = ee_force(&head_true, &pose, &eq.contacts);
        let estimated = match (mode, estimator) {
            (FeedbackMode::ForceFeedback, Some(est)) => {
                let tick_seed = derive_seed(derive_seed(seed, STREAM_TASK), k as u64);
                let (frame, mask) = render(
                    scene.camera,
                    &scene.camera.world_pose(&pose),
                    &scene.ee.finger,
                    &eq.fingers,
                    Some(&head_true),
                    Some(tick_seed),
                );
                let q = actuator_load(&eq.tendons, scene.current, tick_seed);
                est.predict(&apply_mask(&frame, &mask)?, &q)?
            }
            _ => ForceVector([0.0; 3]),
        };
        if phase.intended() {
            offset += feedback_step(config, mode, &mut ctrl, &estimated);
        }
        if phase == Phase::Closed && schedule.at(t + dt).0 != i {
            strands = Some(if profile.closes() {
                let dir_true = head_true.orientation * spec.direction(&schedule, t);
                enclosed_strands(&head_true, &dir_true, &moe_points(scene.ee, &eq.fingers)?, scene.ee.finger.radius)
            } else {
                0
            });
        }
        trace.push(TraceRow {
            t,
            true_force: true_force.0,
            estimated: estimated.0,
            depth_cmd: depth,
            intended: phase.intended(),
            tracked: phase.intended() && t - schedule.block_start(i) >= config.settle_window - 1e-9,
        });
        warm = Some(eq.fingers);
    }
    let mut m = metrics(spec, mode, config, &trace);
    m.strand_count = strands.or((spec.kind == TaskKind::Grasp).then_some(0));
    m.aborted = abort.is_some();
    m.abort_reason = abort;
    Ok(TaskResult { trace, metrics: m })
}

/// Grasp skill; returns the enclosed strand count alongside the full result.
pub fn grasp_sequence(
    approach: Approach,
    mode: FeedbackMode,
    scene: &TaskScene<'_>,
    estimator: Option<&Estimator>,
    config: &ControllerConfig,
    seed: u64,
) -> Result<(usize, TaskResult)> {
    let r = run_task(&TaskSpec::grasp(approach), mode, scene, estimator, config, seed)?;
    Ok((r.metrics.strand_count.unwrap_or(0), r))
}

fn moe_points(ee: &EndEffector, fingers: &[FingerState]) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::new();
    for st in fingers {
        out.extend(finger_points(&ee.finger, st)?);
    }
    Ok(out)
}

/// Orthonormal basis of the plane normal to `d`.
fn tangent_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = d.cross(&helper).normalize();
    (e1, d.cross(&e1))
}

/// Central projection of `p` onto the plane tangent to the hair surface at
/// `direction`; points in the far hemisphere have no image.
fn radial_projection(
    head: &HeadModel,
    d: &Vector3<f64>,
    basis: &(Vector3<f64>, Vector3<f64>),
    p: &Vector3<f64>,
) -> Option<Point<f64>> {
    let r = p - head.center;
    let h = r.dot(d);
    if h <= 0.0 {
        return None;
    }
    let q = r * (head.outer_radius() / h);
    Some(Point::new(q.dot(&basis.0), q.dot(&basis.1)))
}

/// Strand anchors whose radial projection lies within `radius` of the
/// convex hull of the finger axis points, projected the same way.
pub fn enclosed_strands(
    head: &HeadModel,
    direction: &Vector3<f64>,
    finger_points: &[Vector3<f64>],
    radius: f64,
) -> usize {
    let d = direction.normalize();
    let basis = tangent_basis(&d);
    let pts: Vec<Point<f64>> = finger_points.iter().filter_map(|p| radial_projection(head, &d, &basis, p)).collect();
    if pts.len() < 3 {
        return 0;
    }
    let hull = MultiPoint::from(pts).convex_hull();
    head.anchor_points()
        .filter_map(|a| radial_projection(head, &d, &basis, &a))
        .filter(|p| Euclidean.distance(p, &hull) <= radius)
        .count()
}

/// Strand anchors under the closed jaws of the rigid gripper pressed along
/// `direction`; none when it never reaches the hair.
pub fn rigid_enclosed_strands(
    gripper: &RigidGripperModel,
    head: &HeadModel,
    direction: &Vector3<f64>,
    depth: f64,
) -> usize {
    if depth <= 0.0 {
        return 0;
    }
    let d = direction.normalize();
    // Jaws close along the end-effector x axis, as the soft fingers do.
    let rot = approach_pose(head, &d, 0.0, 0.0).rotation;
    let basis = (rot * Vector3::x(), rot * Vector3::y());
    let (a, b) = (0.5 * gripper.jaw_separation, 0.5 * gripper.jaw_width);
    let rect = Rect::new((-a, -b), (a, b));
    head.anchor_points().filter_map(|p| radial_projection(head, &d, &basis, &p)).filter(|p| rect.intersects(p)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspRow {
    pub end_effector: String,
    pub depth_mm: f64,
    pub max_force_n: f64,
    pub strand_count: usize,
}

/// Press both grippers `depths` (meters past first contact) into the top of
/// the head and close them; reports the peak head force over the press and
/// the closure.
pub fn grasp_compare(
    ee: &EndEffector,
    gripper: &RigidGripperModel,
    head: &HeadModel,
    profile: &TaskProfile,
    depths: &[f64],
) -> Result<Vec<GraspRow>> {
    const STEPS: usize = 10;
    let dir = head.orientation * Vector3::z();
    let curl = profile.curl();
    let s0 = contact_standoff(ee, &curl, head, &dir, 0.0)?;
    let mut rows = Vec::with_capacity(2 * depths.len());
    for &depth in depths {
        rows.push(GraspRow {
            end_effector: "rigid".into(),
            depth_mm: depth * 1e3,
            max_force_n: rigid_press(gripper, head, depth),
            strand_count: rigid_enclosed_strands(gripper, head, &dir, depth),
        });
        let pose = approach_pose(head, &dir, s0 - depth, 0.0);
        let mut warm: Option<[FingerState; 2]> = None;
        let mut peak: f64 = 0.0;
        let mut step = |commands: [f64; 4], pose: &Isometry3<f64>| -> Result<[FingerState; 2]> {
            let eq = solve(ee, &commands, head, pose, warm.as_ref())?;
            peak = peak.max(head_wrench(&eq.contacts, head).force.norm());
            warm = Some(eq.fingers.clone());
            Ok(eq.fingers)
        };
        for k in 1..=STEPS {
            let d = depth * k as f64 / STEPS as f64;
            step(curl, &approach_pose(head, &dir, s0 - d, 0.0))?;
        }
        let mut fingers = None;
        for k in 1..=STEPS {
            fingers = Some(step(profile.commands_at(k as f64 / STEPS as f64), &pose)?);
        }
        let strands = match fingers {
            Some(f) if profile.closes() => enclosed_strands(head, &dir, &moe_points(ee, &f)?, ee.finger.radius),
            _ => 0,
        };
        rows.push(GraspRow {
            end_effector: "moe".into(),
            depth_mm: depth * 1e3,
            max_force_n: peak,
            strand_count: strands,
        });
    }
    Ok(rows)
}

pub fn write_grasp_csv<W: Write>(rows: &[GraspRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
