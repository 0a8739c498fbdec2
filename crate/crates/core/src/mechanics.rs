//! Statics of the tendon-driven two-finger end-effector pressing on a head.
//!
//! Each finger is a pseudo-rigid-body chain: `n_links` rigid links joined by
//! joints with two orthogonal torsional springs (bending planes `a` and `b`).
//! One actuator per finger and plane pulls an antagonistic tendon pair
//! through an elastic series element. Contact with the head is a frictionless
//! normal penalty that is soft in the hair layer and stiff at the scalp.
//!
//! The static equilibrium is the minimizer of the total potential energy
//!
//! ```text
//! E(θ) = ½ k Σ θ²  +  Σ_tendons ½ k_s max(0, d − Δl(θ))²  +  Σ_samples Φ(δ(θ))
//! ```
//!
//! whose gradient is the joint torque residual (spring − tendon − contact).

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene::{surface_gap, HeadModel};

/// Largest joint angle magnitude the small-curvature model accepts.
pub const ANGLE_LIMIT: f64 = std::f64::consts::FRAC_PI_2 - 1e-6;
/// Newton iteration cap.
pub const MAX_ITERATIONS: usize = 200;
/// Step halvings allowed per Newton iteration.
pub const MAX_HALVINGS: usize = 20;
/// Residual bound every accepted equilibrium satisfies, N·m.
pub const RESIDUAL_BOUND: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MechanicsError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension { what: &'static str, got: usize, expected: usize },
    #[error("invalid finger model: {0}")]
    InvalidModel(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("equilibrium solve did not converge after {iterations} iterations (residual {residual:.3e} N·m)")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// Geometry and stiffness of one soft finger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerModel {
    pub n_links: usize,
    /// Total finger length, meters.
    pub length: f64,
    pub radius: f64,
    /// Per joint and bending plane, N·m/rad.
    pub joint_stiffness: f64,
    /// Tendon offset from the centerline, meters.
    pub moment_arm: f64,
    /// Actuator-to-finger elastic coupling, N/m.
    pub tendon_series_stiffness: f64,
    /// Displacement applied to both tendons of every pair before commands, meters.
    pub pretension: f64,
    /// Contact sample points per link (evenly spaced, link end included).
    pub samples_per_link: usize,
}

impl Default for FingerModel {
    fn default() -> Self {
        Self {
            n_links: 8,
            length: 0.105,
            radius: 0.0085,
            joint_stiffness: 0.05,
            moment_arm: 0.006,
            tendon_series_stiffness: 500.0,
            pretension: 0.0,
            samples_per_link: 2,
        }
    }
}

impl FingerModel {
    pub const N_TENDONS: usize = 4;

    pub fn link_length(&self) -> f64 {
        self.length / self.n_links as f64
    }

    pub fn dof(&self) -> usize {
        2 * self.n_links
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        let bad = |m: &str| Err(MechanicsError::InvalidModel(m.to_string()));
        if self.n_links < 1 {
            return bad("n_links must be at least 1");
        }
        if !(self.length > 0.0 && self.radius > 0.0) {
            return bad("length and radius must be positive");
        }
        if !(self.joint_stiffness > 0.0 && self.tendon_series_stiffness > 0.0) {
            return bad("stiffnesses must be positive");
        }
        if !(self.moment_arm > 0.0 && self.moment_arm < self.radius) {
            return bad("moment_arm must lie in (0, radius)");
        }
        if self.pretension < 0.0 || self.samples_per_link < 1 {
            return bad("pretension must be non-negative and samples_per_link at least 1");
        }
        Ok(())
    }
}

/// Two fingers mirrored about the end-effector's y-z plane.
///
/// End-effector frame: +z is the approach direction (fingers point along it),
/// fingers are mounted at `x = ±jaw_separation / 2`. Positive plane-`a`
/// commands open the fingers away from each other; negative ones close them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndEffector {
    pub finger: FingerModel,
    pub jaw_separation: f64,
}

impl Default for EndEffector {
    fn default() -> Self {
        Self { finger: FingerModel::default(), jaw_separation: 0.04 }
    }
}

impl EndEffector {
    pub const N_FINGERS: usize = 2;
    pub const N_ACTUATORS: usize = 4;

    /// Mount of finger `f` relative to the end-effector frame.
    pub fn mount(&self, f: usize) -> Isometry3<f64> {
        let half = 0.5 * self.jaw_separation;
        match f {
            0 => Isometry3::translation(half, 0.0, 0.0),
            _ => Isometry3::from_parts(
                Translation3::new(-half, 0.0, 0.0),
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI),
            ),
        }
    }

    pub fn finger_base(&self, ee_pose: &Isometry3<f64>, f: usize) -> Isometry3<f64> {
        ee_pose * self.mount(f)
    }

    pub fn rest_state(&self, ee_pose: &Isometry3<f64>) -> [FingerState; 2] {
        [0, 1].map(|f| FingerState::straight(&self.finger, self.finger_base(ee_pose, f)))
    }
}

/// Joint angles of one finger in both bending planes plus its mount pose.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerState {
    /// `[plane a, plane b]`, each of length `n_links`.
    pub joint_angles: [Vec<f64>; 2],
    pub base_pose: Isometry3<f64>,
}

impl FingerState {
    pub fn straight(model: &FingerModel, base_pose: Isometry3<f64>) -> Self {
        Self { joint_angles: [vec![0.0; model.n_links], vec![0.0; model.n_links]], base_pose }
    }

    fn check(&self, model: &FingerModel) -> Result<(), MechanicsError> {
        for plane in &self.joint_angles {
            if plane.len() != model.n_links {
                return Err(MechanicsError::Dimension {
                    what: "joint_angles",
                    got: plane.len(),
                    expected: model.n_links,
                });
            }
        }
        Ok(())
    }

    fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.joint_angles[0].len(),
            self.joint_angles[0].iter().chain(&self.joint_angles[1]).copied(),
        )
    }

    fn from_vector(x: &DVector<f64>, base_pose: Isometry3<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            joint_angles: [x.rows(0, n).iter().copied().collect(), x.rows(n, n).iter().copied().collect()],
            base_pose,
        }
    }
}

/// Tendon tensions (finger-major, then plane, then `+`/`-` side) and the
/// per-actuator displacement commands that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TendonState {
    pub tensions: [f64; 8],
    pub commanded_displacements: [f64; 4],
}

impl TendonState {
    pub fn index(finger: usize, plane: usize, side: usize) -> usize {
        finger * 4 + plane * 2 + side
    }

    /// Sum of both tendons driven by actuator `i` (`i = 2·finger + plane`).
    pub fn pair_sum(&self, actuator: usize) -> f64 {
        self.tensions[2 * actuator] + self.tensions[2 * actuator + 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactPoint {
    pub position: Vector3<f64>,
    /// Unit normal pointing into the head.
    pub normal: Vector3<f64>,
    /// Penetration of the finger surface past the hair outer surface, meters.
    pub penetration: f64,
    /// Force applied on the head, newtons.
    pub force: Vector3<f64>,
    pub finger: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    /// About the head center.
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros() }
    }
}

/// Link frames of one finger, base to tip.
#[derive(Clone, Debug)]
pub struct FingerFrames {
    /// Frame of each link after its joint rotation (`n_links` entries).
    pub links: Vec<Isometry3<f64>>,
    pub tip: Vector3<f64>,
}

impl FingerFrames {
    /// Start and end point of each link segment.
    pub fn segments(&self, model: &FingerModel) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let l = model.link_length();
        self.links
            .iter()
            .map(|f| (f.translation.vector, f.transform_point(&nalgebra::Point3::new(0.0, 0.0, l)).coords))
            .collect()
    }
}

fn joint_rotation(a: f64, b: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), a) * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), b)
}

/// Chain link frames by successive joint rotations and link translations.
pub fn forward_kinematics(model: &FingerModel, state: &FingerState) -> Result<FingerFrames, MechanicsError> {
    state.check(model)?;
    let l = model.link_length();
    let mut frame = state.base_pose;
    let mut links = Vec::with_capacity(model.n_links);
    for j in 0..model.n_links {
        let rot = joint_rotation(state.joint_angles[0][j], state.joint_angles[1][j]);
        let link = Isometry3::from_parts(frame.translation, frame.rotation * rot);
        frame = link * Isometry3::translation(0.0, 0.0, l);
        links.push(link);
    }
    Ok(FingerFrames { links, tip: frame.translation.vector })
}

/// Tensions of the four tendons of one finger, `[a+, a-, b+, b-]`.
///
/// `commands` holds the plane-a and plane-b actuator displacements.
pub fn finger_tendon_tensions(model: &FingerModel, angles: &[Vec<f64>; 2], commands: [f64; 2]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for p in 0..2 {
        let shortening: f64 = model.moment_arm * angles[p].iter().sum::<f64>();
        let plus = model.pretension + commands[p] - shortening;
        let minus = model.pretension - commands[p] + shortening;
        out[2 * p] = model.tendon_series_stiffness * plus.max(0.0);
        out[2 * p + 1] = model.tendon_series_stiffness * minus.max(0.0);
    }
    out
}

fn check_commands(commands: &[f64]) -> Result<[f64; 4], MechanicsError> {
    let c: [f64; 4] = commands.try_into().map_err(|_| MechanicsError::Dimension {
        what: "commands",
        got: commands.len(),
        expected: 4,
    })?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(MechanicsError::NonFinite("commands"));
    }
    Ok(c)
}

/// Tendon tensions for both fingers under actuator displacement `commands`.
///
/// Each actuator shortens its `+` tendon and pays out its `-` tendon by the
/// command. Bending toward a side shortens that side's path by
/// `moment_arm · Σθ`; tension is the series stiffness times the remaining
/// stretch, and slack tendons carry exactly zero.
pub fn tendon_tensions(
    model: &FingerModel,
    fingers: &[FingerState; 2],
    commands: &[f64],
) -> Result<TendonState, MechanicsError> {
    let c = check_commands(commands)?;
    let mut tensions = [0.0; 8];
    for (f, st) in fingers.iter().enumerate() {
        st.check(model)?;
        let t = finger_tendon_tensions(model, &st.joint_angles, [c[2 * f], c[2 * f + 1]]);
        tensions[4 * f..4 * f + 4].copy_from_slice(&t);
    }
    Ok(TendonState { tensions, commanded_displacements: c })
}

/// Normal force magnitude for penetration `delta` into hair then scalp.
pub fn contact_force_magnitude(head: &HeadModel, delta: f64) -> f64 {
    if delta <= 0.0 {
        0.0
    } else if delta <= head.h_hair {
        head.k_hair * delta
    } else {
        head.k_hair * head.h_hair + head.k_scalp * (delta - head.h_hair)
    }
}

/// Potential whose derivative is [`contact_force_magnitude`].
fn contact_energy(head: &HeadModel, delta: f64) -> f64 {
    if delta <= 0.0 {
        0.0
    } else if delta <= head.h_hair {
        0.5 * head.k_hair * delta * delta
    } else {
        let e = delta - head.h_hair;
        0.5 * head.k_hair * head.h_hair * head.h_hair + head.k_hair * head.h_hair * e + 0.5 * head.k_scalp * e * e
    }
}

/// Contact sample points of one finger in world coordinates, with the index
/// of the link each belongs to.
fn sample_points(model: &FingerModel, frames: &FingerFrames) -> Vec<(usize, Vector3<f64>)> {
    let l = model.link_length();
    let s = model.samples_per_link;
    let mut out = Vec::with_capacity(model.n_links * s);
    for (j, f) in frames.links.iter().enumerate() {
        for k in 1..=s {
            let z = l * k as f64 / s as f64;
            out.push((j, f.transform_point(&nalgebra::Point3::new(0.0, 0.0, z)).coords));
        }
    }
    out
}

/// World positions of every contact sample point of `state`.
pub fn finger_points(model: &FingerModel, state: &FingerState) -> Result<Vec<Vector3<f64>>, MechanicsError> {
    let frames = forward_kinematics(model, state)?;
    Ok(sample_points(model, &frames).into_iter().map(|(_, p)| p).collect())
}

/// Penetration of a finger sample sphere; grazing (`δ = 0`) is no contact.
fn penetration(model: &FingerModel, head: &HeadModel, p: &Vector3<f64>) -> f64 {
    model.radius - surface_gap(head, p)
}

fn contact_at(model: &FingerModel, head: &HeadModel, p: &Vector3<f64>, finger: usize) -> Option<ContactPoint> {
    let delta = penetration(model, head, p);
    if delta <= 0.0 {
        return None;
    }
    let outward = p - head.center;
    let n = outward.norm();
    if n == 0.0 {
        return None;
    }
    let normal = -outward / n;
    let f = contact_force_magnitude(head, delta);
    Some(ContactPoint { position: *p, normal, penetration: delta, force: normal * f, finger })
}

/// Penalty contacts between one finger's sample points and the head.
pub fn contact_forces(
    model: &FingerModel,
    state: &FingerState,
    head: &HeadModel,
) -> Result<Vec<ContactPoint>, MechanicsError> {
    let frames = forward_kinematics(model, state)?;
    Ok(sample_points(model, &frames).iter().filter_map(|(_, p)| contact_at(model, head, p, 0)).collect())
}

/// Net wrench the contacts exert on the head, torque about its center.
pub fn head_wrench(contacts: &[ContactPoint], head: &HeadModel) -> Wrench {
    contacts.iter().fold(Wrench::zero(), |acc, c| Wrench {
        force: acc.force + c.force,
        torque: acc.torque + (c.position - head.center).cross(&c.force),
    })
}

/// Energy and torque residual of one finger at `x` (`[a..., b...]`).
struct FingerProblem<'a> {
    model: &'a FingerModel,
    head: Option<&'a HeadModel>,
    base: Isometry3<f64>,
    commands: [f64; 2],
}

impl FingerProblem<'_> {
    fn state(&self, x: &DVector<f64>) -> FingerState {
        FingerState::from_vector(x, self.base)
    }

    fn energy(&self, x: &DVector<f64>) -> f64 {
        let m = self.model;
        let st = self.state(x);
        let mut e = 0.5 * m.joint_stiffness * x.norm_squared();
        let t = finger_tendon_tensions(m, &st.joint_angles, self.commands);
        e += t.iter().map(|ti| 0.5 * ti * ti / m.tendon_series_stiffness).sum::<f64>();
        if let Some(head) = self.head {
            let frames = forward_kinematics(m, &st).expect("dimensions fixed by construction");
            for (_, p) in sample_points(m, &frames) {
                e += contact_energy(head, penetration(m, head, &p));
            }
        }
        e
    }

    /// Joint torque residual: spring − tendon − contact.
    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.model;
        let n = m.n_links;
        let st = self.state(x);
        let mut r = x * m.joint_stiffness;
        let t = finger_tendon_tensions(m, &st.joint_angles, self.commands);
        for p in 0..2 {
            let tau = m.moment_arm * (t[2 * p] - t[2 * p + 1]);
            for j in 0..n {
                r[p * n + j] -= tau;
            }
        }
        if let Some(head) = self.head {
            let frames = forward_kinematics(m, &st).expect("dimensions fixed by construction");
            let axes = joint_axes(&frames, &st);
            for (link, p) in sample_points(m, &frames) {
                if let Some(c) = contact_at(m, head, &p, 0) {
                    // Force on the finger is the reaction of the force on the head.
                    let on_finger = -c.force;
                    for j in 0..=link {
                        let origin = frames.links[j].translation.vector;
                        let lever = p - origin;
                        r[j] -= axes[j].0.cross(&lever).dot(&on_finger);
                        r[n + j] -= axes[j].1.cross(&lever).dot(&on_finger);
                    }
                }
            }
        }
        r
    }
}

/// World axes of the plane-a and plane-b rotations at each joint.
fn joint_axes(frames: &FingerFrames, st: &FingerState) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    frames
        .links
        .iter()
        .enumerate()
        .map(|(j, link)| {
            // link.rotation = parent * Ry(a) * Rx(b); the b axis is the link x
            // axis, the a axis is parent y = (link * Rx(-b)) y.
            let b_axis = link.rotation * Vector3::x();
            let pre_b = link.rotation * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -st.joint_angles[1][j]);
            (pre_b * Vector3::y(), b_axis)
        })
        .collect()
}

/// Result of one finger solve.
#[derive(Clone, Debug)]
pub struct FingerSolution {
    pub state: FingerState,
    pub residual: f64,
    pub iterations: usize,
}

fn clamp_angles(x: &mut DVector<f64>) {
    x.iter_mut().for_each(|v| *v = v.clamp(-ANGLE_LIMIT, ANGLE_LIMIT));
}

/// Damped Newton on the finger energy with backtracking line search.
pub fn solve_finger(
    model: &FingerModel,
    commands: [f64; 2],
    head: Option<&HeadModel>,
    base_pose: Isometry3<f64>,
    initial: Option<&FingerState>,
    tolerance: f64,
) -> Result<FingerSolution, MechanicsError> {
    model.validate()?;
    if commands.iter().any(|c| !c.is_finite()) {
        return Err(MechanicsError::NonFinite("commands"));
    }
    let problem = FingerProblem { model, head, base: base_pose, commands };
    let dof = model.dof();
    let mut x = match (initial, head) {
        (Some(s), _) => {
            s.check(model)?;
            s.to_vector()
        }
        // Contact solves start from the free-space shape.
        (None, Some(_)) => solve_finger(model, commands, None, base_pose, None, tolerance)?.state.to_vector(),
        (None, None) => DVector::zeros(dof),
    };
    clamp_angles(&mut x);
    let mut e = problem.energy(&x);
    let mut g = problem.residual(&x);
    let fd_step = 1e-7;
    for iter in 0..MAX_ITERATIONS {
        let res = g.amax();
        if res <= tolerance {
            return Ok(FingerSolution { state: problem.state(&x), residual: res, iterations: iter });
        }
        // Central-difference Hessian of the analytic residual.
        let mut h = DMatrix::zeros(dof, dof);
        for k in 0..dof {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += fd_step;
            xm[k] -= fd_step;
            let col = (problem.residual(&xp) - problem.residual(&xm)) / (2.0 * fd_step);
            h.set_column(k, &col);
        }
        let h = (&h + h.transpose()) * 0.5;
        let newton = newton_direction(&h, &g, model.joint_stiffness);
        let steepest = -&g / model.joint_stiffness;
        // Near convergence the energy change drops below rounding, so a step
        // that shrinks the residual without measurably raising the energy is
        // also taken.
        let flat = 1e-13 * e.abs().max(1e-12);
        let mut accepted = None;
        'search: for direction in [newton, steepest] {
            let slope = g.dot(&direction);
            let mut step = 1.0;
            for _ in 0..=MAX_HALVINGS {
                let mut xn = &x + &direction * step;
                clamp_angles(&mut xn);
                let en = problem.energy(&xn);
                if en <= e + 1e-4 * step * slope || en <= e + flat {
                    let gn = problem.residual(&xn);
                    if en < e + 1e-4 * step * slope || gn.amax() < res {
                        accepted = Some((xn, en, gn));
                        break 'search;
                    }
                }
                step *= 0.5;
            }
        }
        match accepted {
            Some((xn, en, gn)) => {
                x = xn;
                e = en;
                g = gn;
            }
            None => return Err(MechanicsError::NoConvergence { iterations: iter + 1, residual: res }),
        }
    }
    let res = g.amax();
    if res <= tolerance {
        return Ok(FingerSolution { state: problem.state(&x), residual: res, iterations: MAX_ITERATIONS });
    }
    Err(MechanicsError::NoConvergence { iterations: MAX_ITERATIONS, residual: res })
}

/// Newton direction on the Hessian with its spectrum reflected and floored,
/// so negative curvature (buckling) still yields a descent direction.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, scale: f64) -> DVector<f64> {
    let eig = h.clone().symmetric_eigen();
    let floor = 1e-4 * scale;
    let vtg = eig.eigenvectors.transpose() * g;
    let scaled =
        DVector::from_iterator(vtg.len(), vtg.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| -c / l.abs().max(floor)));
    let d = &eig.eigenvectors * scaled;
    if d.iter().all(|v| v.is_finite()) && g.dot(&d) < 0.0 {
        d
    } else {
        -g / scale
    }
}

/// Static configuration of both fingers pressed against the head.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub fingers: [FingerState; 2],
    pub contacts: Vec<ContactPoint>,
    pub tendons: TendonState,
    /// Torque residual infinity norm over both fingers, N·m.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9 }
    }
}

/// Equilibrium of both fingers for the end-effector at `ee_pose`.
///
/// `head = None` solves in free space. `initial` warm-starts the Newton
/// iteration; the result is a deterministic function of all inputs.
pub fn equilibrium_solve(
    ee: &EndEffector,
    commands: &[f64],
    head: Option<&HeadModel>,
    ee_pose: &Isometry3<f64>,
    initial: Option<&[FingerState; 2]>,
) -> Result<Equilibrium, MechanicsError> {
    equilibrium_solve_with(ee, commands, head, ee_pose, initial, SolverOptions::default())
}

pub fn equilibrium_solve_with(
    ee: &EndEffector,
    commands: &[f64],
    head: Option<&HeadModel>,
    ee_pose: &Isometry3<f64>,
    initial: Option<&[FingerState; 2]>,
    opts: SolverOptions,
) -> Result<Equilibrium, MechanicsError> {
    let c = check_commands(commands)?;
    let pose_finite = ee_pose.translation.vector.iter().all(|v| v.is_finite())
        && ee_pose.rotation.coords.iter().all(|v| v.is_finite());
    if !pose_finite {
        return Err(MechanicsError::NonFinite("end-effector pose"));
    }
    let mut residual: f64 = 0.0;
    let mut iterations = 0;
    let mut solved = Vec::with_capacity(2);
    for f in 0..2 {
        let base = ee.finger_base(ee_pose, f);
        let init = initial.map(|s| FingerState { joint_angles: s[f].joint_angles.clone(), base_pose: base });
        let sol = solve_finger(&ee.finger, [c[2 * f], c[2 * f + 1]], head, base, init.as_ref(), opts.tolerance)?;
        residual = residual.max(sol.residual);
        iterations += sol.iterations;
        solved.push(sol.state);
    }
    let fingers: [FingerState; 2] = solved.try_into().expect("two fingers");
    let mut contacts = Vec::new();
    if let Some(head) = head {
        for (f, st) in fingers.iter().enumerate() {
            let mut cs = contact_forces(&ee.finger, st, head)?;
            cs.iter_mut().for_each(|c| c.finger = f);
            contacts.extend(cs);
        }
    }
    let tendons = tendon_tensions(&ee.finger, &fingers, &c)?;
    Ok(Equilibrium { fingers, contacts, tendons, residual, iterations })
}

/// Torque residual of a configuration, recomputed from scratch.
pub fn torque_residual(
    ee: &EndEffector,
    commands: &[f64],
    head: Option<&HeadModel>,
    fingers: &[FingerState; 2],
) -> Result<f64, MechanicsError> {
    let c = check_commands(commands)?;
    let mut worst: f64 = 0.0;
    for (f, st) in fingers.iter().enumerate() {
        st.check(&ee.finger)?;
        let problem = FingerProblem { model: &ee.finger, head, base: st.base_pose, commands: [c[2 * f], c[2 * f + 1]] };
        worst = worst.max(problem.residual(&st.to_vector()).amax());
    }
    Ok(worst)
}

/// Stiff parallel-jaw reference gripper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidGripperModel {
    pub finger_length: f64,
    /// N/m; at least 100x the scalp stiffness.
    pub contact_stiffness: f64,
    pub jaw_separation: f64,
    /// Jaw face width across the closing direction, meters.
    pub jaw_width: f64,
}

impl Default for RigidGripperModel {
    fn default() -> Self {
        Self { finger_length: 0.06, contact_stiffness: 2.0e5, jaw_separation: 0.04, jaw_width: 0.02 }
    }
}

/// Force of the stiff jaw spring in series with the hair/scalp law after
/// pressing `depth` past first hair contact.
fn series_force(k_jaw: f64, head: &HeadModel, depth: f64) -> f64 {
    if depth <= 0.0 {
        return 0.0;
    }
    // Series spring: F = k_jaw (depth - x) = F_hair(x); solve for x piecewise.
    let x_hair = k_jaw * depth / (k_jaw + head.k_hair);
    if x_hair <= head.h_hair {
        return head.k_hair * x_hair;
    }
    let f_knee = head.k_hair * head.h_hair;
    let x = (k_jaw * depth - f_knee + head.k_scalp * head.h_hair) / (k_jaw + head.k_scalp);
    contact_force_magnitude(head, x)
}

/// Peak head force while the rigid gripper presses to `commanded_depth`.
pub fn rigid_press(gripper: &RigidGripperModel, head: &HeadModel, commanded_depth: f64) -> f64 {
    // The series law is monotone, so the peak over the press is its endpoint.
    series_force(gripper.contact_stiffness, head, commanded_depth.max(0.0))
}

/// End-effector pose approaching the head along `-direction` (a unit vector
/// from the head center), with its fingertip reference `standoff` meters
/// outside the hair surface point on that ray.
pub fn approach_pose(head: &HeadModel, direction: &Vector3<f64>, standoff: f64, roll: f64) -> Isometry3<f64> {
    let d = direction.normalize();
    let surface = head.center + d * head.outer_radius();
    let z = -d;
    let rot = UnitQuaternion::rotation_between(&Vector3::z(), &z)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    let rot = rot * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll);
    Isometry3::from_parts(Translation3::from(surface - z * standoff), rot)
}

/// Distance the end-effector can move from `pose` along the unit world
/// vector `travel` before its unloaded fingers touch the hair; negative when
/// they already overlap it.
pub fn contact_travel(
    ee: &EndEffector,
    commands: &[f64],
    head: &HeadModel,
    pose: &Isometry3<f64>,
    travel: &Vector3<f64>,
) -> Result<f64, MechanicsError> {
    let free = equilibrium_solve(ee, commands, None, pose, None)?;
    let points: Vec<Vector3<f64>> = free
        .fingers
        .iter()
        .flat_map(|st| {
            let frames = forward_kinematics(&ee.finger, st).expect("solved state");
            sample_points(&ee.finger, &frames).into_iter().map(|(_, p)| p)
        })
        .collect();
    // The free shape moves rigidly with the end-effector; bisect on the gap.
    let min_gap = |t: f64| -> f64 {
        let shift = travel * t;
        points.iter().map(|p| -penetration(&ee.finger, head, &(p + shift))).fold(f64::INFINITY, f64::min)
    };
    let (mut lo, mut hi) = (-0.5, 0.5);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if min_gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Standoff at which the unloaded fingers first touch the hair when the
/// end-effector approaches along `direction`.
pub fn contact_standoff(
    ee: &EndEffector,
    commands: &[f64],
    head: &HeadModel,
    direction: &Vector3<f64>,
    roll: f64,
) -> Result<f64, MechanicsError> {
    let pose = approach_pose(head, direction, 0.0, roll);
    Ok(-contact_travel(ee, commands, head, &pose, &-direction.normalize())?)
}

/// Press the soft end-effector `depth` meters past first hair contact along
/// `direction`, ramping in `steps` increments; returns the peak head force
/// magnitude and the final equilibrium.
pub fn soft_press(
    ee: &EndEffector,
    commands: &[f64],
    head: &HeadModel,
    direction: &Vector3<f64>,
    depth: f64,
    steps: usize,
) -> Result<(f64, Equilibrium), MechanicsError> {
    let s0 = contact_standoff(ee, commands, head, direction, 0.0)?;
    let steps = steps.max(1);
    let mut peak: f64 = 0.0;
    let mut warm: Option<[FingerState; 2]> = None;
    let mut last = None;
    for k in 1..=steps {
        let d = depth * k as f64 / steps as f64;
        let pose = approach_pose(head, direction, s0 - d, 0.0);
        let eq = equilibrium_solve(ee, commands, Some(head), &pose, warm.as_ref())?;
        peak = peak.max(head_wrench(&eq.contacts, head).force.norm());
        warm = Some(eq.fingers.clone());
        last = Some(eq);
    }
    Ok((peak, last.expect("at least one step")))
}
