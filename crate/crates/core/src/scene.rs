//! Head and wig model, head-pose observation, and synthetic demonstrations.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, STREAM_ANCHORS, STREAM_DEMO, STREAM_POSE};

/// Head observation rate of the tracker, Hz.
pub const POSE_RATE_HZ: f64 = 12.5;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("unknown wig preset `{0}` (expected wig1, wig2 or wig3)")]
    UnknownWig(String),
    #[error("unknown demonstration style `{0}` (expected arc or zigzag)")]
    UnknownStyle(String),
    #[error("demonstration times must be strictly increasing (row {0})")]
    NonMonotoneTime(usize),
    #[error("invalid demonstration: {0}")]
    InvalidDemonstration(String),
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Spherical head with a compliant hair layer over a stiffer scalp.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub center: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub radius: f64,
    pub h_hair: f64,
    pub k_hair: f64,
    pub k_scalp: f64,
    /// Unit directions of strand roots in the head frame.
    pub anchor_dirs: Vec<Vector3<f64>>,
}

/// Scalar head parameters, as they appear in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadParams {
    pub center: [f64; 3],
    pub radius: f64,
    pub h_hair: f64,
    pub k_hair: f64,
    pub k_scalp: f64,
    pub n_anchors: usize,
    pub anchor_seed: u64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.0],
            radius: 0.09,
            h_hair: 0.02,
            k_hair: 50.0,
            k_scalp: 2000.0,
            n_anchors: 500,
            anchor_seed: 7,
        }
    }
}

impl HeadParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = self.center.iter().all(|c| c.is_finite())
            && self.radius > 0.0
            && self.h_hair >= 0.0
            && self.k_hair > 0.0
            && self.k_scalp > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidParams(
                "head needs a finite center, positive radius and stiffnesses, and non-negative h_hair".into(),
            ))
        }
    }
}

impl HeadModel {
    pub fn from_params(p: &HeadParams) -> Self {
        let mut rng = stream_rng(p.anchor_seed, STREAM_ANCHORS);
        let anchor_dirs = (0..p.n_anchors)
            .map(|_| loop {
                let v = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                let n: f64 = v.norm();
                if n > 1e-6 {
                    break v / n;
                }
            })
            .collect();
        Self {
            center: Vector3::from(p.center),
            orientation: UnitQuaternion::identity(),
            radius: p.radius,
            h_hair: p.h_hair,
            k_hair: p.k_hair,
            k_scalp: p.k_scalp,
            anchor_dirs,
        }
    }

    pub fn with_wig(mut self, wig: &WigPreset) -> Self {
        self.h_hair = wig.h_hair;
        self.k_hair = wig.k_hair;
        self
    }

    /// Radius of the hair outer surface.
    pub fn outer_radius(&self) -> f64 {
        self.radius + self.h_hair
    }

    /// Strand roots in the world frame.
    pub fn anchor_points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.anchor_dirs.iter().map(move |d| self.center + self.orientation * d * self.radius)
    }

    /// Same head moved to `pose`.
    pub fn posed(&self, pose: &HeadPose) -> Self {
        Self { center: pose.position, orientation: pose.orientation, ..self.clone() }
    }

    pub fn pose(&self) -> HeadPose {
        HeadPose { position: self.center, orientation: self.orientation }
    }
}

impl Default for HeadModel {
    fn default() -> Self {
        Self::from_params(&HeadParams::default())
    }
}

/// Signed distance from `point` to the hair outer surface (negative inside).
pub fn surface_gap(head: &HeadModel, point: &Vector3<f64>) -> f64 {
    (point - head.center).norm() - (head.radius + head.h_hair)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wig {
    Wig1,
    Wig2,
    Wig3,
}

impl Wig {
    pub const ALL: [Wig; 3] = [Wig::Wig1, Wig::Wig2, Wig::Wig3];

    pub fn name(self) -> &'static str {
        match self {
            Wig::Wig1 => "wig1",
            Wig::Wig2 => "wig2",
            Wig::Wig3 => "wig3",
        }
    }
}

impl fmt::Display for Wig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Wig {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wig1" => Ok(Wig::Wig1),
            "wig2" => Ok(Wig::Wig2),
            "wig3" => Ok(Wig::Wig3),
            other => Err(SceneError::UnknownWig(other.to_string())),
        }
    }
}

/// Hair-layer parameters standing in for one physical wig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WigPreset {
    pub h_hair: f64,
    pub k_hair: f64,
}

/// The three wig presets, keyed by name in the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WigPresets {
    pub wig1: WigPreset,
    pub wig2: WigPreset,
    pub wig3: WigPreset,
}

impl Default for WigPresets {
    fn default() -> Self {
        Self {
            wig1: WigPreset { h_hair: 0.020, k_hair: 50.0 },
            wig2: WigPreset { h_hair: 0.025, k_hair: 40.0 },
            wig3: WigPreset { h_hair: 0.015, k_hair: 65.0 },
        }
    }
}

impl WigPresets {
    pub fn get(&self, wig: Wig) -> &WigPreset {
        match wig {
            Wig::Wig1 => &self.wig1,
            Wig::Wig2 => &self.wig2,
            Wig::Wig3 => &self.wig3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseMode {
    Static,
    SinusoidalDrift,
    SeededRandomWalk,
}

/// Stand-in for the third-person camera and face-keypoint tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadPoseProvider {
    pub mode: PoseMode,
    /// Peak drift, meters.
    pub amplitude: f64,
    /// Drift period, seconds.
    pub period: f64,
    /// Keypoint observation noise (per axis), meters.
    pub noise_sigma: f64,
    /// Drift direction for the sinusoidal mode (normalized on use).
    pub drift_axis: [f64; 3],
    pub rate_hz: f64,
}

impl Default for HeadPoseProvider {
    fn default() -> Self {
        Self {
            mode: PoseMode::Static,
            amplitude: 0.0,
            period: 4.0,
            noise_sigma: 0.0,
            drift_axis: [0.0, 0.0, 1.0],
            rate_hz: POSE_RATE_HZ,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseObservation {
    pub observed: HeadPose,
    pub truth: HeadPose,
    /// Index of the tracker tick the observation comes from.
    pub tick: u64,
}

impl HeadPoseProvider {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = self.amplitude >= 0.0
            && self.period > 0.0
            && self.noise_sigma >= 0.0
            && self.rate_hz > 0.0
            && self.drift_axis.iter().all(|a| a.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidParams(
                "pose provider needs non-negative amplitude and noise, positive period and rate".into(),
            ))
        }
    }

    pub fn tick_at(&self, t: f64) -> u64 {
        // Small slack keeps exact multiples of the period on their own tick.
        (t * self.rate_hz + 1e-9).floor().max(0.0) as u64
    }

    fn axis(&self) -> Vector3<f64> {
        let a = Vector3::from(self.drift_axis);
        let n = a.norm();
        if n > 0.0 {
            a / n
        } else {
            Vector3::z()
        }
    }

    /// Head displacement from its rest pose at time `t`.
    pub fn true_offset(&self, t: f64, seed: u64) -> Vector3<f64> {
        match self.mode {
            PoseMode::Static => Vector3::zeros(),
            PoseMode::SinusoidalDrift => self.axis() * self.amplitude * (std::f64::consts::TAU * t / self.period).sin(),
            PoseMode::SeededRandomWalk => {
                // Walk advances once per tracker tick; linear in between.
                let pos = t * self.rate_hz;
                let k = pos.floor().max(0.0) as u64;
                let a = self.walk_at(k, seed);
                let b = self.walk_at(k + 1, seed);
                let frac = (pos - k as f64).clamp(0.0, 1.0);
                a + (b - a) * frac
            }
        }
    }

    fn walk_at(&self, tick: u64, seed: u64) -> Vector3<f64> {
        let mut rng = stream_rng(seed, STREAM_POSE ^ 0x5741_4c4b);
        let step =
            if self.amplitude > 0.0 { self.amplitude / (self.rate_hz * self.period).max(1.0).sqrt() } else { 0.0 };
        let mut p = Vector3::zeros();
        for _ in 0..tick {
            for i in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                p[i] += step * z;
                // Reflect back into the amplitude box.
                if p[i] > self.amplitude {
                    p[i] = 2.0 * self.amplitude - p[i];
                } else if p[i] < -self.amplitude {
                    p[i] = -2.0 * self.amplitude - p[i];
                }
            }
        }
        p
    }

    fn noise_at(&self, tick: u64, seed: u64) -> Vector3<f64> {
        if self.noise_sigma <= 0.0 {
            return Vector3::zeros();
        }
        let mut rng = stream_rng(seed ^ tick.wrapping_mul(0x9E37_79B9), STREAM_POSE);
        let n = Normal::new(0.0, self.noise_sigma).expect("sigma checked positive");
        Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng))
    }
}

/// Noisy tracker output at time `t` plus the true head pose.
///
/// Observations only change on tracker ticks; between ticks the latest
/// sample is held.
pub fn observed_head_pose(provider: &HeadPoseProvider, rest: &HeadPose, t: f64, seed: u64) -> PoseObservation {
    let t = t.max(0.0);
    let tick = provider.tick_at(t);
    let t_tick = tick as f64 / provider.rate_hz;
    let truth = HeadPose { position: rest.position + provider.true_offset(t, seed), orientation: rest.orientation };
    let observed = HeadPose {
        position: rest.position + provider.true_offset(t_tick, seed) + provider.noise_at(tick, seed),
        orientation: rest.orientation,
    };
    PoseObservation { observed, truth, tick }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoStyle {
    Arc,
    Zigzag,
}

impl FromStr for DemoStyle {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arc" => Ok(DemoStyle::Arc),
            "zigzag" => Ok(DemoStyle::Zigzag),
            other => Err(SceneError::UnknownStyle(other.to_string())),
        }
    }
}

/// Hand keypoint trajectory, head frame relative to the head center.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub samples: Vec<(f64, Vector3<f64>)>,
}

impl Demonstration {
    pub fn new(samples: Vec<(f64, Vector3<f64>)>) -> Result<Self, SceneError> {
        if samples.is_empty() {
            return Err(SceneError::InvalidDemonstration("no samples".into()));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(SceneError::NonMonotoneTime(i + 1));
            }
        }
        Ok(Self { samples })
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0.0,
        }
    }

    /// Linear interpolation, clamped at both ends.
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        let i = s.partition_point(|(ts, _)| *ts <= t);
        if i >= s.len() {
            return s[s.len() - 1].1;
        }
        let (t0, p0) = s[i - 1];
        let (t1, p1) = s[i];
        p0 + (p1 - p0) * ((t - t0) / (t1 - t0))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SceneError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x", "y", "z"])?;
        for (t, p) in &self.samples {
            wr.serialize((t, p.x, p.y, p.z))?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SceneError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for row in rd.deserialize() {
            let (t, x, y, z): (f64, f64, f64, f64) = row?;
            samples.push((t, Vector3::new(x, y, z)));
        }
        Self::new(samples)
    }
}

/// Shortest demonstration that covers the full stroke, seconds.
const FULL_STROKE_S: f64 = 4.0;

/// Synthetic hand demonstration over the top of the head, sampled at the
/// tracker rate. Points stay within `h_hair / 2` of the scalp sphere.
pub fn synth_demonstration(
    head: &HeadModel,
    style: DemoStyle,
    duration: f64,
    seed: u64,
) -> Result<Demonstration, SceneError> {
    if !(duration > 0.0) {
        return Err(SceneError::InvalidDemonstration(format!("duration must be positive, got {duration}")));
    }
    let mut rng = stream_rng(seed, STREAM_DEMO);
    let n = (duration * POSE_RATE_HZ).round().max(2.0) as usize;
    // Sweep from the forehead side (-x) to the crown and back of the head (+x).
    let polar_start: f64 = rng.random_range(-0.75..-0.55);
    let polar_end: f64 = rng.random_range(0.35..0.55);
    let azimuth: f64 = rng.random_range(-0.25..0.25);
    let zig_amp: f64 = rng.random_range(0.2..0.3);
    // Short demonstrations cover a proportionally shorter stroke about the
    // middle of the arc, so the hand speed stays bounded.
    let k = (duration / FULL_STROKE_S).min(1.0);
    let polar_mid = 0.5 * (polar_start + polar_end);
    let (polar_start, polar_end) = (polar_mid + k * (polar_start - polar_mid), polar_mid + k * (polar_end - polar_mid));
    let zig_amp = k * zig_amp;
    let zig_cycles: f64 = rng.random_range(2.0..3.0);
    let r_mid = head.radius + 0.25 * head.h_hair;
    let r_wobble = 0.1 * head.h_hair;
    let wobble_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / POSE_RATE_HZ;
            let s = i as f64 / (n - 1) as f64;
            // Smooth ease so the hand starts and stops gently.
            let e = 0.5 - 0.5 * (std::f64::consts::PI * s).cos();
            let polar = polar_start + (polar_end - polar_start) * e;
            let lateral = match style {
                DemoStyle::Arc => azimuth,
                DemoStyle::Zigzag => azimuth + zig_amp * (std::f64::consts::TAU * zig_cycles * s).sin(),
            };
            let r = r_mid + r_wobble * (std::f64::consts::TAU * s + wobble_phase).sin();
            // Tilt the +z pole by `polar` about y, then by `lateral` about x.
            let d = Vector3::new(polar.sin() * lateral.cos(), -lateral.sin(), polar.cos() * lateral.cos());
            (t, d.normalize() * r)
        })
        .collect();
    Demonstration::new(samples)
}
