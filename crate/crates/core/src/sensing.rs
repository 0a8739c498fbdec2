//! Wrist depth camera, finger segmentation, masking, and actuator load.

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mechanics::{forward_kinematics, FingerModel, FingerState, TendonState};
use crate::rng::{stream_rng, STREAM_DEPTH, STREAM_LOAD, STREAM_MASK};
use crate::scene::HeadModel;

pub const MIN_RANGE_MM: u16 = 70;
pub const MAX_RANGE_MM: u16 = 500;
pub const FRAME_MAGIC: &[u8; 4] = b"MOED";
pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum SensingError {
    #[error("dimension mismatch: frame {frame:?} vs mask {mask:?}")]
    Dimension { frame: (usize, usize), mask: (usize, usize) },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("bad depth frame magic")]
    BadMagic,
    #[error("truncated depth frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("depth frame checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
}

/// Pinhole depth camera on the wrist, looking along the end-effector +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera origin in the end-effector frame, meters.
    pub mount_position: [f64; 3],
    /// Per-pixel Gaussian depth noise before quantization, millimeters.
    pub depth_noise_mm: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 48.0,
            fy: 48.0,
            cx: 31.5,
            cy: 31.5,
            width: 64,
            height: 64,
            mount_position: [0.0, 0.025, -0.075],
            depth_noise_mm: 0.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SensingError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SensingError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 || self.width > 224 || self.height > 224 {
            return Err(SensingError::InvalidCamera("resolution must be within 1..=224".into()));
        }
        let inside = |c: f64, n: usize| c >= 0.0 && c <= (n - 1) as f64;
        if !(inside(self.cx, self.width) && inside(self.cy, self.height)) {
            return Err(SensingError::InvalidCamera("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn mount(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(Vector3::from(self.mount_position)), UnitQuaternion::identity())
    }

    pub fn world_pose(&self, ee_pose: &Isometry3<f64>) -> Isometry3<f64> {
        ee_pose * self.mount()
    }

    /// Camera-frame ray through pixel `(u, v)`, with unit z component.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new((u as f64 - self.cx) / self.fx, (v as f64 - self.cy) / self.fy, 1.0)
    }
}

/// Depth image, millimeters, row-major; 0 marks no valid return.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<u16>,
}

impl DepthFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![0; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.depth[v * self.width + u]
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + 2 * self.depth.len()
    }

    /// `MOED` header (magic, u16 width, u16 height, u32 reserved, u32 CRC-32
    /// of payload) followed by the little-endian u16 payload.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let mut payload = Vec::with_capacity(2 * self.depth.len());
        for d in &self.depth {
            payload.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Decode one frame from the front of `bytes`; returns it and the bytes used.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), SensingError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(SensingError::Truncated { need: FRAME_HEADER_LEN, have: bytes.len() });
        }
        if &bytes[0..4] != FRAME_MAGIC {
            return Err(SensingError::BadMagic);
        }
        let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let stored = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
        let need = FRAME_HEADER_LEN + 2 * width * height;
        if bytes.len() < need {
            return Err(SensingError::Truncated { need, have: bytes.len() });
        }
        let payload = &bytes[FRAME_HEADER_LEN..need];
        let computed = crc32fast::hash(payload);
        if computed != stored {
            return Err(SensingError::Checksum { stored, computed });
        }
        let depth = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok((Self { width, height, depth }, need))
    }
}

/// Binary finger segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, bits: vec![value; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Depth frame with everything outside the finger mask zeroed.
///
/// Only [`apply_mask`] (and trusted dataset decoding) construct this, so
/// estimator inputs can never be raw depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedFrame(DepthFrame);

impl MaskedFrame {
    pub fn frame(&self) -> &DepthFrame {
        &self.0
    }

    pub fn into_inner(self) -> DepthFrame {
        self.0
    }

    /// Wrap a frame read back from storage where it was written masked.
    pub(crate) fn from_stored(frame: DepthFrame) -> Self {
        Self(frame)
    }
}

/// `I_D'(x, y) = I_D(x, y) · M(x, y)`.
pub fn apply_mask(frame: &DepthFrame, mask: &Mask) -> Result<MaskedFrame, SensingError> {
    if frame.width != mask.width || frame.height != mask.height || frame.depth.len() != mask.bits.len() {
        return Err(SensingError::Dimension { frame: (frame.width, frame.height), mask: (mask.width, mask.height) });
    }
    let depth = frame.depth.iter().zip(&mask.bits).map(|(d, m)| d * u16::from(*m)).collect();
    Ok(MaskedFrame(DepthFrame { width: frame.width, height: frame.height, depth }))
}

/// Nearest ray parameter at which a ray hits a capsule, if any.
///
/// `dir` must be unit length.
pub fn ray_capsule(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
) -> Option<f64> {
    let ba = b - a;
    let oa = origin - a;
    let baba = ba.dot(&ba);
    let bard = ba.dot(dir);
    let baoa = ba.dot(&oa);
    let rdoa = dir.dot(&oa);
    let oaoa = oa.dot(&oa);
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - radius * radius * baba;
    let mut best: Option<f64> = None;
    if qa.abs() > 1e-14 {
        let h = qb * qb - qa * qc;
        if h >= 0.0 {
            let t = (-qb - h.sqrt()) / qa;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba && t > 0.0 {
                best = Some(t);
            }
        }
    }
    // The capsule is the union of its body and two end spheres.
    for t in [ray_sphere(origin, dir, a, radius), ray_sphere(origin, dir, b, radius)].into_iter().flatten() {
        best = Some(best.map_or(t, |m| m.min(t)));
    }
    best
}

/// Nearest positive ray parameter hitting a sphere; `dir` unit length.
pub fn ray_sphere(origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(&oc) - radius * radius;
    let h = b * b - c;
    if h < 0.0 {
        return None;
    }
    let s = h.sqrt();
    let t0 = -b - s;
    if t0 > 0.0 {
        return Some(t0);
    }
    let t1 = -b + s;
    (t1 > 0.0).then_some(t1)
}

/// Capsule segments of a set of fingers in world coordinates.
pub fn finger_capsules(model: &FingerModel, fingers: &[FingerState]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    fingers
        .iter()
        .flat_map(|st| forward_kinematics(model, st).expect("finger state dimensions match model").segments(model))
        .collect()
}

/// What a ray hit first.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Hit {
    Nothing,
    Finger(f64),
    Head(f64),
}

struct SceneView<'a> {
    origin: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
    capsules: &'a [(Vector3<f64>, Vector3<f64>)],
    radius: f64,
    head: Option<(Vector3<f64>, f64)>,
}

impl SceneView<'_> {
    /// Nearest hit along camera-frame ray `ray_cam` (z component 1); the
    /// returned distance is the camera-frame z depth in meters.
    fn cast(&self, ray_cam: &Vector3<f64>) -> Hit {
        let len = ray_cam.norm();
        let dir = self.rotation * (ray_cam / len);
        let mut best = Hit::Nothing;
        let mut best_t = f64::INFINITY;
        for (a, b) in self.capsules {
            if let Some(t) = ray_capsule(&self.origin, &dir, a, b, self.radius) {
                if t < best_t {
                    best_t = t;
                    best = Hit::Finger(t / len);
                }
            }
        }
        if let Some((c, r)) = &self.head {
            if let Some(t) = ray_sphere(&self.origin, &dir, c, *r) {
                // Ties go to the finger.
                if t < best_t {
                    best = Hit::Head(t / len);
                }
            }
        }
        best
    }
}

fn quantize(depth_m: f64, noise_mm: f64) -> u16 {
    let mm = (depth_m * 1000.0 + noise_mm).round();
    if mm >= MIN_RANGE_MM as f64 && mm <= MAX_RANGE_MM as f64 {
        mm as u16
    } else {
        0
    }
}

/// Depth frame and finger mask rendered in one pass.
///
/// Rows are rendered in parallel; every pixel is an independent nearest-hit
/// query and noise is keyed by pixel index, so the result is bit-identical to
/// sequential rendering.
pub fn render(
    camera: &CameraModel,
    camera_pose: &Isometry3<f64>,
    model: &FingerModel,
    fingers: &[FingerState],
    head: Option<&HeadModel>,
    noise_seed: Option<u64>,
) -> (DepthFrame, Mask) {
    let capsules = finger_capsules(model, fingers);
    let view = SceneView {
        origin: camera_pose.translation.vector,
        rotation: camera_pose.rotation,
        capsules: &capsules,
        radius: model.radius,
        head: head.map(|h| (h.center, h.outer_radius())),
    };
    let (w, h) = (camera.width, camera.height);
    let noise = match noise_seed {
        Some(seed) if camera.depth_noise_mm > 0.0 => {
            let mut rng = stream_rng(seed, STREAM_DEPTH);
            let n = Normal::new(0.0, camera.depth_noise_mm).expect("positive sigma");
            (0..w * h).map(|_| n.sample(&mut rng)).collect()
        }
        _ => vec![0.0; w * h],
    };
    let rows: Vec<(Vec<u16>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut d = Vec::with_capacity(w);
            let mut m = Vec::with_capacity(w);
            for u in 0..w {
                match view.cast(&camera.pixel_ray(u, v)) {
                    Hit::Nothing => {
                        d.push(0);
                        m.push(false);
                    }
                    Hit::Finger(z) => {
                        d.push(quantize(z, noise[v * w + u]));
                        m.push(true);
                    }
                    Hit::Head(z) => {
                        d.push(quantize(z, noise[v * w + u]));
                        m.push(false);
                    }
                }
            }
            (d, m)
        })
        .collect();
    let mut depth = Vec::with_capacity(w * h);
    let mut bits = Vec::with_capacity(w * h);
    for (d, m) in rows {
        depth.extend(d);
        bits.extend(m);
    }
    (DepthFrame { width: w, height: h, depth }, Mask { width: w, height: h, bits })
}

pub fn render_depth(
    camera: &CameraModel,
    camera_pose: &Isometry3<f64>,
    model: &FingerModel,
    fingers: &[FingerState],
    head: Option<&HeadModel>,
) -> DepthFrame {
    render(camera, camera_pose, model, fingers, head, None).0
}

/// Exact geometric segmentation: a bit is set iff the pixel's nearest hit is
/// a finger capsule.
pub fn finger_mask(
    camera: &CameraModel,
    camera_pose: &Isometry3<f64>,
    model: &FingerModel,
    fingers: &[FingerState],
    head: Option<&HeadModel>,
) -> Mask {
    render(camera, camera_pose, model, fingers, head, None).1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Dilate,
    Erode,
    Flip,
}

fn morph(mask: &Mask, radius: usize, dilate: bool) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let r = radius as isize;
    let mut out = Mask::filled(w, h, false);
    for v in 0..h as isize {
        for u in 0..w as isize {
            let mut acc = !dilate;
            'win: for dv in -r..=r {
                for du in -r..=r {
                    let (x, y) = (u + du, v + dv);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let b = mask.bits[y as usize * w + x as usize];
                    if dilate && b {
                        acc = true;
                        break 'win;
                    }
                    if !dilate && !b {
                        acc = false;
                        break 'win;
                    }
                }
            }
            out.bits[v as usize * w + u as usize] = acc;
        }
    }
    out
}

/// Segmentation error model: square dilation/erosion by `magnitude` pixels,
/// or toggling `magnitude` (a fraction) of all bits chosen by `seed`.
pub fn corrupt_mask(mask: &Mask, mode: Corruption, magnitude: f64, seed: u64) -> Mask {
    let magnitude = magnitude.max(0.0);
    match mode {
        Corruption::Dilate => morph(mask, magnitude.round() as usize, true),
        Corruption::Erode => morph(mask, magnitude.round() as usize, false),
        Corruption::Flip => {
            let n = mask.bits.len();
            let k = ((magnitude.min(1.0)) * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream_rng(seed, STREAM_MASK));
            let mut out = mask.clone();
            for &i in &idx[..k] {
                out.bits[i] = !out.bits[i];
            }
            out
        }
    }
}

/// Servo current model `T = k_S q` with a backlash deadband.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurrentModel {
    /// Newtons per current unit.
    pub k_s: f64,
    /// Newtons.
    pub deadband: f64,
    /// Current units.
    pub noise_sigma: f64,
}

impl Default for CurrentModel {
    fn default() -> Self {
        Self { k_s: 2.0, deadband: 0.05, noise_sigma: 0.0 }
    }
}

/// Per-actuator current load observation `q ∈ R⁴`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActuatorLoad(pub [f64; 4]);

/// Current load of each actuator from the tension of its tendon pair.
pub fn actuator_load(tendons: &TendonState, model: &CurrentModel, seed: u64) -> ActuatorLoad {
    let mut rng = stream_rng(seed, STREAM_LOAD);
    let noise = (model.noise_sigma > 0.0).then(|| Normal::new(0.0, model.noise_sigma).expect("positive sigma"));
    let mut q = [0.0; 4];
    for (i, qi) in q.iter_mut().enumerate() {
        let net = (tendons.pair_sum(i) - model.deadband).max(0.0);
        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        *qi = (net / model.k_s + n).max(0.0);
    }
    ActuatorLoad(q)
}

/// Point in camera pixel coordinates, if in front of the camera.
pub fn project(camera: &CameraModel, camera_pose: &Isometry3<f64>, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let local = camera_pose.inverse_transform_point(&Point3::from(*p));
    (local.z > 0.0)
        .then(|| (camera.cx + camera.fx * local.x / local.z, camera.cy + camera.fy * local.y / local.z, local.z))
}
