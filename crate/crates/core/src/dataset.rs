//! Self-labeled sample collection and the binary dataset format.
//!
//! An episode fixes an approach pose and tendon commands, then presses the
//! end-effector toward the head over a few steps, warm-starting each solve
//! from the previous one. Every step yields a masked depth frame, the
//! actuator load and the head force expressed in the end-effector frame.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::ForceVector;
use crate::mechanics::{
    approach_pose, contact_travel, equilibrium_solve, head_wrench, EndEffector, FingerState, MechanicsError,
};
use crate::rng::{derive_seed, stream_rng, STREAM_EPISODE, STREAM_MASK, STREAM_SPLIT};
use crate::scene::HeadModel;
use crate::sensing::{
    actuator_load, apply_mask, corrupt_mask, render, ActuatorLoad, CameraModel, Corruption, CurrentModel, DepthFrame,
    MaskedFrame, SensingError,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("dataset truncated")]
    Truncated,
    #[error("sample {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: SensingError,
    },
    #[error("sample {index} frame is {got_w}x{got_h}, header says {want_w}x{want_h}")]
    FrameSize { index: usize, want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("{failed} of {total} episodes failed to solve; sampler ranges are unusable")]
    TooManyFailures { failed: usize, total: usize },
    #[error("coverage guard failed: {contact:.1}% in contact (need 30%), {free:.1}% free (need 10%)")]
    Coverage { contact: f64, free: f64 },
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 episodes to split, found {0}")]
    TooFewEpisodes(usize),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub episode: u32,
    pub step: u32,
    pub q: ActuatorLoad,
    /// Head force in the end-effector frame, newtons.
    pub w: ForceVector,
    pub frame: MaskedFrame,
}

/// Samples whose force magnitude exceeds this count as in contact.
pub const CONTACT_THRESHOLD: f64 = 0.05;

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

impl TryFrom<[f64; 2]> for Range {
    type Error = String;
    fn try_from(v: [f64; 2]) -> std::result::Result<Self, String> {
        if v[0].is_finite() && v[1].is_finite() && v[0] <= v[1] {
            Ok(Self::new(v[0], v[1]))
        } else {
            Err(format!("range [{}, {}] is empty or non-finite", v[0], v[1]))
        }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskCorruption {
    pub mode: Corruption,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_episodes: usize,
    pub steps_per_episode: usize,
    /// Angle between the approach ray and the head's +z axis, radians.
    pub polar: Range,
    /// Azimuth of the approach ray about the head's +z axis, radians.
    pub azimuth: Range,
    /// Rotation about the approach axis, radians.
    pub roll: Range,
    /// Wrist tilt away from the radial approach about the end-effector x and
    /// y axes, radians.
    pub tilt: Range,
    /// Lateral offset of the end-effector in its own x and y, meters.
    pub lateral: Range,
    /// Press depth past first hair contact at the first and last step of an
    /// episode, meters; negative values stop short of the hair.
    pub depth_start: Range,
    pub depth_end: Range,
    /// Tendon commands per finger: bending plane a, then plane b, meters.
    pub command_a: Range,
    pub command_b: Range,
    pub depth_noise_mm: f64,
    /// Steps that would push harder than this many newtons are backed off
    /// to the deepest depth within the limit.
    pub force_limit: f64,
    pub mask_corruption: Option<MaskCorruption>,
    /// Fail collection unless enough samples are in contact and free.
    pub enforce_coverage: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_episodes: 400,
            steps_per_episode: 5,
            polar: Range::new(0.0, 0.6),
            azimuth: Range::new(-std::f64::consts::PI, std::f64::consts::PI),
            roll: Range::new(-0.5, 0.5),
            tilt: Range::new(-0.25, 0.25),
            lateral: Range::new(-0.015, 0.015),
            depth_start: Range::new(-0.03, 0.03),
            depth_end: Range::new(0.03, 0.085),
            command_a: Range::new(-0.012, -0.004),
            command_b: Range::new(-0.002, 0.002),
            depth_noise_mm: 1.0,
            force_limit: 3.0,
            mask_corruption: None,
            enforce_coverage: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Near-radial presses around the control setpoint with the curl
    /// commands the skills use; data for estimators that close a force loop.
    pub fn task_regime() -> Self {
        Self {
            tilt: Range::new(-0.05, 0.05),
            lateral: Range::new(-0.005, 0.005),
            depth_start: Range::new(0.03, 0.06),
            depth_end: Range::new(0.06, 0.09),
            command_a: Range::new(-0.012, -0.008),
            command_b: Range::new(0.0, 0.0),
            enforce_coverage: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.into()));
        if self.steps_per_episode == 0 {
            return bad("steps_per_episode must be at least 1");
        }
        if self.n_episodes > u32::MAX as usize || self.steps_per_episode > u32::MAX as usize {
            return bad("episode counts must fit in 32 bits");
        }
        if !(self.depth_noise_mm >= 0.0 && self.depth_noise_mm.is_finite()) {
            return bad("depth_noise_mm must be non-negative");
        }
        if !(self.force_limit > 0.0) {
            return bad("force_limit must be positive");
        }
        Ok(())
    }
}

/// Everything an episode needs besides its id.
#[derive(Clone, Debug)]
pub struct CollectContext<'a> {
    pub sampler: &'a SamplerConfig,
    pub ee: &'a EndEffector,
    pub head: &'a HeadModel,
    pub camera: &'a CameraModel,
    pub current: &'a CurrentModel,
}

/// Randomized quantities of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub start_pose: Isometry3<f64>,
    pub commands: [f64; 4],
    pub depths: Vec<f64>,
    pub seed: u64,
}

pub fn episode_seed(global: u64, episode: u32) -> u64 {
    derive_seed(derive_seed(global, STREAM_EPISODE), episode as u64)
}

pub fn plan_episode(sampler: &SamplerConfig, head: &HeadModel, episode: u32) -> EpisodePlan {
    let seed = episode_seed(sampler.seed, episode);
    let mut rng = stream_rng(seed, 0);
    let polar = sampler.polar.sample(&mut rng);
    let azimuth = sampler.azimuth.sample(&mut rng);
    let dir = Vector3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), polar.cos());
    let roll = sampler.roll.sample(&mut rng);
    let tilt = UnitQuaternion::from_euler_angles(sampler.tilt.sample(&mut rng), sampler.tilt.sample(&mut rng), 0.0);
    let lateral = Vector3::new(sampler.lateral.sample(&mut rng), sampler.lateral.sample(&mut rng), 0.0);
    let start_pose = approach_pose(head, &dir, 0.0, roll) * Translation3::from(lateral) * tilt;
    let commands = [
        sampler.command_a.sample(&mut rng),
        sampler.command_b.sample(&mut rng),
        sampler.command_a.sample(&mut rng),
        sampler.command_b.sample(&mut rng),
    ];
    let d0 = sampler.depth_start.sample(&mut rng);
    let d1 = sampler.depth_end.sample(&mut rng);
    let n = sampler.steps_per_episode;
    let depths = (0..n).map(|k| if n == 1 { d0 } else { d0 + (d1 - d0) * k as f64 / (n - 1) as f64 }).collect();
    EpisodePlan { start_pose, commands, depths, seed }
}

/// Head force of a solved equilibrium, in the end-effector frame.
pub fn ee_force(
    head: &HeadModel,
    ee_pose: &Isometry3<f64>,
    contacts: &[crate::mechanics::ContactPoint],
) -> ForceVector {
    let f = ee_pose.rotation.inverse() * head_wrench(contacts, head).force;
    ForceVector([f.x, f.y, f.z])
}

/// Masked observation of a solved scene.
pub fn observe(
    ctx: &CollectContext<'_>,
    ee_pose: &Isometry3<f64>,
    fingers: &[FingerState],
    seed: u64,
) -> Result<MaskedFrame> {
    let camera = CameraModel { depth_noise_mm: ctx.sampler.depth_noise_mm, ..ctx.camera.clone() };
    let (frame, mask) =
        render(&camera, &camera.world_pose(ee_pose), &ctx.ee.finger, fingers, Some(ctx.head), Some(seed));
    let mask = match ctx.sampler.mask_corruption {
        Some(c) => corrupt_mask(&mask, c.mode, c.magnitude, derive_seed(seed, STREAM_MASK)),
        None => mask,
    };
    Ok(apply_mask(&frame, &mask)?)
}

/// Run one episode from scratch. Replaying an episode reproduces its
/// samples exactly.
pub fn run_episode(ctx: &CollectContext<'_>, episode: u32) -> std::result::Result<Vec<Sample>, EpisodeError> {
    let plan = plan_episode(ctx.sampler, ctx.head, episode);
    let travel = plan.start_pose.rotation * Vector3::z();
    let s0 = contact_travel(ctx.ee, &plan.commands, ctx.head, &plan.start_pose, &travel)?;
    let pose_at = |d: f64| Translation3::from(travel * (s0 + d)) * plan.start_pose;
    let solve = |d: f64, warm: Option<&[FingerState; 2]>| {
        let pose = pose_at(d);
        let eq = equilibrium_solve(ctx.ee, &plan.commands, Some(ctx.head), &pose, warm)?;
        let w = ee_force(ctx.head, &pose, &eq.contacts);
        Ok::<_, MechanicsError>((pose, eq, w))
    };
    let mut warm: Option<[FingerState; 2]> = None;
    let mut last_depth = 0.0f64;
    let mut out = Vec::with_capacity(plan.depths.len());
    for (step, &d) in plan.depths.iter().enumerate() {
        let (mut pose, mut eq, mut w) = solve(d, warm.as_ref())?;
        if w.norm() > ctx.sampler.force_limit {
            // Bisect on depth between the last accepted depth and this one.
            let (mut lo, mut hi) = (last_depth.min(d), d);
            let mut best = None;
            for _ in 0..10 {
                let mid = 0.5 * (lo + hi);
                let r = solve(mid, warm.as_ref())?;
                if r.2.norm() > ctx.sampler.force_limit {
                    hi = mid;
                } else {
                    lo = mid;
                    best = Some(r);
                }
            }
            (pose, eq, w) = match best {
                Some(r) => r,
                None => solve(lo, warm.as_ref())?,
            };
            last_depth = lo;
        } else {
            last_depth = d;
        }
        let step_seed = derive_seed(plan.seed, step as u64 + 1);
        let frame = observe(ctx, &pose, &eq.fingers, step_seed)?;
        out.push(Sample {
            episode,
            step: step as u32,
            q: actuator_load(&eq.tendons, ctx.current, step_seed),
            w,
            frame,
        });
        warm = Some(eq.fingers);
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl From<SensingError> for EpisodeError {
    fn from(e: SensingError) -> Self {
        EpisodeError::Dataset(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub width: usize,
    pub height: usize,
    pub wig: String,
    pub seed: u64,
    /// Episodes dropped because a solve failed.
    pub skipped: u32,
    pub samples: Vec<Sample>,
}

impl DatasetFile {
    pub fn empty(width: usize, height: usize, wig: &str, seed: u64) -> Self {
        Self { width, height, wig: wig.to_string(), seed, skipped: 0, samples: Vec::new() }
    }

    /// Fractions of samples in contact and in free space.
    pub fn coverage(&self) -> (f64, f64) {
        let n = self.samples.len().max(1) as f64;
        let contact = self.samples.iter().filter(|s| s.w.norm() > CONTACT_THRESHOLD).count() as f64;
        let free = self.samples.iter().filter(|s| s.w.norm() == 0.0).count() as f64;
        (contact / n, free / n)
    }

    pub fn episodes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.episode).collect();
        ids.dedup();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Samples whose episode is in `ids` (sorted).
    pub fn select(&self, ids: &[u32]) -> Vec<Sample> {
        self.samples.iter().filter(|s| ids.binary_search(&s.episode).is_ok()).cloned().collect()
    }
}

/// Collect a dataset; episodes run in parallel and are emitted in id order.
pub fn collect(ctx: &CollectContext<'_>, wig: &str) -> Result<DatasetFile> {
    ctx.sampler.validate()?;
    ctx.camera.validate()?;
    let results: Vec<_> =
        (0..ctx.sampler.n_episodes as u32).into_par_iter().map(|e| (e, run_episode(ctx, e))).collect();
    let mut samples = Vec::with_capacity(ctx.sampler.n_episodes * ctx.sampler.steps_per_episode);
    let mut skipped = 0u32;
    for (e, r) in results {
        match r {
            Ok(s) => samples.extend(s),
            Err(EpisodeError::Mechanics(err)) => {
                log::warn!("episode {e} skipped: {err}");
                skipped += 1;
            }
            Err(EpisodeError::Dataset(err)) => return Err(err),
        }
    }
    let total = ctx.sampler.n_episodes;
    if 2 * skipped as usize > total {
        return Err(DatasetError::TooManyFailures { failed: skipped as usize, total });
    }
    let file = DatasetFile {
        width: ctx.camera.width,
        height: ctx.camera.height,
        wig: wig.to_string(),
        seed: ctx.sampler.seed,
        skipped,
        samples,
    };
    let (contact, free) = file.coverage();
    log::info!(
        "collected {} samples ({skipped} episodes skipped), {:.1}% contact, {:.1}% free",
        file.samples.len(),
        100.0 * contact,
        100.0 * free
    );
    if ctx.sampler.enforce_coverage && (contact < 0.3 || free < 0.1) {
        return Err(DatasetError::Coverage { contact: 100.0 * contact, free: 100.0 * free });
    }
    Ok(file)
}

/// Episode-level train/test split.
pub fn split(file: &DatasetFile, test_fraction: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::BadFraction(test_fraction));
    }
    let mut ids = file.episodes();
    if ids.len() < 2 {
        return Err(DatasetError::TooFewEpisodes(ids.len()));
    }
    let n_test = ((test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    ids.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let mut test = ids.split_off(ids.len() - n_test);
    ids.sort_unstable();
    test.sort_unstable();
    Ok((ids, test))
}

const MAGIC: &[u8; 7] = b"MOEDSET";
const VERSION: u32 = 1;

impl DatasetFile {
    /// Binary layout (little-endian): magic, version u32, count u64, height
    /// u16, width u16, wig name (u16 length + UTF-8), seed u64, skipped
    /// episodes u32, samples, CRC-32 of everything before it. A sample is
    /// episode u32, step u32, q 4×f64, w 3×f64, then an encoded frame.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        b.extend_from_slice(&(self.height as u16).to_le_bytes());
        b.extend_from_slice(&(self.width as u16).to_le_bytes());
        b.extend_from_slice(&(self.wig.len() as u16).to_le_bytes());
        b.extend_from_slice(self.wig.as_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.skipped.to_le_bytes());
        for s in &self.samples {
            b.extend_from_slice(&s.episode.to_le_bytes());
            b.extend_from_slice(&s.step.to_le_bytes());
            for v in s.q.0.iter().chain(&s.w.0) {
                b.extend_from_slice(&v.to_le_bytes());
            }
            s.frame.frame().encode_into(&mut b);
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        if bytes.len() < 4 {
            return Err(DatasetError::Truncated);
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(DatasetError::Checksum { stored, computed });
        }
        let r = &mut Reader { bytes: &bytes[..body_end], pos: r.pos };
        let count = r.u64()?;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let name_len = r.u16()? as usize;
        let wig = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DatasetError::Header("wig name is not UTF-8".into()))?;
        let seed = r.u64()?;
        let skipped = r.u32()?;
        let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
        for index in 0..count as usize {
            let episode = r.u32()?;
            let step = r.u32()?;
            let q = ActuatorLoad([r.f64()?, r.f64()?, r.f64()?, r.f64()?]);
            let w = ForceVector([r.f64()?, r.f64()?, r.f64()?]);
            let (frame, used) =
                DepthFrame::decode(&r.bytes[r.pos..]).map_err(|source| DatasetError::Frame { index, source })?;
            r.pos += used;
            if frame.width != width || frame.height != height {
                return Err(DatasetError::FrameSize {
                    index,
                    want_w: width,
                    want_h: height,
                    got_w: frame.width,
                    got_h: frame.height,
                });
            }
            samples.push(Sample { episode, step, q, w, frame: MaskedFrame::from_stored(frame) });
        }
        if r.pos != r.bytes.len() {
            return Err(DatasetError::Header(format!(
                "{} trailing bytes after {count} samples",
                r.bytes.len() - r.pos
            )));
        }
        Ok(Self { width, height, wig, seed, skipped, samples })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(DatasetError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write(file: &DatasetFile, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&file.to_bytes())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<DatasetFile> {
    DatasetFile::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::Mask;

    fn tiny_file() -> DatasetFile {
        let frame = DepthFrame { width: 3, height: 2, depth: vec![0, 100, 200, 300, 0, 499] };
        let masked = apply_mask(&frame, &Mask::filled(3, 2, true)).unwrap();
        let samples = (0..10)
            .map(|i| Sample {
                episode: i / 2,
                step: i % 2,
                q: ActuatorLoad([0.1 * i as f64, 0.0, 0.2, 0.3]),
                w: ForceVector([0.0, -0.5, i as f64]),
                frame: masked.clone(),
            })
            .collect();
        DatasetFile { samples, skipped: 1, ..DatasetFile::empty(3, 2, "wig2", 42) }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let f = tiny_file();
        let bytes = f.to_bytes();
        let back = DatasetFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
        let e = DatasetFile::empty(64, 64, "wig1", 0);
        assert_eq!(DatasetFile::from_bytes(&e.to_bytes()).unwrap(), e);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = tiny_file().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(DatasetFile::from_bytes(&bytes), Err(DatasetError::Checksum { .. })));
        let mut bytes = tiny_file().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(DatasetFile::from_bytes(&bytes), Err(DatasetError::BadMagic)));
        let mut bytes = tiny_file().to_bytes();
        bytes[7] = 9;
        assert!(matches!(DatasetFile::from_bytes(&bytes), Err(DatasetError::UnsupportedVersion(9))));
    }

    #[test]
    fn split_examples() {
        let f = tiny_file();
        assert_eq!(f.episodes(), vec![0, 1, 2, 3, 4]);
        let big = DatasetFile {
            samples: (0..10).map(|e| Sample { episode: e, ..f.samples[0].clone() }).collect(),
            ..f.clone()
        };
        let (tr, te) = split(&big, 0.2, 1).unwrap();
        assert_eq!(te.len(), 2);
        assert_eq!(tr.len(), 8);
        assert_eq!(split(&big, 0.2, 1).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<u32> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split(&big, 0.0, 1).is_err());
        let one = DatasetFile { samples: vec![f.samples[0].clone()], ..f };
        assert!(matches!(split(&one, 0.5, 1), Err(DatasetError::TooFewEpisodes(1))));
    }
}
