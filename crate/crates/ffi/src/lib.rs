//! C ABI over the simulator: force estimation from a checkpoint, depth
//! masking, the weighted loss and the soft and rigid press models.
//!
//! Every call returns a `MoeStatus`. On failure the message is available
//! from `moe_last_error` on the same thread until the next failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::Vector3;

use moe_sim::config::GlobalConfig;
use moe_sim::estimator::{read_checkpoint, weighted_mse, Estimator, EstimatorError, ForceVector, LossWeights};
use moe_sim::mechanics::{rigid_press, soft_press};
use moe_sim::sensing::{apply_mask, ActuatorLoad, DepthFrame, Mask};

/// Result of every exported call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Solver = 5,
    Panic = 6,
}

/// Validated simulator configuration.
pub struct MoeConfig(GlobalConfig);

/// Trained force estimator.
pub struct MoeEstimator(Estimator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MoeStatus, String);

impl From<EstimatorError> for Failure {
    fn from(e: EstimatorError) -> Self {
        let status = match e {
            EstimatorError::Io(_) => MoeStatus::Io,
            EstimatorError::Checkpoint(_) | EstimatorError::ParamCount { .. } | EstimatorError::NonFinite => {
                MoeStatus::Corrupt
            }
            _ => MoeStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MoeStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MoeStatus::Panic
        }
    }
}

unsafe fn read<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MoeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure(MoeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure(MoeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn store<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    *p.as_mut().ok_or_else(|| Failure(MoeStatus::NullPointer, format!("{what} is null")))? = v;
    Ok(())
}

unsafe fn array3(p: *const f64, what: &str) -> Result<[f64; 3], Failure> {
    Ok(slice(p, 3, what)?.try_into().expect("length 3"))
}

unsafe fn masked_frame(
    depth: *const u16,
    mask: *const u8,
    width: usize,
    height: usize,
) -> Result<moe_sim::sensing::MaskedFrame, Failure> {
    let n = width.checked_mul(height).filter(|&n| n > 0).ok_or_else(|| invalid("frame must be non-empty"))?;
    let frame = DepthFrame { width, height, depth: slice(depth, n, "depth")?.to_vec() };
    let mask = Mask { width, height, bits: slice(mask, n, "mask")?.iter().map(|&b| b != 0).collect() };
    apply_mask(&frame, &mask).map_err(|e| invalid(e.to_string()))
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn moe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parse a JSON configuration; NULL or "" gives the defaults. Free the
/// result with `moe_config_free`.
///
/// # Safety
/// `json` is NULL or a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn moe_config_new(json: *const c_char, out: *mut *mut MoeConfig) -> MoeStatus {
    guard(|| {
        let text = if json.is_null() {
            ""
        } else {
            CStr::from_ptr(json).to_str().map_err(|_| invalid("config is not UTF-8"))?
        };
        let config = GlobalConfig::from_json(text, &[]).map_err(|e| invalid(e.to_string()))?;
        store(out, Box::into_raw(Box::new(MoeConfig(config))), "out")?;
        Ok(())
    })
}

/// # Safety
/// `config` is NULL or came from `moe_config_new` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn moe_config_free(config: *mut MoeConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Load an estimator checkpoint. Free the result with `moe_estimator_free`.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn moe_estimator_load(path: *const c_char, out: *mut *mut MoeEstimator) -> MoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(MoeStatus::NullPointer, "out is null".into()));
        }
        let path = CStr::from_ptr(read(path, "path")?).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let file = File::open(path).map_err(|e| Failure(MoeStatus::Io, format!("{path}: {e}")))?;
        let params = read_checkpoint(BufReader::new(file))?;
        store(out, Box::into_raw(Box::new(MoeEstimator(Estimator::new(params)?))), "out")?;
        Ok(())
    })
}

/// # Safety
/// `estimator` is NULL or came from `moe_estimator_load` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn moe_estimator_free(estimator: *mut MoeEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

/// Image size the estimator expects.
///
/// # Safety
/// `estimator` is live; `width` and `height` are writable.
#[no_mangle]
pub unsafe extern "C" fn moe_estimator_image_size(
    estimator: *const MoeEstimator,
    width: *mut usize,
    height: *mut usize,
) -> MoeStatus {
    guard(|| {
        let cfg = &read(estimator, "estimator")?.0.params().config;
        store(width, cfg.image_width, "width")?;
        store(height, cfg.image_height, "height")?;
        Ok(())
    })
}

/// Estimate the contact force (N, end-effector frame) from a row-major depth
/// image in millimetres, a finger mask (non-zero bytes are finger pixels)
/// and the four actuator loads.
///
/// # Safety
/// `depth` and `mask` hold `width * height` elements, `q` holds 4 and
/// `out_force` has room for 3.
#[no_mangle]
pub unsafe extern "C" fn moe_estimator_predict(
    estimator: *const MoeEstimator,
    depth: *const u16,
    mask: *const u8,
    width: usize,
    height: usize,
    q: *const f64,
    out_force: *mut f64,
) -> MoeStatus {
    guard(|| {
        let est = &read(estimator, "estimator")?.0;
        let frame = masked_frame(depth, mask, width, height)?;
        let q: [f64; 4] = slice(q, 4, "q")?.try_into().expect("length 4");
        let out = slice_mut(out_force, 3, "out_force")?;
        out.copy_from_slice(&est.predict(&frame, &ActuatorLoad(q))?.0);
        Ok(())
    })
}

/// Zero every depth pixel outside the mask.
///
/// # Safety
/// `depth`, `mask` and `out` hold `width * height` elements; `out` may alias `depth`.
#[no_mangle]
pub unsafe extern "C" fn moe_apply_mask(
    depth: *const u16,
    mask: *const u8,
    width: usize,
    height: usize,
    out: *mut u16,
) -> MoeStatus {
    guard(|| {
        let masked = masked_frame(depth, mask, width, height)?;
        slice_mut(out, width * height, "out")?.copy_from_slice(&masked.frame().depth);
        Ok(())
    })
}

/// Squared norm of the per-axis weighted force error.
///
/// # Safety
/// `w`, `w_hat` and `lambda` hold 3 values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn moe_weighted_mse(
    w: *const f64,
    w_hat: *const f64,
    lambda: *const f64,
    out: *mut f64,
) -> MoeStatus {
    guard(|| {
        let lambda = LossWeights::new(array3(lambda, "lambda")?).map_err(|e| invalid(e.to_string()))?;
        let v = weighted_mse(&ForceVector(array3(w, "w")?), &ForceVector(array3(w_hat, "w_hat")?), &lambda);
        store(out, v, "out")?;
        Ok(())
    })
}

/// Peak head force (N) of the rigid gripper pressed `depth` meters into the hair.
///
/// # Safety
/// `config` is live; `out_force` is writable.
#[no_mangle]
pub unsafe extern "C" fn moe_rigid_press(config: *const MoeConfig, depth: f64, out_force: *mut f64) -> MoeStatus {
    guard(|| {
        let config = &read(config, "config")?.0;
        if !depth.is_finite() {
            return Err(invalid("depth must be finite"));
        }
        store(out_force, rigid_press(&config.mechanics.rigid, &config.head(None), depth), "out_force")?;
        Ok(())
    })
}

/// Solve the soft end-effector pressed `depth` meters past first hair
/// contact along `direction` (from the head center) under four tendon
/// commands. Writes the peak head force magnitude, and optionally the eight
/// tendon tensions and the torque residual.
///
/// # Safety
/// `commands` holds 4 values and `direction` 3; `out_force` is writable;
/// `out_tensions` is NULL or has room for 8; `out_residual` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn moe_soft_press(
    config: *const MoeConfig,
    commands: *const f64,
    direction: *const f64,
    depth: f64,
    out_force: *mut f64,
    out_tensions: *mut f64,
    out_residual: *mut f64,
) -> MoeStatus {
    guard(|| {
        let config = &read(config, "config")?.0;
        let commands = slice(commands, 4, "commands")?;
        let dir = Vector3::from(array3(direction, "direction")?);
        if !(dir.norm() > 0.0 && dir.iter().all(|v| v.is_finite()) && depth.is_finite()) {
            return Err(invalid("direction must be non-zero and depth finite"));
        }
        let (force, eq) = soft_press(&config.end_effector(), commands, &config.head(None), &dir.normalize(), depth, 8)
            .map_err(|e| Failure(MoeStatus::Solver, e.to_string()))?;
        store(out_force, force, "out_force")?;
        if !out_tensions.is_null() {
            slice_mut(out_tensions, 8, "out_tensions")?.copy_from_slice(&eq.tendons.tensions);
        }
        if let Some(r) = out_residual.as_mut() {
            *r = eq.residual;
        }
        Ok(())
    })
}
