//! C ABI over a trained gsavatar checkpoint.
//!
//! Every function returns a [`GsaStatus`]; on failure a message is kept per
//! thread and can be fetched with [`gsa_last_error`]. Handles are opaque and
//! must be released with [`gsa_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gsavatar::articulation::PoseParams;
use gsavatar::checkpoint::Checkpoint;
use gsavatar::config::Config;
use gsavatar::geometry::RigidTransform;
use gsavatar::model::{Avatar, FrameSpec, PoseSource};
use gsavatar::render::Camera;
use gsavatar::synth::orbit_camera;
use gsavatar::Error;
use nalgebra::{Matrix3, Vector3};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    VersionMismatch = 5,
    Config = 6,
    Internal = 7,
    Panic = 8,
}

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsaCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl From<Camera> for GsaCamera {
    fn from(c: Camera) -> Self {
        let r = c.world_to_cam.linear;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width as u32,
            height: c.height as u32,
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            translation: c.world_to_cam.translation.into(),
            near: c.near,
            far: c.far,
        }
    }
}

impl From<&GsaCamera> for Camera {
    fn from(c: &GsaCamera) -> Self {
        Camera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width as usize,
            height: c.height as usize,
            world_to_cam: RigidTransform::new(
                Matrix3::from_fn(|i, k| c.rotation[3 * i + k]),
                Vector3::from(c.translation),
            ),
            near: c.near,
            far: c.far,
        }
    }
}

/// Opaque trained model.
pub struct GsaModel {
    avatar: Avatar,
    config: Config,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GsaStatus {
    match e {
        Error::Io(_) => GsaStatus::Io,
        Error::Checkpoint(_) => GsaStatus::Checkpoint,
        Error::CheckpointVersion { .. } => GsaStatus::VersionMismatch,
        Error::Config(_) | Error::UnknownConfigKey(_) | Error::UnknownPlugin(_) => {
            GsaStatus::Config
        }
        Error::DimensionMismatch(_) | Error::ZeroQuaternion | Error::Dataset(_) => {
            GsaStatus::InvalidArgument
        }
        _ => GsaStatus::Internal,
    }
}

struct Fail(GsaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GsaStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: String) -> Fail {
    Fail(GsaStatus::InvalidArgument, msg)
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GsaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GsaStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const GsaModel) -> Result<&'a GsaModel, Fail> {
    // SAFETY: caller passes a handle from `gsa_model_load` or null.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsa_model_load(path: *const c_char, out: *mut *mut GsaModel) -> GsaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|e| invalid(format!("path is not UTF-8: {e}")))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let config = ckpt.config.clone();
        let avatar = ckpt.into_avatar()?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(GsaModel { avatar, config })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `gsa_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gsa_model_free(model: *mut GsaModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of canonical gaussians.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsa_model_num_gaussians(
    model: *const GsaModel,
    out: *mut usize,
) -> GsaStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        // SAFETY: caller guarantees validity when non-null.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = m.avatar.num_gaussians();
        Ok(())
    })
}

/// Number of skeleton joints `B`; a pose holds `8 + 4 * B` values.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsa_model_num_joints(
    model: *const GsaModel,
    out: *mut usize,
) -> GsaStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = m.avatar.template.num_joints();
        Ok(())
    })
}

/// Camera on the synthetic orbit around the template at `azimuth_deg`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsa_orbit_camera(
    model: *const GsaModel,
    azimuth_deg: f64,
    out: *mut GsaCamera,
) -> GsaStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = orbit_camera(&m.config.synth, &m.avatar.template, azimuth_deg).into();
        Ok(())
    })
}

/// Renders one image.
///
/// `pose` holds `pose_len = 8 + 4 * B` values laid out as translation (3),
/// global rotation quaternion `(w, x, y, z)`, one local quaternion per joint
/// and the scale. `rgb` receives `width * height * 3` interleaved values in
/// `[0, 1]`; `alpha` (may be null) receives `width * height` opacities.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gsa_model_render(
    model: *const GsaModel,
    pose: *const f64,
    pose_len: usize,
    camera: *const GsaCamera,
    nonrigid: bool,
    rgb: *mut f64,
    rgb_len: usize,
    alpha: *mut f64,
    alpha_len: usize,
) -> GsaStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let joints = m.avatar.template.num_joints();
        if pose.is_null() {
            return Err(null("pose"));
        }
        if pose_len != 8 + 4 * joints {
            return Err(invalid(format!(
                "pose_len is {pose_len}, expected {}",
                8 + 4 * joints
            )));
        }
        // SAFETY: non-null with the checked length.
        let flat = unsafe { std::slice::from_raw_parts(pose, pose_len) };
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pose contains non-finite values".into()));
        }
        let pose = PoseParams::from_flat(flat, joints);
        let camera: Camera = unsafe { camera.as_ref() }
            .ok_or_else(|| null("camera"))?
            .into();
        let px = camera.width * camera.height;
        if px == 0 {
            return Err(invalid("camera has zero pixels".into()));
        }
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if rgb_len != 3 * px {
            return Err(invalid(format!(
                "rgb_len is {rgb_len}, expected {}",
                3 * px
            )));
        }
        if !alpha.is_null() && alpha_len != px {
            return Err(invalid(format!("alpha_len is {alpha_len}, expected {px}")));
        }
        let fb = m.avatar.render(
            FrameSpec {
                camera: &camera,
                pose: PoseSource::Explicit(&pose),
                latent: None,
            },
            nonrigid,
        )?;
        // SAFETY: lengths checked above.
        unsafe { std::slice::from_raw_parts_mut(rgb, rgb_len) }.copy_from_slice(&fb.rgb);
        if !alpha.is_null() {
            unsafe { std::slice::from_raw_parts_mut(alpha, alpha_len) }.copy_from_slice(&fb.alpha);
        }
        Ok(())
    })
}
