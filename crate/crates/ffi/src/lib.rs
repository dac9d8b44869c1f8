//! C ABI over the `asfseg` library.
//!
//! Every function returns an [`AsfStatus`]; on failure the message is
//! available from [`asf_last_error`] on the same thread. Models and volumes
//! are opaque handles owned by the caller and released with the matching
//! `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use asfseg::checkpoint::Checkpoint;
use asfseg::harness::predict_volume;
use asfseg::metrics::evaluate_volume;
use asfseg::network::{Model, NetworkConfig};
use asfseg::volume::{load_volume, save_volume, Dtype, Volume};
use asfseg::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Precondition violated (wrong dims, dtype, argument range).
    Usage = 3,
    /// Invalid config field.
    Config = 4,
    /// Malformed file contents.
    Format = 5,
    Io = 6,
    /// Non-finite value during computation.
    Numeric = 7,
    /// Internal error; the library panicked.
    Panic = 8,
}

/// Element type of a volume.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsfDtype {
    F32 = 0,
    U8 = 1,
}

/// Aggregate metrics over the slices that contain a nodule.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AsfMetrics {
    pub iou: f64,
    pub dsc: f64,
    pub sen: f64,
    pub acc: f64,
    /// Slices whose ground truth has at least one positive voxel. When 0
    /// the four metrics are undefined and set to NaN.
    pub nodule_slices: usize,
}

/// Trained or freshly initialized network.
pub struct AsfModel(Model);

/// A `D x H x W` volume of `f32` intensities or `u8` mask values.
pub struct AsfVolume(Volume);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AsfStatus {
    match e {
        Error::Usage(_) | Error::ShapeMismatch { .. } => AsfStatus::Usage,
        Error::Config { .. } => AsfStatus::Config,
        Error::Format { .. } => AsfStatus::Format,
        Error::Io { .. } => AsfStatus::Io,
        Error::NumericFault { .. } | Error::Diverged { .. } => AsfStatus::Numeric,
    }
}

struct Fail(AsfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AsfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            AsfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AsfStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AsfStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn asf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn asf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asf_model_load(path: *const c_char, out: *mut *mut AsfModel) -> AsfStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let model = Checkpoint::load(&path)?.to_model()?;
        *out = Box::into_raw(Box::new(AsfModel(model)));
        Ok(())
    })
}

/// Creates an untrained model with the default architecture.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asf_model_new_default(seed: u64, out: *mut *mut AsfModel) -> AsfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = Model::new(NetworkConfig {
            seed,
            ..NetworkConfig::default()
        })?;
        *out = Box::into_raw(Box::new(AsfModel(model)));
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asf_model_num_parameters(model: *const AsfModel, out: *mut usize) -> AsfStatus {
    guard(|| {
        let model = in_arg(model, "model")?;
        *out_arg(out, "out")? = model.0.num_parameters();
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asf_model_free(model: *mut AsfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a volume by name (path without the `.json` / `.raw` extension).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asf_volume_load(name: *const c_char, out: *mut *mut AsfVolume) -> AsfStatus {
    guard(|| {
        let name = path_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(AsfVolume(load_volume(&name)?)));
        Ok(())
    })
}

/// Copies `len = d * h * w` values (slice-major, `x` fastest) into a new
/// volume with unit spacing. `u8` volumes accept only 0 and 1.
///
/// # Safety
/// `dims` must point to 3 values, `data` to `len` floats, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn asf_volume_new(
    dims: *const usize,
    data: *const f32,
    len: usize,
    dtype: AsfDtype,
    out: *mut *mut AsfVolume,
) -> AsfStatus {
    guard(|| {
        if dims.is_null() {
            return Err(null("dims"));
        }
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let out = out_arg(out, "out")?;
        let d = std::slice::from_raw_parts(dims, 3);
        let voxels = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        let dtype = match dtype {
            AsfDtype::F32 => Dtype::F32,
            AsfDtype::U8 => Dtype::U8,
        };
        let v = Volume::new([d[0], d[1], d[2]], [1.0; 3], dtype, voxels)?;
        *out = Box::into_raw(Box::new(AsfVolume(v)));
        Ok(())
    })
}

/// Writes `D, H, W` into `dims_out[0..3]`.
///
/// # Safety
/// `volume` must come from this library; `dims_out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn asf_volume_dims(volume: *const AsfVolume, dims_out: *mut usize) -> AsfStatus {
    guard(|| {
        let v = in_arg(volume, "volume")?;
        if dims_out.is_null() {
            return Err(null("dims_out"));
        }
        std::slice::from_raw_parts_mut(dims_out, 3).copy_from_slice(&v.0.dims());
        Ok(())
    })
}

/// Borrowed view of the voxels as floats; valid while the volume lives.
///
/// # Safety
/// `volume` must come from this library; `data` and `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn asf_volume_data(
    volume: *const AsfVolume,
    data: *mut *const f32,
    len: *mut usize,
) -> AsfStatus {
    guard(|| {
        let v = in_arg(volume, "volume")?;
        let data = out_arg(data, "data")?;
        let len = out_arg(len, "len")?;
        *data = v.0.voxels().as_ptr();
        *len = v.0.voxels().len();
        Ok(())
    })
}

/// # Safety
/// `volume` must come from this library; `name` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn asf_volume_save(volume: *const AsfVolume, name: *const c_char) -> AsfStatus {
    guard(|| {
        let v = in_arg(volume, "volume")?;
        let name = path_arg(name, "name")?;
        save_volume(&name, &v.0)?;
        Ok(())
    })
}

/// Releases a volume. Null is ignored.
///
/// # Safety
/// `volume` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asf_volume_free(volume: *mut AsfVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Segments a normalized `f32` image volume. Produces the probability volume
/// and the mask thresholded at `threshold` (values `>= threshold` are 1).
///
/// # Safety
/// `model` and `image` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asf_predict(
    model: *const AsfModel,
    image: *const AsfVolume,
    threshold: f32,
    prob_out: *mut *mut AsfVolume,
    mask_out: *mut *mut AsfVolume,
) -> AsfStatus {
    guard(|| {
        let model = in_arg(model, "model")?;
        let image = in_arg(image, "image")?;
        let prob_out = out_arg(prob_out, "prob_out")?;
        let mask_out = out_arg(mask_out, "mask_out")?;
        if !threshold.is_finite() {
            return Err(Fail(AsfStatus::Usage, "threshold must be finite".into()));
        }
        let p = predict_volume(&model.0, &image.0, threshold)?;
        *prob_out = Box::into_raw(Box::new(AsfVolume(p.prob)));
        *mask_out = Box::into_raw(Box::new(AsfVolume(p.mask)));
        Ok(())
    })
}

/// Scores `pred` (binarized at `threshold`) against the `u8` mask `gt`,
/// averaging over the slices that contain a nodule.
///
/// # Safety
/// `pred` and `gt` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn asf_evaluate(
    pred: *const AsfVolume,
    gt: *const AsfVolume,
    threshold: f32,
    out: *mut AsfMetrics,
) -> AsfStatus {
    guard(|| {
        let pred = in_arg(pred, "pred")?;
        let gt = in_arg(gt, "gt")?;
        let out = out_arg(out, "out")?;
        let r = evaluate_volume(&pred.0, &gt.0, threshold)?;
        *out = match r.aggregate {
            Some(m) => AsfMetrics {
                iou: m.iou,
                dsc: m.dsc,
                sen: m.sen,
                acc: m.acc,
                nodule_slices: r.nodule_slices,
            },
            None => AsfMetrics {
                iou: f64::NAN,
                dsc: f64::NAN,
                sen: f64::NAN,
                acc: f64::NAN,
                nodule_slices: 0,
            },
        };
        Ok(())
    })
}
