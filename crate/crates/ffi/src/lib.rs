//! C ABI over the fouriernat library.
//!
//! Every function returns an [`FnatStatus`]; on failure a message for the
//! calling thread is available from [`fnat_last_error`]. Models are opaque
//! handles created by [`fnat_model_load`] and released with
//! [`fnat_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fouriernat::checks::{battery, Faults};
use fouriernat::data::strip_eos;
use fouriernat::decoding::{ar_greedy_batch, nat_decode_batch, RefineConfig};
use fouriernat::model::{load_checkpoint, AnyModel, Seq2Seq};
use fouriernat::spectral::fourier_mix;
use fouriernat::tensor::Tensor;
use fouriernat::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FnatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Vocabulary = 4,
    Length = 5,
    Io = 6,
    Checkpoint = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct FnatModel {
    inner: AnyModel<f64>,
}

/// Shape of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FnatModelInfo {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub t_max: usize,
    pub s_max: usize,
    /// 1 for a parallel (non-autoregressive) model, 0 for the AR baseline.
    pub is_parallel: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FnatStatus {
    match err {
        Error::Dimension { .. } | Error::Contract(_) => FnatStatus::Dimension,
        Error::Vocabulary { .. } => FnatStatus::Vocabulary,
        Error::Length { .. } | Error::Oversize { .. } | Error::Empty(_) => FnatStatus::Length,
        Error::Io(_) => FnatStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) | Error::Parse { .. } => FnatStatus::Checkpoint,
        Error::NonFinite(_) => FnatStatus::NonFinite,
        Error::Config(_) => FnatStatus::InvalidArgument,
    }
}

struct Failure(FnatStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FnatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FnatStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FnatStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FnatStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message describing the last failure on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn fnat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fnat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Spectral token mixing of a row-major `t×d` matrix with `t×d` gates:
/// `out = Re(iDFT(g_real ⊙ Re DFT(x) + i·g_imag ⊙ Im DFT(x)))` along the
/// sequence axis. `out` must hold `t·d` values and may not alias the inputs.
///
/// # Safety
/// Each pointer must reference `t·d` valid `double`s.
#[no_mangle]
pub unsafe extern "C" fn fnat_fourier_mix(
    x: *const f64,
    g_real: *const f64,
    g_imag: *const f64,
    t: usize,
    d: usize,
    out: *mut f64,
) -> FnatStatus {
    guard(|| {
        non_null(x, "x")?;
        non_null(g_real, "g_real")?;
        non_null(g_imag, "g_imag")?;
        non_null(out, "out")?;
        if t == 0 || d == 0 {
            return Err(Failure(FnatStatus::InvalidArgument, "t and d must be positive".into()));
        }
        let n = t.checked_mul(d).ok_or_else(|| {
            Failure(FnatStatus::InvalidArgument, "t·d overflows".into())
        })?;
        let view = |p: *const f64| Tensor::from_f64(&[t, d], std::slice::from_raw_parts(p, n));
        let y = fourier_mix(&view(x)?, &view(g_real)?, &view(g_imag)?)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(y.data());
        Ok(())
    })
}

/// Loads an `FNAT1` checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fnat_model_load(path: *const c_char, out: *mut *mut FnatModel) -> FnatStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(FnatStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (inner, _) = load_checkpoint::<f64>(Path::new(path))?;
        *out = Box::into_raw(Box::new(FnatModel { inner }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`fnat_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fnat_model_free(model: *mut FnatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fnat_model_info(model: *const FnatModel, info: *mut FnatModelInfo) -> FnatStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(info, "info")?;
        let m = &(*model).inner;
        let c = m.config();
        *info = FnatModelInfo {
            d: c.d,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            vocab: c.vocab,
            t_max: c.t_max,
            s_max: c.s_max,
            is_parallel: i32::from(m.arch().is_nat()),
        };
        Ok(())
    })
}

/// Decodes one source sequence. Parallel models run one pass plus
/// `refine_passes` refinement passes masking `mask_ratio` of the tokens;
/// the AR baseline decodes greedily and ignores both. Writes the content
/// tokens (no EOS) to `out_tokens` and their count to `*out_len`. When
/// `capacity` is too small the call fails with `BufferTooSmall` and
/// `*out_len` still holds the required size.
///
/// # Safety
/// `src` must reference `src_len` values, `out_tokens` `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn fnat_model_decode(
    model: *const FnatModel,
    src: *const u32,
    src_len: usize,
    refine_passes: usize,
    mask_ratio: f64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> FnatStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(src, "src")?;
        non_null(out_len, "out_len")?;
        let source: Vec<usize> = std::slice::from_raw_parts(src, src_len)
            .iter()
            .map(|&id| id as usize)
            .collect();
        let tokens = match &(*model).inner {
            AnyModel::Nat(m) => {
                let cfg = RefineConfig {
                    n_passes: refine_passes,
                    mask_ratio,
                };
                nat_decode_batch(m, &[source], &cfg)?.remove(0).tokens
            }
            AnyModel::Ar(m) => {
                let t = m.config().t_max;
                strip_eos(&ar_greedy_batch(m, &[source], t)?.remove(0)).to_vec()
            }
        };
        *out_len = tokens.len();
        if tokens.len() > capacity {
            return Err(Failure(
                FnatStatus::BufferTooSmall,
                format!("{} tokens do not fit in {capacity}", tokens.len()),
            ));
        }
        if !tokens.is_empty() {
            non_null(out_tokens, "out_tokens")?;
            let out = std::slice::from_raw_parts_mut(out_tokens, tokens.len());
            for (o, &t) in out.iter_mut().zip(&tokens) {
                *o = t as u32;
            }
        }
        Ok(())
    })
}

/// Runs the invariant battery. Writes the number of passing checks and the
/// total; returns `Ok` even when some checks fail.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fnat_selfcheck(passed: *mut usize, total: *mut usize) -> FnatStatus {
    guard(|| {
        non_null(passed, "passed")?;
        non_null(total, "total")?;
        let results = battery(Faults::default());
        *passed = results.iter().filter(|r| r.passed).count();
        *total = results.len();
        Ok(())
    })
}
