//! C ABI over the uvcg engine.
//!
//! Objects cross the boundary as opaque handles created and freed by this
//! library. Every fallible call returns a [`UvcgStatus`]; on failure the
//! message is available from [`uvcg_last_error`] on the same thread. Panics
//! are caught at the boundary and reported as [`UvcgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use uvcg::encoder::IdentityEncoder;
use uvcg::protect::IterateSelection;
use uvcg::{metrics, Encoder, EncoderSpec, Error, Fps, FrameImage, ProtectionConfig, ProtectionResult, VideoClip};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UvcgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Integrity = 4,
    Io = 5,
    Config = 6,
    Numerical = 7,
    Sidecar = 8,
    Capability = 9,
    Schema = 10,
    Panic = 11,
}

impl From<&Error> for UvcgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Format(_) => UvcgStatus::Format,
            Error::Integrity(_) => UvcgStatus::Integrity,
            Error::Io { .. } => UvcgStatus::Io,
            Error::Config(_) => UvcgStatus::Config,
            Error::Numerical(_) => UvcgStatus::Numerical,
            Error::Sidecar { .. } => UvcgStatus::Sidecar,
            Error::Capability(_) => UvcgStatus::Capability,
            Error::Schema(_) => UvcgStatus::Schema,
        }
    }
}

/// A video clip: RGB frames in `[0, 1]`, row-major, channels interleaved.
pub struct UvcgClip(VideoClip);

/// A latent encoder.
pub struct UvcgEncoder(Box<dyn Encoder>);

/// The outcome of a protection or baseline run.
pub struct UvcgProtection {
    clip: UvcgClip,
    max_abs_delta: f32,
    final_losses: Option<Vec<f32>>,
}

impl From<ProtectionResult> for UvcgProtection {
    fn from(r: ProtectionResult) -> Self {
        UvcgProtection {
            max_abs_delta: r.perturbations.max_abs(),
            final_losses: r.losses.map(|l| l.final_),
            clip: UvcgClip(r.immunized),
        }
    }
}

/// Optimizer settings. Budgets are in `[0, 1]` pixel units.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct UvcgProtectionConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: u32,
    pub warm_start: bool,
    /// Keep the final iterate instead of the lowest-loss one.
    pub last_iterate: bool,
    pub seed: u64,
}

impl From<&UvcgProtectionConfig> for ProtectionConfig {
    fn from(c: &UvcgProtectionConfig) -> Self {
        ProtectionConfig {
            epsilon: c.epsilon,
            alpha: c.alpha,
            steps: c.steps as usize,
            warm_start: c.warm_start,
            seed: c.seed,
            iterate: if c.last_iterate {
                IterateSelection::Last
            } else {
                IterateSelection::Best
            },
            ..ProtectionConfig::default()
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(UvcgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(UvcgStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UvcgStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(UvcgStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UvcgStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(UvcgStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => UvcgStatus::Ok,
        Err(Failure(status, msg)) => {
            set_last_error(msg);
            status
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uvcg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uvcg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn uvcg_protection_config_default() -> UvcgProtectionConfig {
    let d = ProtectionConfig::default();
    UvcgProtectionConfig {
        epsilon: d.epsilon,
        alpha: d.alpha,
        steps: d.steps as u32,
        warm_start: d.warm_start,
        last_iterate: false,
        seed: d.seed,
    }
}

/// Loads a clip directory (PNG frames plus manifest).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_load(path: *const c_char, out: *mut *mut UvcgClip) -> UvcgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, UvcgClip(uvcg::load_clip(Path::new(path))?))
    })
}

/// Builds a clip from `frames` consecutive `height x width x 3` f32 buffers.
///
/// # Safety
/// `name` must be a NUL-terminated string, `pixels` must point to
/// `frames * height * width * 3` floats, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_from_pixels(
    name: *const c_char,
    width: usize,
    height: usize,
    frames: usize,
    pixels: *const f32,
    out: *mut *mut UvcgClip,
) -> UvcgStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let per_frame = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .filter(|n| *n > 0)
            .ok_or_else(|| invalid("frame size is zero or overflows"))?;
        let total = per_frame
            .checked_mul(frames)
            .ok_or_else(|| invalid("clip size overflows"))?;
        let data = std::slice::from_raw_parts(pixels, total);
        let frames = data
            .chunks_exact(per_frame)
            .map(|c| FrameImage::new(width, height, c.to_vec()))
            .collect::<uvcg::Result<Vec<_>>>()?;
        put(out, UvcgClip(VideoClip::new(name, frames, Fps::default())?))
    })
}

/// Writes a clip directory.
///
/// # Safety
/// `clip` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_save(clip: *const UvcgClip, path: *const c_char) -> UvcgStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        let path = str_arg(path, "path")?;
        uvcg::save_clip(&clip.0, Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `clip` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_free(clip: *mut UvcgClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Frame count, or 0 for a null handle.
///
/// # Safety
/// `clip` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_frame_count(clip: *const UvcgClip) -> usize {
    clip.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `clip` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_width(clip: *const UvcgClip) -> usize {
    clip.as_ref().map_or(0, |c| c.0.width())
}

/// # Safety
/// `clip` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_height(clip: *const UvcgClip) -> usize {
    clip.as_ref().map_or(0, |c| c.0.height())
}

/// Borrows frame `index`'s pixels; valid while `clip` lives.
///
/// # Safety
/// `clip` must be a live handle; `pixels` and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_clip_frame(
    clip: *const UvcgClip,
    index: usize,
    pixels: *mut *const f32,
    len: *mut usize,
) -> UvcgStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        if index >= clip.0.len() {
            return Err(invalid(format!("frame {index} of {}", clip.0.len())));
        }
        let frame = clip.0.frame(index).pixels();
        write(pixels, frame.as_ptr())?;
        write(len, frame.len())
    })
}

/// The deterministic reference encoder.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_encoder_reference(
    seed: u64,
    downsample_factor: usize,
    latent_channels: usize,
    out: *mut *mut UvcgEncoder,
) -> UvcgStatus {
    guard(|| {
        let spec = EncoderSpec {
            downsample_factor,
            latent_channels,
            ..EncoderSpec::reference(seed)
        };
        put(out, UvcgEncoder(uvcg::build_encoder(&spec)?))
    })
}

/// The identity encoder (latent = pixels).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_encoder_identity(out: *mut *mut UvcgEncoder) -> UvcgStatus {
    guard(|| put(out, UvcgEncoder(Box::new(IdentityEncoder))))
}

/// Launches a model sidecar with a shell command and completes the handshake.
///
/// # Safety
/// `command` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_encoder_sidecar(command: *const c_char, out: *mut *mut UvcgEncoder) -> UvcgStatus {
    guard(|| {
        let command = str_arg(command, "command")?;
        put(out, UvcgEncoder(uvcg::build_encoder(&EncoderSpec::sidecar(command))?))
    })
}

/// # Safety
/// `encoder` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_encoder_free(encoder: *mut UvcgEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Immunizes `clip` toward `target`'s latents.
///
/// # Safety
/// All handles must be live, `config` must point to a config, and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_protect(
    clip: *const UvcgClip,
    target: *const UvcgClip,
    encoder: *const UvcgEncoder,
    config: *const UvcgProtectionConfig,
    out: *mut *mut UvcgProtection,
) -> UvcgStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        let target = borrow(target, "target")?;
        let encoder = borrow(encoder, "encoder")?;
        let config = ProtectionConfig::from(borrow(config, "config")?);
        let result = uvcg::protect_video(&clip.0, &target.0, encoder.0.as_ref(), &config)?;
        put(out, UvcgProtection::from(result))
    })
}

/// Uniform-noise baseline at the same budget.
///
/// # Safety
/// `clip` must be live, `config` must point to a config, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_baseline(
    clip: *const UvcgClip,
    config: *const UvcgProtectionConfig,
    out: *mut *mut UvcgProtection,
) -> UvcgStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        let config = ProtectionConfig::from(borrow(config, "config")?);
        put(
            out,
            UvcgProtection::from(uvcg::random_noise_baseline(&clip.0, &config)?),
        )
    })
}

/// Borrows the immunized clip; valid while `protection` lives. Null for a
/// null handle.
///
/// # Safety
/// `protection` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_protection_clip(protection: *const UvcgProtection) -> *const UvcgClip {
    protection.as_ref().map_or(ptr::null(), |p| &p.clip)
}

/// Largest absolute perturbation over all frames.
///
/// # Safety
/// `protection` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_protection_max_abs_delta(protection: *const UvcgProtection) -> f32 {
    protection.as_ref().map_or(f32::NAN, |p| p.max_abs_delta)
}

/// Loss of the kept iterate for `frame`. Fails with `Capability` for a
/// baseline run, which records no losses.
///
/// # Safety
/// `protection` must be a live handle; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_protection_final_loss(
    protection: *const UvcgProtection,
    frame: usize,
    loss: *mut f32,
) -> UvcgStatus {
    guard(|| {
        let p = borrow(protection, "protection")?;
        let losses = p
            .final_losses
            .as_ref()
            .ok_or_else(|| Failure(UvcgStatus::Capability, "baseline runs record no losses".into()))?;
        let value = losses
            .get(frame)
            .ok_or_else(|| invalid(format!("frame {frame} of {}", losses.len())))?;
        write(loss, *value)
    })
}

/// # Safety
/// `protection` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn uvcg_protection_free(protection: *mut UvcgProtection) {
    if !protection.is_null() {
        drop(Box::from_raw(protection));
    }
}

/// Mean per-frame PSNR in dB.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_psnr(a: *const UvcgClip, b: *const UvcgClip, out: *mut f64) -> UvcgStatus {
    guard(|| {
        let (a, b) = (borrow(a, "a")?, borrow(b, "b")?);
        write(out, metrics::psnr(&a.0, &b.0)?.0)
    })
}

/// Mean per-frame SSIM.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uvcg_ssim(a: *const UvcgClip, b: *const UvcgClip, out: *mut f64) -> UvcgStatus {
    guard(|| {
        let (a, b) = (borrow(a, "a")?, borrow(b, "b")?);
        write(out, metrics::ssim(&a.0, &b.0)?.0)
    })
}
