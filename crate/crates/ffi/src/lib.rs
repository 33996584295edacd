//! C ABI over the slabseg toolkit.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free`. Every fallible call returns a `SlabsegStatus`; on
//! failure `slabseg_last_error` describes the error on the calling thread.
//! Panics never unwind into the caller.

// Pointer validity is the caller's contract, stated per function in the header.
#![allow(clippy::not_unsafe_ptr_arg_deref)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use slabseg::geometry::{scale_from_ruler, GeometryError, RulerCalibration};
use slabseg::metrics::evaluate_pair;
use slabseg::pipeline::{calibrate_file, segment_image, PipelineError, Segmenter};
use slabseg::raster::io::{find_spacing, read_image, read_mask, sidecar_path, write_mask, write_spacing};
use slabseg::raster::{BinaryMask, RasterImage};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlabsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CalibrationMissing = 4,
    ModelLoadFailure = 5,
    Geometry = 6,
    Metrics = 7,
    Segmentation = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Photograph: planar RGB or grey values in `[0, 1]` with optional spacing.
pub struct SlabsegImage(RasterImage);

/// Binary segmentation mask with optional spacing.
pub struct SlabsegMask(BinaryMask);

/// One or more U-Net containers, or the classical baseline.
pub struct SlabsegSegmenter(Segmenter);

/// Banded metrics of one prediction. Undefined distances are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlabsegReport {
    pub dice: f64,
    pub assd_mm: f64,
    pub hd95_mm: f64,
    /// 1 when ASSD exceeds the threshold or is undefined.
    pub outlier: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SlabsegStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::CalibrationMissing(_) => SlabsegStatus::CalibrationMissing,
            PipelineError::ModelLoadFailure(_) => SlabsegStatus::ModelLoadFailure,
            PipelineError::Geometry(_) => SlabsegStatus::Geometry,
            PipelineError::Metrics(_) => SlabsegStatus::Metrics,
            PipelineError::UNet(_) => SlabsegStatus::Segmentation,
            PipelineError::Io(_) | PipelineError::File { .. } => SlabsegStatus::Io,
            _ => SlabsegStatus::InvalidArgument,
        };
        Failure(status, format!("{}: {e}", e.kind()))
    }
}

macro_rules! impl_failure_via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}

impl_failure_via_pipeline!(
    GeometryError,
    slabseg::metrics::MetricsError,
    slabseg::raster::io::IoError,
    slabseg::raster::RasterError
);

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SlabsegStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic, and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SlabsegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlabsegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SlabsegStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either null or a valid pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(SlabsegStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(SlabsegStatus::NullPointer, format!("{name} is null")))
}

fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(SlabsegStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(p) };
    Ok(PathBuf::from(
        s.to_str().map_err(|_| invalid(format!("{name} is not UTF-8")))?,
    ))
}

/// Spacing argument: values `<= 0` mean "look for a sidecar".
fn spacing_arg(path: &std::path::Path, spacing_mm: f64) -> Result<Option<f64>, Failure> {
    if spacing_mm > 0.0 {
        Ok(Some(spacing_mm))
    } else {
        Ok(find_spacing(path)?)
    }
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slabseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn slabseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Pixel size in mm/px from two clicked ruler points a known distance apart.
#[no_mangle]
pub extern "C" fn slabseg_ruler_spacing(
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    distance_mm: f64,
    out_spacing_mm: *mut f64,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_spacing_mm, "out_spacing_mm")?;
        *out = scale_from_ruler(&RulerCalibration {
            p1: (x1, y1),
            p2: (x2, y2),
            distance_mm,
        })?;
        Ok(())
    })
}

/// Rectifies `raw_path` with the calibration JSON and writes the PNG and its
/// sidecar; `out_source_spacing_mm` (nullable) receives the measured spacing.
#[no_mangle]
pub extern "C" fn slabseg_calibrate_file(
    raw_path: *const c_char,
    calibration_path: *const c_char,
    out_path: *const c_char,
    target_mm: f64,
    margin_mm: f64,
    out_source_spacing_mm: *mut f64,
) -> SlabsegStatus {
    guard(|| {
        let raw = path_arg(raw_path, "raw_path")?;
        let calib = path_arg(calibration_path, "calibration_path")?;
        let out = path_arg(out_path, "out_path")?;
        let sidecar = calibrate_file(&raw, &calib, &out, target_mm, margin_mm)?;
        // SAFETY: nullable output pointer.
        if let Some(s) = unsafe { out_source_spacing_mm.as_mut() } {
            *s = sidecar.source_spacing_mm;
        }
        Ok(())
    })
}

/// Reads a PNG. `spacing_mm <= 0` takes the spacing from a sidecar if present.
#[no_mangle]
pub extern "C" fn slabseg_image_read(
    path: *const c_char,
    spacing_mm: f64,
    out_image: *mut *mut SlabsegImage,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_image, "out_image")?;
        let path = path_arg(path, "path")?;
        let spacing = spacing_arg(&path, spacing_mm)?;
        *out = boxed(SlabsegImage(read_image(&path, spacing)?));
        Ok(())
    })
}

/// Builds an image from interleaved 8-bit pixels (`channels` 1 or 3).
/// `spacing_mm <= 0` leaves the image uncalibrated.
#[no_mangle]
pub extern "C" fn slabseg_image_from_u8(
    data: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    spacing_mm: f64,
    out_image: *mut *mut SlabsegImage,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_image, "out_image")?;
        if data.is_null() {
            return Err(Failure(SlabsegStatus::NullPointer, "data is null".into()));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| invalid("image size overflows"))?;
        // SAFETY: the caller guarantees `data` holds height * width * channels bytes.
        let src = unsafe { std::slice::from_raw_parts(data, n) };
        let mut planar = vec![0.0; n];
        for (i, &v) in src.iter().enumerate() {
            let (pixel, c) = (i / channels.max(1), i % channels.max(1));
            planar[c * height * width + pixel] = f64::from(v) / 255.0;
        }
        let spacing = (spacing_mm > 0.0).then_some(spacing_mm);
        *out = boxed(SlabsegImage(RasterImage::new(
            height, width, channels, planar, spacing,
        )?));
        Ok(())
    })
}

/// Height, width and channel count; any output pointer may be null.
#[no_mangle]
pub extern "C" fn slabseg_image_dims(
    image: *const SlabsegImage,
    out_height: *mut usize,
    out_width: *mut usize,
    out_channels: *mut usize,
) -> SlabsegStatus {
    guard(|| {
        let img = &non_null(image, "image")?.0;
        // SAFETY: nullable output pointers.
        unsafe {
            if let Some(h) = out_height.as_mut() {
                *h = img.height();
            }
            if let Some(w) = out_width.as_mut() {
                *w = img.width();
            }
            if let Some(c) = out_channels.as_mut() {
                *c = img.channels();
            }
        }
        Ok(())
    })
}

/// Releases an image; null is ignored.
#[no_mangle]
pub extern "C" fn slabseg_image_free(image: *mut SlabsegImage) {
    if !image.is_null() {
        // SAFETY: `image` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(image) });
    }
}

/// Loads `count` model containers into an ensemble; `count == 0` selects the
/// classical baseline.
#[no_mangle]
pub extern "C" fn slabseg_segmenter_load(
    model_paths: *const *const c_char,
    count: usize,
    out_segmenter: *mut *mut SlabsegSegmenter,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_segmenter, "out_segmenter")?;
        let mut paths = Vec::with_capacity(count);
        if count > 0 {
            if model_paths.is_null() {
                return Err(Failure(SlabsegStatus::NullPointer, "model_paths is null".into()));
            }
            // SAFETY: the caller guarantees `count` entries.
            let raw = unsafe { std::slice::from_raw_parts(model_paths, count) };
            for (i, &p) in raw.iter().enumerate() {
                paths.push(path_arg(p, &format!("model_paths[{i}]"))?);
            }
        }
        *out = boxed(SlabsegSegmenter(Segmenter::load(&paths)?));
        Ok(())
    })
}

/// Releases a segmenter; null is ignored.
#[no_mangle]
pub extern "C" fn slabseg_segmenter_free(segmenter: *mut SlabsegSegmenter) {
    if !segmenter.is_null() {
        // SAFETY: `segmenter` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(segmenter) });
    }
}

/// Segments a calibrated image; the mask has the image's dims and spacing.
#[no_mangle]
pub extern "C" fn slabseg_segment(
    segmenter: *const SlabsegSegmenter,
    image: *const SlabsegImage,
    out_mask: *mut *mut SlabsegMask,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_mask, "out_mask")?;
        let seg = &non_null(segmenter, "segmenter")?.0;
        let img = &non_null(image, "image")?.0;
        *out = boxed(SlabsegMask(segment_image(seg, img)?));
        Ok(())
    })
}

/// Reads a mask PNG. `spacing_mm <= 0` takes the spacing from a sidecar if present.
#[no_mangle]
pub extern "C" fn slabseg_mask_read(
    path: *const c_char,
    spacing_mm: f64,
    out_mask: *mut *mut SlabsegMask,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_mask, "out_mask")?;
        let path = path_arg(path, "path")?;
        let spacing = spacing_arg(&path, spacing_mm)?;
        *out = boxed(SlabsegMask(read_mask(&path, spacing)?));
        Ok(())
    })
}

/// Height and width; either output pointer may be null.
#[no_mangle]
pub extern "C" fn slabseg_mask_dims(
    mask: *const SlabsegMask,
    out_height: *mut usize,
    out_width: *mut usize,
) -> SlabsegStatus {
    guard(|| {
        let m = &non_null(mask, "mask")?.0;
        // SAFETY: nullable output pointers.
        unsafe {
            if let Some(h) = out_height.as_mut() {
                *h = m.height();
            }
            if let Some(w) = out_width.as_mut() {
                *w = m.width();
            }
        }
        Ok(())
    })
}

/// Copies the mask row-major as 0/1 bytes into `buffer` of `len` bytes.
#[no_mangle]
pub extern "C" fn slabseg_mask_copy(mask: *const SlabsegMask, buffer: *mut u8, len: usize) -> SlabsegStatus {
    guard(|| {
        let m = &non_null(mask, "mask")?.0;
        let n = m.height() * m.width();
        if len < n {
            return Err(Failure(
                SlabsegStatus::BufferTooSmall,
                format!("buffer holds {len} bytes, mask needs {n}"),
            ));
        }
        if buffer.is_null() {
            return Err(Failure(SlabsegStatus::NullPointer, "buffer is null".into()));
        }
        // SAFETY: `buffer` is writable for `len >= n` bytes.
        let dst = unsafe { std::slice::from_raw_parts_mut(buffer, n) };
        for (d, &b) in dst.iter_mut().zip(m.bits()) {
            *d = u8::from(b);
        }
        Ok(())
    })
}

/// Writes the mask PNG, plus a spacing sidecar when the mask is calibrated.
#[no_mangle]
pub extern "C" fn slabseg_mask_write(mask: *const SlabsegMask, path: *const c_char) -> SlabsegStatus {
    guard(|| {
        let m = &non_null(mask, "mask")?.0;
        let path = path_arg(path, "path")?;
        write_mask(&path, m)?;
        if let Some(s) = m.spacing() {
            write_spacing(&sidecar_path(&path), s)?;
        }
        Ok(())
    })
}

/// Releases a mask; null is ignored.
#[no_mangle]
pub extern "C" fn slabseg_mask_free(mask: *mut SlabsegMask) {
    if !mask.is_null() {
        // SAFETY: `mask` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(mask) });
    }
}

/// Banded Dice, ASSD and HD95 of `prediction` against `reference`.
#[no_mangle]
pub extern "C" fn slabseg_evaluate(
    prediction: *const SlabsegMask,
    reference: *const SlabsegMask,
    band_mm: f64,
    threshold_mm: f64,
    out_report: *mut SlabsegReport,
) -> SlabsegStatus {
    guard(|| {
        let out = out_ptr(out_report, "out_report")?;
        let pred = &non_null(prediction, "prediction")?.0;
        let reference = &non_null(reference, "reference")?.0;
        let r = evaluate_pair("", pred, reference, band_mm, threshold_mm)?;
        *out = SlabsegReport {
            dice: r.dice,
            assd_mm: r.assd.unwrap_or(f64::NAN),
            hd95_mm: r.hd95.unwrap_or(f64::NAN),
            outlier: u8::from(r.outlier),
        };
        Ok(())
    })
}
