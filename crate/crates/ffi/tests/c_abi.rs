//! Exercises the C ABI from Rust and from a C program linked against the
//! generated header and static library.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use slabseg::raster::io::{sidecar_path, write_image, write_mask, write_spacing, BitDepth};
use slabseg::raster::{BinaryMask, RasterImage};
use slabseg_ffi::*;

fn last_error() -> String {
    let p = slabseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn ruler_spacing_and_errors() {
    let mut s = 0.0;
    assert_eq!(
        slabseg_ruler_spacing(10.0, 10.0, 210.0, 10.0, 20.0, &mut s),
        SlabsegStatus::Ok
    );
    assert_eq!(s, 0.1);
    assert!(slabseg_last_error().is_null());

    assert_eq!(
        slabseg_ruler_spacing(5.0, 5.0, 5.0, 5.0, 20.0, &mut s),
        SlabsegStatus::Geometry
    );
    assert!(last_error().contains("Degenerate"), "{}", last_error());
    assert_eq!(
        slabseg_ruler_spacing(0.0, 0.0, 1.0, 0.0, 1.0, ptr::null_mut()),
        SlabsegStatus::NullPointer
    );
}

#[test]
fn baseline_segmentation_and_evaluation() {
    // Bright square on a dark background at 0.5 mm/px.
    let (h, w) = (40usize, 48usize);
    let inside = |r: usize, c: usize| (10..30).contains(&r) && (12..36).contains(&c);
    let pixels: Vec<u8> = (0..h * w)
        .flat_map(|i| {
            let v = if inside(i / w, i % w) { 220 } else { 30 };
            [v, v, v]
        })
        .collect();
    let mut img = ptr::null_mut();
    assert_eq!(
        slabseg_image_from_u8(pixels.as_ptr(), h, w, 3, 0.5, &mut img),
        SlabsegStatus::Ok
    );
    let (mut ih, mut iw, mut ic) = (0, 0, 0);
    assert_eq!(slabseg_image_dims(img, &mut ih, &mut iw, &mut ic), SlabsegStatus::Ok);
    assert_eq!((ih, iw, ic), (h, w, 3));

    let mut seg = ptr::null_mut();
    assert_eq!(slabseg_segmenter_load(ptr::null(), 0, &mut seg), SlabsegStatus::Ok);
    let mut mask = ptr::null_mut();
    assert_eq!(slabseg_segment(seg, img, &mut mask), SlabsegStatus::Ok);

    let mut bytes = vec![0u8; h * w];
    assert_eq!(
        slabseg_mask_copy(mask, bytes.as_mut_ptr(), 10),
        SlabsegStatus::BufferTooSmall
    );
    assert_eq!(
        slabseg_mask_copy(mask, bytes.as_mut_ptr(), bytes.len()),
        SlabsegStatus::Ok
    );
    for (i, &b) in bytes.iter().enumerate() {
        assert_eq!(b == 1, inside(i / w, i % w), "pixel {i}");
    }

    let mut report = SlabsegReport {
        dice: 0.0,
        assd_mm: 0.0,
        hd95_mm: 0.0,
        outlier: 9,
    };
    assert_eq!(slabseg_evaluate(mask, mask, 10.0, 2.0, &mut report), SlabsegStatus::Ok);
    assert_eq!(
        (report.dice, report.assd_mm, report.hd95_mm, report.outlier),
        (1.0, 0.0, 0.0, 0)
    );

    slabseg_mask_free(mask);
    slabseg_segmenter_free(seg);
    slabseg_image_free(img);
    slabseg_image_free(ptr::null_mut());
}

#[test]
fn uncalibrated_image_reports_calibration_missing() {
    let pixels = [0u8; 16];
    let mut img = ptr::null_mut();
    assert_eq!(
        slabseg_image_from_u8(pixels.as_ptr(), 4, 4, 1, 0.0, &mut img),
        SlabsegStatus::Ok
    );
    let mut seg = ptr::null_mut();
    assert_eq!(slabseg_segmenter_load(ptr::null(), 0, &mut seg), SlabsegStatus::Ok);
    let mut mask = ptr::null_mut();
    assert_eq!(slabseg_segment(seg, img, &mut mask), SlabsegStatus::CalibrationMissing);
    assert!(mask.is_null());
    assert!(last_error().starts_with("CalibrationMissing"));
    slabseg_segmenter_free(seg);
    slabseg_image_free(img);
}

#[test]
fn bad_model_path_reports_model_load_failure() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("broken.slabseg");
    std::fs::write(&model, b"not a model").unwrap();
    let c = cpath(&model);
    let paths = [c.as_ptr()];
    let mut seg = ptr::null_mut();
    assert_eq!(
        slabseg_segmenter_load(paths.as_ptr(), 1, &mut seg),
        SlabsegStatus::ModelLoadFailure
    );
    assert!(seg.is_null());
}

#[test]
fn mask_file_round_trip_uses_sidecar_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let m = BinaryMask::from_fn(12, 9, Some(0.25), |r, c| r > c);
    write_mask(&path, &m).unwrap();
    write_spacing(&sidecar_path(&path), 0.25).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(
        slabseg_mask_read(cpath(&path).as_ptr(), 0.0, &mut handle),
        SlabsegStatus::Ok
    );
    let (mut h, mut w) = (0, 0);
    assert_eq!(slabseg_mask_dims(handle, &mut h, &mut w), SlabsegStatus::Ok);
    assert_eq!((h, w), (12, 9));
    let out = dir.path().join("copy.png");
    assert_eq!(slabseg_mask_write(handle, cpath(&out).as_ptr()), SlabsegStatus::Ok);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&path).unwrap());
    assert!(sidecar_path(&out).is_file());
    slabseg_mask_free(handle);

    let missing = dir.path().join("missing.png");
    assert_eq!(
        slabseg_mask_read(cpath(&missing).as_ptr(), 0.0, &mut handle),
        SlabsegStatus::Io
    );
}

#[test]
fn calibrate_file_writes_rectified_image() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.png");
    let img = RasterImage::filled(100, 80, 3, 0.5, None);
    write_image(&raw, &img, BitDepth::Eight).unwrap();
    let calib = dir.path().join("calib.json");
    std::fs::write(&calib, r#"{"mode":"ruler","p1":[0,0],"p2":[200,0],"distance_mm":20}"#).unwrap();
    let out = dir.path().join("rect.png");
    let mut spacing = 0.0;
    assert_eq!(
        slabseg_calibrate_file(
            cpath(&raw).as_ptr(),
            cpath(&calib).as_ptr(),
            cpath(&out).as_ptr(),
            0.5,
            10.0,
            &mut spacing
        ),
        SlabsegStatus::Ok
    );
    assert_eq!(spacing, 0.1);
    let mut rect = ptr::null_mut();
    assert_eq!(
        slabseg_image_read(cpath(&out).as_ptr(), 0.0, &mut rect),
        SlabsegStatus::Ok
    );
    let (mut h, mut w) = (0, 0);
    slabseg_image_dims(rect, &mut h, &mut w, ptr::null_mut());
    assert_eq!((h, w), (20, 16));
    slabseg_image_free(rect);

    let none = dir.path().join("none.json");
    assert_eq!(
        slabseg_calibrate_file(
            cpath(&raw).as_ptr(),
            cpath(&none).as_ptr(),
            cpath(&out).as_ptr(),
            0.5,
            10.0,
            ptr::null_mut()
        ),
        SlabsegStatus::CalibrationMissing
    );
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(slabseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// `target/<profile>` of the running test binary.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <string.h>
#include "slabseg.h"

int main(void) {
    double s = 0.0;
    if (slabseg_ruler_spacing(0, 0, 200, 0, 20, &s) != SLABSEG_STATUS_OK || fabs(s - 0.1) > 1e-15) return 1;
    if (slabseg_ruler_spacing(1, 1, 1, 1, 20, &s) != SLABSEG_STATUS_GEOMETRY) return 2;
    if (slabseg_last_error() == NULL) return 3;

    unsigned char px[16 * 16];
    for (int i = 0; i < 256; i++) px[i] = ((i / 16) >= 4 && (i / 16) < 12 && (i % 16) >= 4 && (i % 16) < 12) ? 200 : 20;
    SlabsegImage *img = NULL;
    SlabsegSegmenter *seg = NULL;
    SlabsegMask *mask = NULL;
    if (slabseg_image_from_u8(px, 16, 16, 1, 0.5, &img) != SLABSEG_STATUS_OK) return 4;
    if (slabseg_segmenter_load(NULL, 0, &seg) != SLABSEG_STATUS_OK) return 5;
    if (slabseg_segment(seg, img, &mask) != SLABSEG_STATUS_OK) return 6;
    unsigned char bits[256];
    if (slabseg_mask_copy(mask, bits, sizeof bits) != SLABSEG_STATUS_OK) return 7;
    int count = 0;
    for (int i = 0; i < 256; i++) count += bits[i];
    if (count != 64) return 8;
    SlabsegReport r;
    if (slabseg_evaluate(mask, mask, 10.0, 2.0, &r) != SLABSEG_STATUS_OK || r.dice != 1.0) return 9;
    slabseg_mask_free(mask);
    slabseg_segmenter_free(seg);
    slabseg_image_free(img);
    printf("ok %s\n", slabseg_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_header_and_static_library() {
    let lib = profile_dir().join("libslabseg_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        format!("ok {}", env!("CARGO_PKG_VERSION"))
    );
}
