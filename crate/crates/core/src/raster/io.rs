//! PNG input/output and JSON spacing sidecars.
//!
//! Images are read as 8- or 16-bit grayscale/RGB (alpha is dropped). Masks are
//! single-channel PNGs where any non-zero sample is foreground and written as
//! 0/255. Spacing never comes from PNG metadata: it is read from a
//! `{"spacing_mm": s}` sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BinaryMask, RasterError, RasterImage};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: PNG decode failed: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{path}: PNG encode failed: {detail}")]
    Encode { path: PathBuf, detail: String },
    #[error("{path}: unsupported PNG layout: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("{path}: invalid sidecar: {detail}")]
    Sidecar { path: PathBuf, detail: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Decoded samples normalized to `[0, 1]`, interleaved.
struct Decoded {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<f64>,
}

fn decode(path: &Path) -> Result<Decoded, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| IoError::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let size = reader.output_buffer_size().ok_or_else(|| IoError::Decode {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (color, depth) = (info.color_type, info.bit_depth);
    let src_channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(IoError::Unsupported {
                path: path.to_path_buf(),
                detail: "indexed colour after expansion".into(),
            })
        }
    };
    let channels = if src_channels <= 2 { 1 } else { 3 };
    let height = info.height as usize;
    let width = info.width as usize;
    let values: Vec<f64> = match depth {
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(IoError::Unsupported {
                path: path.to_path_buf(),
                detail: format!("bit depth {other:?}"),
            })
        }
    };
    let samples = values
        .chunks_exact(src_channels)
        .flat_map(|px| px[..channels].to_vec())
        .collect();
    Ok(Decoded {
        height,
        width,
        channels,
        samples,
    })
}

/// Reads a PNG as a planar image with the given spacing.
pub fn read_image(path: &Path, spacing: Option<f64>) -> Result<RasterImage, IoError> {
    let d = decode(path)?;
    let n = d.height * d.width;
    let mut planar = vec![0.0; n * d.channels];
    for i in 0..n {
        for c in 0..d.channels {
            planar[c * n + i] = d.samples[i * d.channels + c];
        }
    }
    Ok(RasterImage::new(d.height, d.width, d.channels, planar, spacing)?)
}

/// Reads a single-channel mask; any non-zero sample is foreground.
pub fn read_mask(path: &Path, spacing: Option<f64>) -> Result<BinaryMask, IoError> {
    let d = decode(path)?;
    let bits = d.samples.chunks_exact(d.channels).map(|px| px[0] > 0.0).collect();
    Ok(BinaryMask::new(d.height, d.width, bits, spacing)?)
}

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: BitDepth,
    data: &[u8],
) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(&mut w, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(match depth {
        BitDepth::Eight => png::BitDepth::Eight,
        BitDepth::Sixteen => png::BitDepth::Sixteen,
    });
    let enc_err = |e: png::EncodingError| IoError::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    w.flush().map_err(io_err(path))
}

/// Writes an image, quantizing to the requested bit depth.
pub fn write_image(path: &Path, img: &RasterImage, depth: BitDepth) -> Result<(), IoError> {
    let n = img.height() * img.width();
    let ch = img.channels();
    let mut bytes = Vec::with_capacity(n * ch * 2);
    for i in 0..n {
        for c in 0..ch {
            let v = img.data()[c * n + i].clamp(0.0, 1.0);
            match depth {
                BitDepth::Eight => bytes.push((v * 255.0).round() as u8),
                BitDepth::Sixteen => bytes.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes()),
            }
        }
    }
    let color = if ch == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    };
    encode(path, img.width(), img.height(), color, depth, &bytes)
}

/// Writes a mask as an 8-bit 0/255 grayscale PNG.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), IoError> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        BitDepth::Eight,
        &bytes,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingSidecar {
    pub spacing_mm: f64,
}

/// `foo.png` -> `foo.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

pub fn write_spacing(path: &Path, spacing_mm: f64) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(&SpacingSidecar { spacing_mm }).expect("sidecar serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_spacing_file(path: &Path) -> Result<f64, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let sc: SpacingSidecar = serde_json::from_str(&text).map_err(|e| IoError::Sidecar {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if !(sc.spacing_mm > 0.0 && sc.spacing_mm.is_finite()) {
        return Err(IoError::Sidecar {
            path: path.to_path_buf(),
            detail: format!("spacing_mm = {}", sc.spacing_mm),
        });
    }
    Ok(sc.spacing_mm)
}

/// Finds the spacing for an image: its own `<stem>.json`, then `spacing.json`
/// in the same directory, then in the parent directory.
pub fn find_spacing(image: &Path) -> Result<Option<f64>, IoError> {
    let own = sidecar_path(image);
    let dir = image.parent().unwrap_or_else(|| Path::new("."));
    let mut candidates = vec![own, dir.join("spacing.json")];
    if let Some(parent) = dir.parent() {
        candidates.push(parent.join("spacing.json"));
    }
    for c in candidates {
        if c.is_file() {
            return read_spacing_file(&c).map(Some);
        }
    }
    Ok(None)
}

/// Reads an image together with its sidecar spacing, if any.
pub fn read_image_calibrated(path: &Path) -> Result<RasterImage, IoError> {
    let spacing = find_spacing(path)?;
    read_image(path, spacing)
}

pub fn read_mask_calibrated(path: &Path) -> Result<BinaryMask, IoError> {
    let spacing = find_spacing(path)?;
    read_mask(path, spacing)
}
