//! Raster file formats.
//!
//! * Depth as 16-bit single-channel PNG; `stored = round(meters * units_per_meter)`,
//!   0 = invalid.
//! * Depth and weight maps as a raw float32 raster: 16-byte little-endian
//!   header (`b"STFR"`, width u32, height u32, scale f32) followed by
//!   `width * height` f32 values; `meters = stored * scale`.
//! * RGB as 8-bit PNG, masks as 8-bit grayscale PNG (nonzero = inside).
//! * Intrinsics as a JSON object `{fx, fy, cx, cy, width, height}`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use thiserror::Error;

use crate::geometry::{is_valid_depth, CameraIntrinsics, DepthMap, GeometryError, Mask};

pub const FLOAT_RASTER_MAGIC: [u8; 4] = *b"STFR";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> RasterError + '_ {
    move |source| RasterError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> RasterError {
    RasterError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Float raster contents: dimensions, scale and raw stored values.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: u32,
    pub height: u32,
    pub scale: f32,
    pub values: Vec<f32>,
}

impl FloatRaster {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&FLOAT_RASTER_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN || bytes[..4] != FLOAT_RASTER_MAGIC {
            return Err("missing float raster header".into());
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let width = u32::from_le_bytes(word(4));
        let height = u32::from_le_bytes(word(8));
        let scale = f32::from_le_bytes(word(12));
        let n = width as usize * height as usize;
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(format!(
                "payload is {} bytes, expected {} for {width}x{height}",
                bytes.len() - HEADER_LEN,
                4 * n
            ));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(format!("invalid scale {scale}"));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            width,
            height,
            scale,
            values,
        })
    }
}

pub fn write_float_raster(path: &Path, raster: &FloatRaster) -> Result<(), RasterError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&raster.encode()).map_err(io_err(path))
}

pub fn read_float_raster(path: &Path) -> Result<FloatRaster, RasterError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    FloatRaster::decode(&bytes).map_err(|m| format_err(path, m))
}

/// Writes depth (meters) as a float raster with unit scale.
pub fn write_depth_f32(path: &Path, d: &DepthMap) -> Result<(), RasterError> {
    write_float_raster(
        path,
        &FloatRaster {
            width: d.width(),
            height: d.height(),
            scale: 1.0,
            values: d.values().to_vec(),
        },
    )
}

pub fn read_depth_f32(path: &Path) -> Result<DepthMap, RasterError> {
    let r = read_float_raster(path)?;
    let values = if r.scale == 1.0 {
        r.values
    } else {
        r.values.iter().map(|v| v * r.scale).collect()
    };
    Ok(DepthMap::new(r.width, r.height, values)?)
}

/// Writes depth as 16-bit PNG at `units_per_meter` (1000 = millimeters).
pub fn write_depth_png(path: &Path, d: &DepthMap, units_per_meter: f64) -> Result<(), RasterError> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(d.width(), d.height(), |c, r| {
        let z = d.raw(c, r) as f64;
        let s = if is_valid_depth(z) {
            (z * units_per_meter).round().clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        };
        Luma([s])
    });
    img.save(path).map_err(img_err(path))
}

pub fn read_depth_png(path: &Path, units_per_meter: f64) -> Result<DepthMap, RasterError> {
    let img = image::open(path).map_err(img_err(path))?.into_luma16();
    let (w, h) = img.dimensions();
    let values = img
        .into_raw()
        .into_iter()
        .map(|s| (s as f64 / units_per_meter) as f32)
        .collect();
    Ok(DepthMap::new(w, h, values)?)
}

/// Reads depth by extension: `.png` as 16-bit PNG, anything else as float raster.
pub fn read_depth(path: &Path, units_per_meter: f64) -> Result<DepthMap, RasterError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_depth_png(path, units_per_meter),
        _ => read_depth_f32(path),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, RasterError> {
    Ok(image::open(path).map_err(img_err(path))?.into_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), RasterError> {
    img.save(path).map_err(img_err(path))
}

pub fn read_mask(path: &Path) -> Result<Mask, RasterError> {
    let img = image::open(path).map_err(img_err(path))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::new(w, h, img.into_raw().into_iter().map(|p| p != 0).collect())?)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<(), RasterError> {
    let img = GrayImage::from_fn(m.width(), m.height(), |c, r| Luma([if m.get(c, r) { 255 } else { 0 }]));
    img.save(path).map_err(img_err(path))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, RasterError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}
