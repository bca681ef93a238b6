//! PNG rasters and the flat float depth format (`LIGSDEPT`).

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::raster::{GrayImage, Mask, Raster, RgbImage};

pub const DEPTH_MAGIC: &[u8; 8] = b"LIGSDEPT";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn codec(path: &Path, source: image::ImageError) -> ImageError {
    ImageError::Codec {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage, ImageError> {
    let img = image::open(path).map_err(|e| codec(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0)
        .collect();
    Ok(Raster::from_vec(w as usize, h as usize, data))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(img.len() * 3);
    for c in &img.data {
        buf.extend_from_slice(&[to_u8(c.x), to_u8(c.y), to_u8(c.z)]);
    }
    image::save_buffer(
        path,
        &buf,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| codec(path, e))
}

/// Nonzero pixels are `true`.
pub fn load_mask_png(path: &Path) -> Result<Mask, ImageError> {
    let img = image::open(path).map_err(|e| codec(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_vec(
        w as usize,
        h as usize,
        img.pixels().map(|p| p[0] > 0).collect(),
    ))
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<(), ImageError> {
    let buf: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer(
        path,
        &buf,
        mask.width as u32,
        mask.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| codec(path, e))
}

/// Camera-frame normals mapped from `[-1, 1]` to `[0, 1]` for viewing.
pub fn normal_to_rgb(normals: &RgbImage) -> RgbImage {
    Raster::from_vec(
        normals.width,
        normals.height,
        normals.data.iter().map(|n| (n.add_scalar(1.0)) * 0.5).collect(),
    )
}

/// `LIGSDEPT`, height u32, width u32, then f32 row-major, little-endian.
pub fn encode_depth(depth: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for &d in &depth.data {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<GrayImage, String> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err("bad depth magic".into());
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != w * h * 4 {
        return Err(format!("expected {} bytes of depth data, found {}", w * h * 4, body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Raster::from_vec(w, h, data))
}

pub fn save_depth(depth: &GrayImage, path: &Path) -> Result<(), ImageError> {
    std::fs::write(path, encode_depth(depth)).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_depth(path: &Path) -> Result<GrayImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_depth(&bytes).map_err(|reason| ImageError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip() {
        let d = Raster::from_vec(3, 2, vec![0.0, 1.5, 2.25, 3.0, 0.0, 7.5]);
        let bytes = encode_depth(&d);
        assert_eq!(&bytes[..8], b"LIGSDEPT");
        assert_eq!(decode_depth(&bytes).unwrap(), d);
        assert!(decode_depth(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_round_trip_of_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Raster::from_vec(
            2,
            1,
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(51.0, 102.0, 204.0) / 255.0],
        );
        save_rgb_png(&img, &path).unwrap();
        assert_eq!(load_rgb_png(&path).unwrap(), img);
        let mask = Raster::from_vec(2, 1, vec![true, false]);
        save_mask_png(&mask, &path).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), mask);
    }
}
