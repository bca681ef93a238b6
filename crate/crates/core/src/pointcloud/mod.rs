//! Point clouds, cameras and image rasters: file formats plus the
//! projection of a global LiDAR cloud into per-image colorized frames.

pub mod camera;
pub mod colorize;
pub mod images;
pub mod ply;

use std::path::Path;

use nalgebra::Vector3;

pub use camera::{CameraEntry, CameraError, CameraModel, Intrinsics};
pub use colorize::{
    colorize_frames, lidar_depth_normal_images, ColorizeError, ColorizeParams, LidarSupervision,
};
pub use ply::{PlyEncoding, PlyError};

use crate::geometry::luma;
use ply::ScalarType;

/// A world-frame LiDAR point with sampled colour and its gray level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorizedPoint {
    pub p: Vector3<f64>,
    pub rgb: Vector3<f64>,
    pub g: f64,
}

impl ColorizedPoint {
    pub fn new(p: Vector3<f64>, rgb: Vector3<f64>) -> Self {
        Self { p, rgb, g: luma(&rgb) }
    }
}

/// The colorized points one camera sees.
#[derive(Debug, Clone)]
pub struct FrameCloud {
    pub frame_id: usize,
    pub points: Vec<ColorizedPoint>,
    pub camera: CameraModel,
    /// Set when no point of the global cloud was visible in this camera.
    pub no_visible_points: bool,
}

fn color_columns(table: &ply::VertexTable) -> Result<[Vec<f64>; 3], PlyError> {
    let names: [(&str, &str, &str); 2] = [("red", "green", "blue"), ("r", "g", "b")];
    for (r, g, b) in names {
        if table.has(r) && table.has(g) && table.has(b) {
            let cols = table.require(&[r, g, b])?;
            let full_scale = match table.property_type(r) {
                Some(ScalarType::U8) => 255.0,
                Some(ScalarType::U16) => 65535.0,
                Some(ScalarType::F32 | ScalarType::F64) => 1.0,
                _ => {
                    return Err(PlyError::Schema(format!(
                        "unsupported type for colour property `{r}`"
                    )))
                }
            };
            return Ok([0, 1, 2].map(|i| cols[i].iter().map(|v| v / full_scale).collect()));
        }
    }
    Err(PlyError::Schema(
        "missing colour properties (need red/green/blue or r/g/b)".into(),
    ))
}

/// Loads a coloured point cloud; gray is recomputed from RGB.
pub fn load_ply(path: &Path) -> Result<Vec<ColorizedPoint>, PlyError> {
    let table = ply::read_vertices(path)?;
    let xyz = table.require(&["x", "y", "z"])?;
    let [r, g, b] = color_columns(&table)?;
    let mut out = Vec::with_capacity(table.len);
    for i in 0..table.len {
        let p = Vector3::new(xyz[0][i], xyz[1][i], xyz[2][i]);
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(PlyError::Data(format!("vertex {i} has non-finite coordinates")));
        }
        out.push(ColorizedPoint::new(p, Vector3::new(r[i], g[i], b[i])));
    }
    Ok(out)
}

/// Loads only vertex positions (colour optional).
pub fn load_ply_positions(path: &Path) -> Result<Vec<Vector3<f64>>, PlyError> {
    let table = ply::read_vertices(path)?;
    let xyz = table.require(&["x", "y", "z"])?;
    Ok((0..table.len)
        .map(|i| Vector3::new(xyz[0][i], xyz[1][i], xyz[2][i]))
        .collect())
}

/// Saves as float x,y,z + uchar red,green,blue + float gray.
///
/// Coordinates are stored as 32-bit floats, so only f32-representable
/// positions round-trip exactly.
pub fn save_ply(points: &[ColorizedPoint], path: &Path, encoding: PlyEncoding) -> Result<(), PlyError> {
    let props = [
        ("x", ScalarType::F32),
        ("y", ScalarType::F32),
        ("z", ScalarType::F32),
        ("red", ScalarType::U8),
        ("green", ScalarType::U8),
        ("blue", ScalarType::U8),
        ("gray", ScalarType::F32),
    ];
    let quant = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round();
    ply::write_vertices(
        path,
        encoding,
        &[],
        &props,
        points.len(),
        points.iter().map(|pt| {
            vec![
                pt.p.x,
                pt.p.y,
                pt.p.z,
                quant(pt.rgb.x),
                quant(pt.rgb.y),
                quant(pt.rgb.z),
                pt.g,
            ]
        }),
    )
}

/// Saves bare positions as float x,y,z.
pub fn save_ply_positions(points: &[Vector3<f64>], path: &Path, encoding: PlyEncoding) -> Result<(), PlyError> {
    let props = [("x", ScalarType::F32), ("y", ScalarType::F32), ("z", ScalarType::F32)];
    ply::write_vertices(
        path,
        encoding,
        &[],
        &props,
        points.len(),
        points.iter().map(|p| vec![p.x, p.y, p.z]),
    )
}
