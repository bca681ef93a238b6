//! Pinhole cameras and the whitespace-separated camera/intrinsics files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid camera: {0}")]
    Invalid(String),
}

/// Pinhole intrinsics; pixel centres sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }
}

/// Camera-from-world pose plus intrinsics: `x_cam = R * x_world + t`.
/// The camera looks down +z with +x right and +y down.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            intrinsics,
            rotation,
            translation,
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: &Vector3<f64>,
        target: &Vector3<f64>,
        up: &Vector3<f64>,
    ) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(up);
        if right.norm() < 1e-9 {
            right = crate::geometry::any_orthogonal(&forward);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // Rows of the camera-from-world rotation are the camera axes in world coordinates.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(CameraError::Invalid("focal lengths must be positive".into()));
        }
        if k.width == 0 || k.height == 0 {
            return Err(CameraError::Invalid("image size must be at least 1x1".into()));
        }
        if (self.rotation.quaternion().norm() - 1.0).abs() > 1e-9 {
            return Err(CameraError::Invalid("rotation quaternion is not unit".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_cam - self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Continuous pixel coordinates of a camera-frame point (z > 0 assumed).
    #[inline]
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy)
    }

    /// Nearest pixel of a camera-frame point, if it is in front of the camera
    /// and inside the image.
    pub fn pixel_of(&self, p_cam: &Vector3<f64>) -> Option<(usize, usize)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        let uv = self.project(p_cam);
        let x = (uv.x + 0.5).floor();
        let y = (uv.y + 0.5).floor();
        if x < 0.0 || y < 0.0 || x >= self.width() as f64 || y >= self.height() as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }

    /// Camera-frame ray direction through pixel coordinates `(x, y)`,
    /// scaled so that its z component is 1.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)
    }

    /// Back-projects a pixel at camera-frame depth `z` to world coordinates.
    pub fn unproject(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        self.to_world(&(self.ray(x, y) * z))
    }
}

/// One line of a camera file: image name plus camera-from-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEntry {
    pub image_name: String,
    pub camera: CameraModel,
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> CameraError {
    CameraError::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn read_text(path: &Path) -> Result<String, CameraError> {
    std::fs::read_to_string(path).map_err(|source| CameraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_numbers(path: &Path, line: usize, tokens: &[&str]) -> Result<Vec<f64>, CameraError> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad number `{t}`")))
        })
        .collect()
}

/// Reads `fx fy cx cy width height`.
pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, CameraError> {
    let text = read_text(path)?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(parse_err(path, i + 1, "expected `fx fy cx cy width height`"));
        }
        let v = parse_numbers(path, i + 1, &tokens)?;
        if v[4] < 1.0 || v[5] < 1.0 || v[4].fract() != 0.0 || v[5].fract() != 0.0 {
            return Err(parse_err(path, i + 1, "width/height must be positive integers"));
        }
        return Ok(Intrinsics {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
            width: v[4] as usize,
            height: v[5] as usize,
        });
    }
    Err(parse_err(path, 1, "no intrinsics line"))
}

/// Reads `image_name tx ty tz qx qy qz qw` lines (camera-from-world).
pub fn read_cameras(path: &Path, intrinsics: &Intrinsics) -> Result<Vec<CameraEntry>, CameraError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 8 {
            return Err(parse_err(path, i + 1, "expected `image_name tx ty tz qx qy qz qw`"));
        }
        let v = parse_numbers(path, i + 1, &tokens[1..])?;
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(parse_err(path, i + 1, format!("quaternion norm {norm} is not 1")));
        }
        let camera = CameraModel::new(
            *intrinsics,
            UnitQuaternion::from_quaternion(q),
            Vector3::new(v[0], v[1], v[2]),
        );
        camera
            .validate()
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(CameraEntry {
            image_name: tokens[0].to_string(),
            camera,
        });
    }
    Ok(out)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), CameraError> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, text).map_err(|source| CameraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_cameras(path: &Path, entries: &[CameraEntry]) -> Result<(), CameraError> {
    let mut text = String::new();
    for e in entries {
        let t = &e.camera.translation;
        let q = e.camera.rotation.quaternion();
        let _ = writeln!(
            text,
            "{} {} {} {} {} {} {} {}",
            e.image_name, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    std::fs::write(path, text).map_err(|source| CameraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
        }
    }

    #[test]
    fn look_at_points_forward() {
        let eye = Vector3::new(1.0, 2.0, 3.0);
        let target = Vector3::new(1.0, 5.0, 3.0);
        let cam = CameraModel::look_at(intr(), &eye, &target, &Vector3::z());
        let pc = cam.to_camera(&target);
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12);
        assert!((pc.z - 3.0).abs() < 1e-12);
        assert!((cam.center() - eye).norm() < 1e-12);
        // World up should map to image up (negative y).
        let above = cam.to_camera(&(target + Vector3::z()));
        assert!(above.y < 0.0);
    }

    #[test]
    fn unproject_inverts_projection() {
        let cam = CameraModel::look_at(intr(), &Vector3::zeros(), &Vector3::x(), &Vector3::z());
        let p = Vector3::new(4.0, 0.3, -0.2);
        let pc = cam.to_camera(&p);
        let uv = cam.project(&pc);
        let back = cam.unproject(uv.x, uv.y, pc.z);
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn camera_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = CameraModel::look_at(intr(), &Vector3::new(0.3, -1.0, 2.0), &Vector3::zeros(), &Vector3::z());
        let entries = vec![CameraEntry {
            image_name: "a.png".into(),
            camera: cam,
        }];
        write_intrinsics(&dir.path().join("k.txt"), &intr()).unwrap();
        write_cameras(&dir.path().join("c.txt"), &entries).unwrap();
        let k = read_intrinsics(&dir.path().join("k.txt")).unwrap();
        let back = read_cameras(&dir.path().join("c.txt"), &k).unwrap();
        assert_eq!(back[0].image_name, "a.png");
        assert!((back[0].camera.translation - entries[0].camera.translation).norm() < 1e-15);
        assert!(back[0].camera.rotation.angle_to(&entries[0].camera.rotation) < 1e-12);
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "img.png 0 0 0 0 0 0 2\n").unwrap();
        assert!(matches!(read_cameras(&p, &intr()), Err(CameraError::Parse { line: 1, .. })));
    }
}
