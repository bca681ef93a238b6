use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use super::{CameraModel, ColorizedPoint, FrameCloud};
use crate::geometry::{mean_and_covariance, SortedEigen3};
use crate::raster::{GrayImage, Mask, Raster, RgbImage};
use crate::spatial::{surface_cell_size, SpatialHash};

#[derive(Debug, Error)]
pub enum ColorizeError {
    #[error("camera {index}: image is {image_w}x{image_h} but camera expects {cam_w}x{cam_h}")]
    ImageSize {
        index: usize,
        image_w: usize,
        image_h: usize,
        cam_w: usize,
        cam_h: usize,
    },
    #[error("{cameras} cameras but {images} images")]
    Count { cameras: usize, images: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorizeParams {
    /// Points within this relative depth of the front-most point in their
    /// pixel stay visible.
    pub depth_tolerance: f64,
}

impl Default for ColorizeParams {
    fn default() -> Self {
        Self {
            depth_tolerance: 0.01,
        }
    }
}

struct Projected {
    index: usize,
    pixel: usize,
    z: f64,
}

fn project_visible(cloud: &[Vector3<f64>], camera: &CameraModel, tol: f64) -> Vec<Projected> {
    let w = camera.width();
    let mut hits = Vec::new();
    for (index, p) in cloud.iter().enumerate() {
        let pc = camera.to_camera(p);
        if let Some((x, y)) = camera.pixel_of(&pc) {
            hits.push(Projected {
                index,
                pixel: y * w + x,
                z: pc.z,
            });
        }
    }
    let mut zmin = vec![f64::INFINITY; w * camera.height()];
    for h in &hits {
        if h.z < zmin[h.pixel] {
            zmin[h.pixel] = h.z;
        }
    }
    hits.retain(|h| h.z <= zmin[h.pixel] * (1.0 + tol));
    hits
}

/// Projects the global cloud into every camera, keeping points that pass the
/// per-pixel z-buffer test, and samples their colour at the nearest pixel.
pub fn colorize_frames(
    global_cloud: &[Vector3<f64>],
    cameras: &[CameraModel],
    images: &[RgbImage],
    params: &ColorizeParams,
) -> Result<Vec<FrameCloud>, ColorizeError> {
    if cameras.len() != images.len() {
        return Err(ColorizeError::Count {
            cameras: cameras.len(),
            images: images.len(),
        });
    }
    for (index, (cam, img)) in cameras.iter().zip(images).enumerate() {
        if img.width != cam.width() || img.height != cam.height() {
            return Err(ColorizeError::ImageSize {
                index,
                image_w: img.width,
                image_h: img.height,
                cam_w: cam.width(),
                cam_h: cam.height(),
            });
        }
    }
    let frames = cameras
        .par_iter()
        .zip(images.par_iter())
        .enumerate()
        .map(|(frame_id, (camera, image))| {
            let hits = project_visible(global_cloud, camera, params.depth_tolerance);
            let points: Vec<ColorizedPoint> = hits
                .iter()
                .map(|h| ColorizedPoint::new(global_cloud[h.index], image.data[h.pixel]))
                .collect();
            let empty = points.is_empty();
            if empty {
                log::warn!("frame {frame_id}: no visible points");
            }
            FrameCloud {
                frame_id,
                points,
                camera: camera.clone(),
                no_visible_points: empty,
            }
        })
        .collect();
    Ok(frames)
}

/// LiDAR-derived depth and normal supervision for one frame.
#[derive(Debug, Clone)]
pub struct LidarSupervision {
    /// Camera-frame z of the nearest point per pixel; 0 where no point.
    pub depth: GrayImage,
    /// Unit camera-frame normals oriented toward the camera.
    pub normal: RgbImage,
    pub depth_mask: Mask,
    pub normal_mask: Mask,
}

/// Number of neighbours used for the per-point plane fit.
pub const NORMAL_NEIGHBORS: usize = 16;

pub fn lidar_depth_normal_images(frame: &FrameCloud) -> LidarSupervision {
    lidar_depth_normal_images_with(frame, NORMAL_NEIGHBORS)
}

pub fn lidar_depth_normal_images_with(frame: &FrameCloud, k: usize) -> LidarSupervision {
    let cam = &frame.camera;
    let (w, h) = (cam.width(), cam.height());
    let mut depth = Raster::filled(w, h, 0.0);
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for (i, pt) in frame.points.iter().enumerate() {
        let pc = cam.to_camera(&pt.p);
        if let Some((x, y)) = cam.pixel_of(&pc) {
            let idx = y * w + x;
            // Strict `<` keeps the lowest index on ties.
            if owner[idx].is_none() || pc.z < depth.data[idx] {
                depth.data[idx] = pc.z;
                owner[idx] = Some(i);
            }
        }
    }
    let depth_mask = Raster::from_vec(w, h, owner.iter().map(Option::is_some).collect());

    let positions: Vec<Vector3<f64>> = frame.points.iter().map(|p| p.p).collect();
    let mut normal = RgbImage::black(w, h);
    let mut normal_mask = Raster::filled(w, h, false);
    if positions.len() >= k.max(3) {
        let cell = surface_cell_size(&positions, k);
        let hash = SpatialHash::build(&positions, cell);
        let center = cam.center();
        let rot = cam.rotation_matrix();
        let normals: Vec<Option<Vector3<f64>>> = owner
            .par_iter()
            .map(|o| {
                let i = (*o)?;
                let nb = hash.knn(&positions, &positions[i], k, None);
                if nb.len() < k {
                    return None;
                }
                let (_, cov, _) =
                    mean_and_covariance(nb.iter().map(|n| &positions[n.index as usize]))?;
                let eig = SortedEigen3::new(&cov);
                if eig.values[1] <= 1e-12 * eig.values[2].max(1e-300) {
                    return None;
                }
                let mut n = eig.vector(0);
                if n.dot(&(center - positions[i])) < 0.0 {
                    n = -n;
                }
                Some(rot * n)
            })
            .collect();
        for (idx, n) in normals.into_iter().enumerate() {
            if let Some(n) = n {
                normal.data[idx] = n;
                normal_mask.data[idx] = true;
            }
        }
    }
    LidarSupervision {
        depth,
        normal,
        depth_mask,
        normal_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Intrinsics;
    use nalgebra::UnitQuaternion;

    fn identity_camera(w: usize, h: usize) -> CameraModel {
        CameraModel::new(
            Intrinsics {
                fx: 50.0,
                fy: 50.0,
                cx: 10.0,
                cy: 10.0,
                width: w,
                height: h,
            },
            UnitQuaternion::identity(),
            Vector3::zeros(),
        )
    }

    #[test]
    fn behind_camera_is_culled_and_red_is_sampled() {
        let cam = identity_camera(21, 21);
        let mut img = RgbImage::black(21, 21);
        *img.get_mut(10, 10) = Vector3::new(1.0, 0.0, 0.0);
        let cloud = vec![Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.0, 0.0, -2.0)];
        let frames = colorize_frames(&cloud, &[cam], &[img], &ColorizeParams::default()).unwrap();
        assert_eq!(frames[0].points.len(), 1);
        assert_eq!(frames[0].points[0].rgb, Vector3::new(1.0, 0.0, 0.0));
        assert!((frames[0].points[0].g - 0.299).abs() < 1e-12);
    }

    #[test]
    fn occluded_point_on_same_ray_is_dropped() {
        let cam = identity_camera(21, 21);
        let img = RgbImage::black(21, 21);
        let dir = Vector3::new(0.1, -0.05, 1.0);
        let cloud = vec![dir * 5.0, dir * 1.0];
        // Brute-force check: both project to the same pixel, near one wins.
        let a = cam.pixel_of(&cloud[0]).unwrap();
        let b = cam.pixel_of(&cloud[1]).unwrap();
        assert_eq!(a, b);
        let frames = colorize_frames(&cloud, &[cam], &[img], &ColorizeParams::default()).unwrap();
        assert_eq!(frames[0].points.len(), 1);
        assert_eq!(frames[0].points[0].p, cloud[1]);
    }

    #[test]
    fn empty_view_sets_warning_flag() {
        let cam = identity_camera(21, 21);
        let frames = colorize_frames(
            &[Vector3::new(0.0, 0.0, -1.0)],
            &[cam],
            &[RgbImage::black(21, 21)],
            &ColorizeParams::default(),
        )
        .unwrap();
        assert!(frames[0].no_visible_points);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let cam = identity_camera(21, 21);
        assert!(colorize_frames(&[], &[cam], &[RgbImage::black(20, 21)], &ColorizeParams::default()).is_err());
    }

    #[test]
    fn single_point_depth() {
        let cam = identity_camera(21, 21);
        let frame = FrameCloud {
            frame_id: 0,
            points: vec![ColorizedPoint::new(Vector3::new(0.0, 0.0, 2.0), Vector3::zeros())],
            camera: cam,
            no_visible_points: false,
        };
        let sup = lidar_depth_normal_images(&frame);
        assert_eq!(*sup.depth.get(10, 10), 2.0);
        assert!(*sup.depth_mask.get(10, 10));
        assert_eq!(sup.depth_mask.data.iter().filter(|&&m| m).count(), 1);
        assert_eq!(*sup.depth.get(0, 0), 0.0);
        // Too few neighbours for a plane fit.
        assert!(!sup.normal_mask.data.iter().any(|&m| m));
    }

    #[test]
    fn plane_normals_face_camera_and_depth_unprojects() {
        let cam = identity_camera(21, 21);
        let mut points = Vec::new();
        for i in -30..=30 {
            for j in -30..=30 {
                let p = Vector3::new(i as f64 * 0.02, j as f64 * 0.02, 3.0);
                points.push(ColorizedPoint::new(p, Vector3::zeros()));
            }
        }
        let frame = FrameCloud {
            frame_id: 0,
            points,
            camera: cam.clone(),
            no_visible_points: false,
        };
        let sup = lidar_depth_normal_images(&frame);
        let mut checked = 0;
        for y in 0..21 {
            for x in 0..21 {
                if *sup.normal_mask.get(x, y) {
                    let n = sup.normal.get(x, y);
                    assert!(n.dot(&Vector3::new(0.0, 0.0, -1.0)) > 1.0 - 1e-3);
                    checked += 1;
                }
                if *sup.depth_mask.get(x, y) {
                    // Half a pixel footprint at this depth.
                    let z = *sup.depth.get(x, y);
                    let back = cam.unproject(x as f64, y as f64, z);
                    let nearest = frame
                        .points
                        .iter()
                        .map(|p| (p.p - back).norm())
                        .fold(f64::INFINITY, f64::min);
                    assert!(nearest <= 0.5 * z / 50.0 * 2f64.sqrt() + 1e-12);
                }
            }
        }
        assert!(checked > 100);
    }
}
