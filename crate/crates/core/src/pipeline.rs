//! In-memory composition of the stages: colorize, build the GMM map,
//! derive LiDAR supervision, initialize, train, sample and filter.

use nalgebra::Vector3;

use crate::gmm::{GmmError, GmmMap, GmmParams, IntegrationReport};
use crate::pointcloud::colorize::lidar_depth_normal_images_with;
use crate::pointcloud::{colorize_frames, CameraModel, ColorizeError, ColorizeParams, FrameCloud};
use crate::raster::{Mask, RgbImage};
use crate::trainer::TrainView;

/// Integrates every frame in order, then freezes the map.
pub fn build_map(frames: &[FrameCloud], params: &GmmParams) -> Result<(GmmMap, Vec<IntegrationReport>), GmmError> {
    let mut map = GmmMap::new(params.voxel_size);
    let mut reports = Vec::with_capacity(frames.len());
    for f in frames {
        let r = map.integrate_frame(f, params)?;
        log::info!(
            "frame {}: {} points, {} effective, {} new components",
            r.frame_id,
            r.input_points,
            r.effective(),
            r.new_components
        );
        reports.push(r);
    }
    map.freeze();
    Ok((map, reports))
}

/// Pairs every frame with its image, sky mask and LiDAR depth/normals.
pub fn make_views(frames: &[FrameCloud], images: &[RgbImage], sky: &[Mask], normal_neighbors: usize) -> Vec<TrainView> {
    frames
        .iter()
        .zip(images)
        .zip(sky)
        .map(|((f, img), s)| TrainView {
            camera: f.camera.clone(),
            image: img.clone(),
            sky: s.clone(),
            lidar: lidar_depth_normal_images_with(f, normal_neighbors),
        })
        .collect()
}

/// Colorizes the cloud for every camera.
pub fn colorize(
    cloud: &[Vector3<f64>],
    cameras: &[CameraModel],
    images: &[RgbImage],
    params: &ColorizeParams,
) -> Result<Vec<FrameCloud>, ColorizeError> {
    colorize_frames(cloud, cameras, images, params)
}
