//! Camera/LiDAR geometry: pinhole projection, BEV voxelization, and
//! lift-splat projection of image features into the BEV grid.

mod bev;
mod camera;
mod lss;

pub use bev::{voxelize, BevGridSpec, DepthBins, Points};
pub use camera::{Camera, CameraRig, Intrinsics, Mat4, SurroundLayout, Vec3};
pub use lss::{
    lift_splat, lifted_points, splat_stacked, splat_targets, BevFeatureMap, FeatureLayout, Modality,
};
