use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat4 = [[f64; 4]; 4];
pub type Vec3 = [f64; 3];

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One camera: intrinsics, image size, and the rigid ego→camera transform.
///
/// Ego frame is x-forward, y-left, z-up. Camera frame is z-forward,
/// x-right, y-down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub ego_to_camera: Mat4,
}

/// A set of cameras mounted on one vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

/// Horizontal-looking surround rig layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurroundLayout {
    pub camera_count: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view per camera, radians.
    pub hfov: f64,
    /// Vertical field of view, radians.
    pub vfov: f64,
    pub mount_height: f64,
    /// Forward offset of each camera from the ego origin along its yaw.
    pub mount_radius: f64,
}

impl Default for SurroundLayout {
    fn default() -> Self {
        Self {
            camera_count: 6,
            width: 16,
            height: 8,
            hfov: 70f64.to_radians(),
            vfov: 90f64.to_radians(),
            mount_height: 1.6,
            mount_radius: 0.5,
        }
    }
}

impl Camera {
    /// Camera at `position` (ego frame) looking horizontally at azimuth `yaw`
    /// (counter-clockwise from ego +x).
    pub fn looking_at_yaw(
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        yaw: f64,
        position: Vec3,
    ) -> Self {
        let (s, c) = yaw.sin_cos();
        // columns: camera x (right), y (down), z (forward) expressed in ego
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let fwd = [c, s, 0.0];
        let axes = [right, down, fwd];
        let mut m = [[0.0; 4]; 4];
        for (r, axis) in axes.iter().enumerate() {
            m[r][..3].copy_from_slice(axis);
            m[r][3] = -dot(axis, &position);
        }
        m[3][3] = 1.0;
        Self {
            intrinsics,
            width,
            height,
            ego_to_camera: m,
        }
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            row.copy_from_slice(&self.ego_to_camera[i][..3]);
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k.fx, k.fy
            )));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    return Err(Error::Config(
                        "extrinsic rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        if (det3(&r) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "extrinsic rotation has determinant != +1".into(),
            ));
        }
        let last = self.ego_to_camera[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config(
                "extrinsic is not a homogeneous rigid transform".into(),
            ));
        }
        Ok(())
    }

    pub fn ego_to_cam(&self, p: Vec3) -> Vec3 {
        let m = &self.ego_to_camera;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    pub fn cam_to_ego(&self, p: Vec3) -> Vec3 {
        // inverse of [R | t] is [R^T | -R^T t]
        let m = &self.ego_to_camera;
        let q = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = m[0][j] * q[0] + m[1][j] * q[1] + m[2][j] * q[2];
        }
        out
    }

    /// Pixel coordinates and depth, or `None` behind the camera.
    pub fn project(&self, p_ego: Vec3) -> Option<(f64, f64, f64)> {
        let [x, y, z] = self.ego_to_cam(p_ego);
        if z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * x / z + k.cx, k.fy * y / z + k.cy, z))
    }

    /// Ego-frame point seen at pixel `(u, v)` with camera-frame depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let pc = [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth];
        self.cam_to_ego(pc)
    }

    /// Camera centre in ego coordinates.
    pub fn center(&self) -> Vec3 {
        self.cam_to_ego([0.0; 3])
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    /// Evenly spaced surround rig; `yaw_offsets` (one per camera, or empty)
    /// rotates individual mounts away from their nominal azimuth.
    pub fn surround(layout: &SurroundLayout, yaw_offsets: &[f64]) -> Result<Self> {
        if layout.camera_count == 0 {
            return Err(Error::Config("camera_count must be positive".into()));
        }
        if !yaw_offsets.is_empty() && yaw_offsets.len() != layout.camera_count {
            return Err(Error::Config(format!(
                "{} yaw offsets for {} cameras",
                yaw_offsets.len(),
                layout.camera_count
            )));
        }
        let intrinsics = Intrinsics {
            fx: 0.5 * layout.width as f64 / (0.5 * layout.hfov).tan(),
            fy: 0.5 * layout.height as f64 / (0.5 * layout.vfov).tan(),
            cx: 0.5 * layout.width as f64,
            cy: 0.5 * layout.height as f64,
        };
        let cameras = (0..layout.camera_count)
            .map(|i| {
                let nominal = std::f64::consts::TAU * i as f64 / layout.camera_count as f64;
                let (s, c) = nominal.sin_cos();
                let pos = [
                    layout.mount_radius * c,
                    layout.mount_radius * s,
                    layout.mount_height,
                ];
                let yaw = nominal + yaw_offsets.get(i).copied().unwrap_or(0.0);
                Camera::looking_at_yaw(intrinsics, layout.width, layout.height, yaw, pos)
            })
            .collect();
        Self::new(cameras)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("rig has no cameras".into()));
        }
        self.cameras.iter().try_for_each(Camera::validate)
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, index: usize) -> Result<&Camera> {
        self.cameras.get(index).ok_or_else(|| {
            Error::Contract(format!(
                "camera index {index} out of range for {}-camera rig",
                self.cameras.len()
            ))
        })
    }

    /// Projects an ego point into camera `cam`: `(u, v, depth)` or `None`
    /// when the point lies behind that camera.
    pub fn project_point(&self, cam: usize, p_ego: Vec3) -> Result<Option<(f64, f64, f64)>> {
        Ok(self.camera(cam)?.project(p_ego))
    }

    /// Same rig with each camera additionally yawed about its own vertical
    /// axis by `offsets[i]`.
    pub fn with_yaw_offsets(&self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.cameras.len() {
            return Err(Error::Config(format!(
                "{} yaw offsets for {} cameras",
                offsets.len(),
                self.cameras.len()
            )));
        }
        let cameras = self
            .cameras
            .iter()
            .zip(offsets)
            .map(|(cam, &dyaw)| {
                let center = cam.center();
                // rotate the camera's axes about ego z by dyaw
                let (s, c) = dyaw.sin_cos();
                let mut m = cam.ego_to_camera;
                for row in m.iter_mut().take(3) {
                    let (ax, ay) = (row[0], row[1]);
                    row[0] = c * ax - s * ay;
                    row[1] = s * ax + c * ay;
                }
                for row in m.iter_mut().take(3) {
                    row[3] = -(row[0] * center[0] + row[1] * center[1] + row[2] * center[2]);
                }
                Camera {
                    ego_to_camera: m,
                    ..cam.clone()
                }
            })
            .collect();
        Self::new(cameras)
    }
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Camera::looking_at_yaw(intr(), 100, 100, 0.3, [0.2, -0.1, 1.5]);
        let (s, c) = 0.3f64.sin_cos();
        let p = [0.2 + 5.0 * c, -0.1 + 5.0 * s, 1.5];
        let (u, v, d) = cam.project(p).unwrap();
        assert!((u - 50.0).abs() < 1e-9 && (v - 50.0).abs() < 1e-9);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_matrix_oracle() {
        // forward camera at the origin; ego (10, 1, 0) is 10 m ahead, 1 m left
        let cam = Camera::looking_at_yaw(intr(), 100, 100, 0.0, [0.0; 3]);
        let p = [10.0, 1.0, 0.0];
        // independent oracle: K [R|t] [p;1] with R built from axis columns
        let e = cam.ego_to_camera;
        let ph = [p[0], p[1], p[2], 1.0];
        let pc: Vec<f64> = (0..3)
            .map(|i| (0..4).map(|j| e[i][j] * ph[j]).sum())
            .collect();
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let uvw: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| k[i][j] * pc[j]).sum())
            .collect();
        let (u, v, d) = cam.project(p).unwrap();
        assert!((u - uvw[0] / uvw[2]).abs() < 1e-12);
        assert!((v - uvw[1] / uvw[2]).abs() < 1e-12);
        assert!((u - 40.0).abs() < 1e-12 && (v - 50.0).abs() < 1e-12 && (d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_absent() {
        let cam = Camera::looking_at_yaw(intr(), 100, 100, 0.0, [0.0; 3]);
        assert!(cam.project([-3.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn out_of_range_camera_index() {
        let rig = CameraRig::surround(&SurroundLayout::default(), &[]).unwrap();
        assert!(rig.project_point(6, [1.0, 0.0, 0.0]).is_err());
        assert!(rig.project_point(0, [5.0, 0.0, 1.6]).unwrap().is_some());
    }

    #[test]
    fn validation_catches_bad_rotation() {
        let mut cam = Camera::looking_at_yaw(intr(), 100, 100, 0.0, [0.0; 3]);
        cam.ego_to_camera[0][0] = 2.0;
        assert!(cam.validate().is_err());
        let mut cam = Camera::looking_at_yaw(intr(), 100, 100, 0.0, [0.0; 3]);
        cam.intrinsics.fx = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn yaw_offsets_match_direct_construction() {
        let layout = SurroundLayout::default();
        let offs: Vec<f64> = (0..6).map(|i| 0.05 * i as f64 - 0.1).collect();
        let direct = CameraRig::surround(&layout, &offs).unwrap();
        let rotated = CameraRig::surround(&layout, &[])
            .unwrap()
            .with_yaw_offsets(&offs)
            .unwrap();
        for (a, b) in direct.cameras.iter().zip(&rotated.cameras) {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((a.ego_to_camera[i][j] - b.ego_to_camera[i][j]).abs() < 1e-12);
                }
            }
        }
    }
}
