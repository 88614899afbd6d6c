use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetDescriptor, SceneSample, POINT_DIM};
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraRig, SurroundLayout, Vec3};

/// Recipe for the random box scenes shared by every dataset of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub camera: SurroundLayout,
    pub image_channels: usize,
    /// Inclusive range of boxes per frame.
    pub box_count: [usize; 2],
    pub box_length: [f64; 2],
    pub box_width: [f64; 2],
    pub box_height: [f64; 2],
    /// Distance of box centres from the ego origin, metres.
    pub placement_radius: [f64; 2],
    pub lidar_height: f64,
    pub lidar_beams: usize,
    /// Lowest and highest beam elevation, radians.
    pub lidar_elevation: [f64; 2],
    pub lidar_azimuths: usize,
    pub lidar_range: f64,
    /// Depth at which rendered shading fades to its minimum.
    pub shade_range: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            camera: SurroundLayout::default(),
            image_channels: 1,
            box_count: [2, 4],
            box_length: [1.2, 2.4],
            box_width: [0.8, 1.6],
            box_height: [1.0, 2.0],
            placement_radius: [3.5, 7.0],
            lidar_height: 1.8,
            lidar_beams: 10,
            lidar_elevation: [-40f64.to_radians(), -4f64.to_radians()],
            lidar_azimuths: 96,
            lidar_range: 15.0,
            shade_range: 12.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        if self.box_count[0] > self.box_count[1]
            || !ordered(self.box_length)
            || !ordered(self.box_width)
            || !ordered(self.box_height)
            || !ordered(self.placement_radius)
        {
            return Err(Error::Config(
                "scene ranges must be non-negative and ordered".into(),
            ));
        }
        if self.image_channels == 0 || self.lidar_beams == 0 || self.lidar_azimuths == 0 {
            return Err(Error::Config("scene sensor sizes must be positive".into()));
        }
        if !(self.lidar_height > 0.0 && self.lidar_range > 0.0 && self.shade_range > 0.0) {
            return Err(Error::Config("scene distances must be positive".into()));
        }
        Ok(())
    }

    /// No boxes at all: ground-only frames.
    pub fn empty() -> Self {
        Self {
            box_count: [0, 0],
            ..Self::default()
        }
    }
}

/// An upright box resting on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 2],
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl SceneBox {
    fn local_of(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2]]
    }

    fn ego_of(&self, l: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * l[0] - s * l[1],
            self.center[1] + s * l[0] + c * l[1],
            l[2],
        ]
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let l = self.local_of([x, y, 0.0]);
        l[0].abs() <= 0.5 * self.length && l[1].abs() <= 0.5 * self.width
    }

    /// Entry distance of the ray `origin + t * dir` (slab test), if positive.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let o = self.local_of(origin);
        let (s, c) = self.yaw.sin_cos();
        let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
        let lo = [-0.5 * self.length, -0.5 * self.width, 0.0];
        let hi = [0.5 * self.length, 0.5 * self.width, self.height];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }

    /// `n × n` grid of points on each of the four sides and the top.
    pub fn surface_points(&self, n: usize) -> Vec<Vec3> {
        let (hl, hw, h) = (0.5 * self.length, 0.5 * self.width, self.height);
        let t = |i: usize| (i as f64 + 0.5) / n as f64;
        let mut out = Vec::with_capacity(5 * n * n);
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (t(i), t(j));
                let along = -hl + 2.0 * hl * a;
                let across = -hw + 2.0 * hw * a;
                let z = h * b;
                out.push([along, -hw, z]);
                out.push([along, hw, z]);
                out.push([-hl, across, z]);
                out.push([hl, across, z]);
                out.push([along, -hw + 2.0 * hw * b, h]);
            }
        }
        out.into_iter().map(|l| self.ego_of(l)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Ground,
    Box(usize),
}

/// Nearest hit of a ray against the ground plane and all boxes.
fn cast(boxes: &[SceneBox], origin: Vec3, dir: Vec3, max_t: f64) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    if dir[2] < -1e-12 {
        let t = -origin[2] / dir[2];
        if t > 0.0 && t <= max_t {
            best = Some((t, Surface::Ground));
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = b.intersect(origin, dir) {
            if t <= max_t && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Surface::Box(i)));
            }
        }
    }
    best
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn random_boxes<R: Rng + ?Sized>(scene: &SceneParams, rng: &mut R) -> Vec<SceneBox> {
    let n = rng.random_range(scene.box_count[0]..=scene.box_count[1]);
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n);
    for _ in 0..n {
        // a few tries to avoid overlapping footprints; keep the last draw otherwise
        let mut candidate = None;
        for _ in 0..16 {
            let r = uniform(rng, scene.placement_radius);
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let b = SceneBox {
                center: [r * az.cos(), r * az.sin()],
                yaw: rng.random_range(0.0..std::f64::consts::PI),
                length: uniform(rng, scene.box_length),
                width: uniform(rng, scene.box_width),
                height: uniform(rng, scene.box_height),
            };
            let clear = boxes.iter().all(|o| {
                let d = ((o.center[0] - b.center[0]).powi(2) + (o.center[1] - b.center[1]).powi(2))
                    .sqrt();
                d > 0.5 * (o.length.hypot(o.width) + b.length.hypot(b.width))
            });
            candidate = Some(b);
            if clear {
                break;
            }
        }
        boxes.extend(candidate);
    }
    boxes
}

/// Spinning LiDAR at `(0, 0, lidar_height)`: one return per beam and
/// azimuth that hits something within range, jittered by `noise`.
pub fn scan_lidar<R: Rng + ?Sized>(
    boxes: &[SceneBox],
    scene: &SceneParams,
    noise: f64,
    rng: &mut R,
) -> Vec<f32> {
    let origin = [0.0, 0.0, scene.lidar_height];
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let [e0, e1] = scene.lidar_elevation;
    let mut out = Vec::new();
    for b in 0..scene.lidar_beams {
        let el = if scene.lidar_beams == 1 {
            e0
        } else {
            e0 + (e1 - e0) * b as f64 / (scene.lidar_beams - 1) as f64
        };
        // each beam starts its sweep at a random phase
        let phase: f64 = rng.random();
        for a in 0..scene.lidar_azimuths {
            let az = std::f64::consts::TAU * (a as f64 + phase) / scene.lidar_azimuths as f64;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some((t, surf)) = cast(boxes, origin, dir, scene.lidar_range) else {
                continue;
            };
            let intensity = match surf {
                Surface::Ground => 0.2,
                Surface::Box(i) => 0.6 + 0.1 * (i % 3) as f64,
            };
            for k in 0..3 {
                let v = origin[k] + t * dir[k] + jitter.sample(rng);
                out.push(v as f32);
            }
            out.push(intensity as f32);
        }
    }
    out
}

/// Depth-shaded renders through `rig`: boxes in `[0.5, 1]`, ground in
/// `[0, 0.3]`, sky 0, plus clamped Gaussian noise. Returns the buffer in
/// `[cameras, H, W, channels]` order.
pub fn render_images<R: Rng + ?Sized>(
    boxes: &[SceneBox],
    rig: &CameraRig,
    scene: &SceneParams,
    noise: f64,
    rng: &mut R,
) -> Vec<f32> {
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let ch = scene.image_channels;
    let mut out = Vec::new();
    for cam in &rig.cameras {
        let origin = cam.center();
        for v in 0..cam.height {
            for u in 0..cam.width {
                // ray parameter equals camera depth for a depth-1 direction
                let p1 = cam.back_project(u as f64 + 0.5, v as f64 + 0.5, 1.0);
                let dir = [p1[0] - origin[0], p1[1] - origin[1], p1[2] - origin[2]];
                let fade = |t: f64| (1.0 - t / scene.shade_range).max(0.0);
                let shade = match cast(boxes, origin, dir, f64::INFINITY) {
                    Some((t, Surface::Box(_))) => 0.5 + 0.5 * fade(t),
                    Some((t, Surface::Ground)) => 0.3 * fade(t),
                    None => 0.0,
                };
                for _ in 0..ch {
                    let px = (shade + jitter.sample(rng)).clamp(0.0, 1.0);
                    out.push(px as f32);
                }
            }
        }
    }
    out
}

/// One frame of `desc`; fully determined by the generator seed and frame id.
pub fn generate_frame(
    desc: &DatasetDescriptor,
    scene: &SceneParams,
    frame_id: u64,
) -> Result<SceneSample> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(desc.generator_seed);
    rng.set_stream(frame_id);
    let rig = CameraRig::surround(&scene.camera, &[])?;
    let offsets = desc.yaw_offsets(rig.camera_count());
    let capture = rig.with_yaw_offsets(&offsets)?;
    let boxes = random_boxes(scene, &mut rng);
    let points = scan_lidar(&boxes, scene, desc.lidar_noise, &mut rng);
    let images = render_images(&boxes, &capture, scene, desc.image_noise, &mut rng);
    debug_assert_eq!(points.len() % POINT_DIM, 0);
    let sample = SceneSample {
        dataset_id: desc.dataset_id,
        frame_id,
        points,
        image_shape: [
            rig.camera_count(),
            scene.camera.height,
            scene.camera.width,
            scene.image_channels,
        ],
        images,
        rig,
        capture_yaw_offsets: offsets,
        boxes,
    };
    sample.validate()?;
    Ok(sample)
}

/// Fraction of box surface points that land inside the image of the camera
/// whose optical axis points closest to them (in azimuth).
pub fn visible_fraction(boxes: &[SceneBox], rig: &CameraRig, per_face: usize) -> f64 {
    let (mut total, mut inside) = (0usize, 0usize);
    for b in boxes {
        for p in b.surface_points(per_face) {
            let best = rig
                .cameras
                .iter()
                .max_by(|a, c| {
                    let score = |cam: &crate::geometry::Camera| {
                        let o = cam.center();
                        let f = cam.ego_to_camera[2];
                        let (dx, dy) = (p[0] - o[0], p[1] - o[1]);
                        (f[0] * dx + f[1] * dy)
                            / dx.hypot(dy).max(1e-12)
                            / f[0].hypot(f[1]).max(1e-12)
                    };
                    score(a).total_cmp(&score(c))
                })
                .expect("rig has cameras");
            total += 1;
            if let Some((u, v, _)) = best.project(p) {
                if best.in_image(u, v) {
                    inside += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        inside as f64 / total as f64
    }
}

/// Per-cell occupancy: any of a 3 × 3 set of sub-cell samples falls inside
/// a box footprint.
pub fn occupancy_labels(boxes: &[SceneBox], grid: &BevGridSpec) -> Vec<bool> {
    let (dx, dy) = grid.cell_size();
    (0..grid.cell_count())
        .map(|cell| {
            let (cx, cy) = grid.cell_center(cell);
            (0..9).any(|s| {
                let ox = ((s / 3) as f64 - 1.0) * dx / 3.0;
                let oy = ((s % 3) as f64 - 1.0) * dy / 3.0;
                boxes.iter().any(|b| b.contains_xy(cx + ox, cy + oy))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_hits_box_face() {
        let b = SceneBox {
            center: [5.0, 0.0],
            yaw: 0.0,
            length: 2.0,
            width: 2.0,
            height: 1.0,
        };
        let t = b.intersect([0.0, 0.0, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert!(b.intersect([0.0, 0.0, 1.5], [1.0, 0.0, 0.0]).is_none());
        assert!(b.intersect([0.0, 0.0, 0.5], [-1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn rotated_footprint() {
        let b = SceneBox {
            center: [0.0, 0.0],
            yaw: std::f64::consts::FRAC_PI_2,
            length: 4.0,
            width: 1.0,
            height: 1.0,
        };
        assert!(b.contains_xy(0.0, 1.9));
        assert!(!b.contains_xy(1.9, 0.0));
    }

    #[test]
    fn ground_only_scene_has_no_box_shading() {
        let scene = SceneParams::empty();
        let desc = DatasetDescriptor::new(0, 1, 1);
        let s = generate_frame(&desc, &scene, 0).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.point_count() > 0);
        assert!(s.points.chunks(4).all(|p| p[3] == 0.2));
        // ground shading tops out at 0.3 before noise
        let over = s.images.iter().filter(|&&v| v > 0.45).count();
        assert_eq!(over, 0);
    }
}
