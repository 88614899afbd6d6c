//! Synthetic paired image/LiDAR frames, their on-disk container, dataset
//! manifests, and the mixed multi-dataset epoch schedule.

mod container;
mod scene;
mod schedule;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use container::{read_sample, write_sample, SAMPLE_MAGIC, SAMPLE_VERSION};
pub use scene::{
    generate_frame, occupancy_labels, render_images, scan_lidar, visible_fraction, SceneBox,
    SceneParams,
};
pub use schedule::{build_epoch_schedule, MixSchedule};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{CameraRig, Points};
use crate::tensor::Tensor;

/// One synthetic source with its own rig bias and sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub dataset_id: u32,
    pub name: String,
    pub frame_count: usize,
    pub repeat_times: usize,
    pub generator_seed: u64,
    /// Per-camera yaw offset of the capture rig, radians; empty means none.
    #[serde(default)]
    pub rig_bias: Vec<f64>,
    /// Std of Gaussian jitter on LiDAR coordinates, metres.
    #[serde(default = "default_lidar_noise")]
    pub lidar_noise: f64,
    /// Std of Gaussian pixel noise.
    #[serde(default = "default_image_noise")]
    pub image_noise: f64,
}

fn default_lidar_noise() -> f64 {
    0.02
}

fn default_image_noise() -> f64 {
    0.02
}

impl DatasetDescriptor {
    pub fn new(dataset_id: u32, frame_count: usize, repeat_times: usize) -> Self {
        Self {
            dataset_id,
            name: format!("synthetic-{dataset_id}"),
            frame_count,
            repeat_times,
            generator_seed: dataset_id as u64,
            rig_bias: Vec::new(),
            lidar_noise: default_lidar_noise(),
            image_noise: default_image_noise(),
        }
    }

    pub fn validate(&self, camera_count: usize) -> Result<()> {
        if self.repeat_times == 0 {
            return Err(Error::Config(format!(
                "dataset {}: repeat_times must be at least 1",
                self.dataset_id
            )));
        }
        if !self.rig_bias.is_empty() && self.rig_bias.len() != camera_count {
            return Err(Error::Config(format!(
                "dataset {}: {} rig_bias entries for {camera_count} cameras",
                self.dataset_id,
                self.rig_bias.len()
            )));
        }
        if !(self.lidar_noise >= 0.0 && self.image_noise >= 0.0) {
            return Err(Error::Config(format!(
                "dataset {}: negative noise",
                self.dataset_id
            )));
        }
        Ok(())
    }

    /// Capture yaw offsets, one per camera.
    pub fn yaw_offsets(&self, camera_count: usize) -> Vec<f64> {
        if self.rig_bias.is_empty() {
            vec![0.0; camera_count]
        } else {
            self.rig_bias.clone()
        }
    }
}

/// A JSON document listing the datasets to generate and the scene recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: Vec<DatasetDescriptor>,
    #[serde(default)]
    pub scene: SceneParams,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("manifest lists no datasets".into()));
        }
        self.scene.validate()?;
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.dataset_id) {
                return Err(Error::Config(format!(
                    "duplicate dataset id {}",
                    d.dataset_id
                )));
            }
            d.validate(self.scene.camera.camera_count)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn dataset(&self, id: u32) -> Result<&DatasetDescriptor> {
        self.datasets
            .iter()
            .find(|d| d.dataset_id == id)
            .ok_or(Error::UnknownDataset(id))
    }
}

/// One paired frame.
///
/// `rig` is the standardized rig shared by every dataset; the images were
/// rendered through that rig rotated by `capture_yaw_offsets`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub dataset_id: u32,
    pub frame_id: u64,
    /// `N × 4` rows of `x, y, z, intensity`.
    pub points: Vec<f32>,
    /// `[cameras, H, W, channels]`.
    pub image_shape: [usize; 4],
    pub images: Vec<f32>,
    pub rig: CameraRig,
    pub capture_yaw_offsets: Vec<f64>,
    pub boxes: Vec<SceneBox>,
}

pub const POINT_DIM: usize = 4;

impl SceneSample {
    pub fn point_count(&self) -> usize {
        self.points.len() / POINT_DIM
    }

    pub fn points(&self) -> Points {
        Points::new(POINT_DIM, self.points.iter().map(|&v| v as f64).collect()).expect("point rows")
    }

    pub fn images(&self) -> Tensor {
        Tensor::new(
            self.image_shape.to_vec(),
            self.images.iter().map(|&v| v as f64).collect(),
        )
        .expect("image shape")
    }

    /// The rig the images were actually rendered through.
    pub fn capture_rig(&self) -> Result<CameraRig> {
        self.rig.with_yaw_offsets(&self.capture_yaw_offsets)
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if !self.points.len().is_multiple_of(POINT_DIM) {
            return Err(Error::Format(
                "point buffer is not a whole number of rows".into(),
            ));
        }
        if self.images.len() != self.image_shape.iter().product::<usize>() {
            return Err(Error::Format(
                "image buffer does not match its shape".into(),
            ));
        }
        if self.image_shape[0] != self.rig.camera_count()
            || self.capture_yaw_offsets.len() != self.rig.camera_count()
        {
            return Err(Error::Format("camera count disagrees with the rig".into()));
        }
        if !self.images.iter().all(|v| v.is_finite()) || !self.points.iter().all(|v| v.is_finite())
        {
            return Err(Error::Format("non-finite sample payload".into()));
        }
        Ok(())
    }
}

pub fn frame_path(root: &Path, dataset_id: u32, frame_id: u64) -> PathBuf {
    root.join(format!("ds{dataset_id}"))
        .join(format!("frame_{frame_id:06}.bvs"))
}

/// Writes every frame of `desc` under `root`; returns the frame count.
pub fn generate_dataset(
    desc: &DatasetDescriptor,
    scene: &SceneParams,
    root: &Path,
    exec: Exec,
) -> Result<usize> {
    desc.validate(scene.camera.camera_count)?;
    fs::create_dir_all(root.join(format!("ds{}", desc.dataset_id)))?;
    let results = exec.map_range(desc.frame_count, |f| -> Result<()> {
        let sample = generate_frame(desc, scene, f as u64)?;
        write_sample(&sample, &frame_path(root, desc.dataset_id, f as u64))
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(desc.frame_count)
}

/// Generates every dataset of a manifest and stores a copy of the manifest
/// next to the frames.
pub fn generate_all(manifest: &Manifest, root: &Path, exec: Exec) -> Result<Vec<(u32, usize)>> {
    manifest.validate()?;
    fs::create_dir_all(root)?;
    manifest.save(&root.join("manifest.json"))?;
    manifest
        .datasets
        .iter()
        .map(|d| {
            Ok((
                d.dataset_id,
                generate_dataset(d, &manifest.scene, root, exec)?,
            ))
        })
        .collect()
}

/// Reads every frame of a generated dataset, in frame order.
pub fn load_dataset(root: &Path, desc: &DatasetDescriptor, exec: Exec) -> Result<Vec<SceneSample>> {
    exec.map_range(desc.frame_count, |f| {
        read_sample(&frame_path(root, desc.dataset_id, f as u64))
    })
    .into_iter()
    .collect()
}

/// Generates frames in memory without touching disk.
pub fn generate_in_memory(
    desc: &DatasetDescriptor,
    scene: &SceneParams,
    exec: Exec,
) -> Result<Vec<SceneSample>> {
    desc.validate(scene.camera.camera_count)?;
    exec.map_range(desc.frame_count, |f| generate_frame(desc, scene, f as u64))
        .into_iter()
        .collect()
}
