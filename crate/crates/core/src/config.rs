//! The JSON run configuration and the built-in presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetDescriptor, Manifest, SceneParams};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BevGridSpec;
use crate::losses::{ContrastiveConfig, LossConfig};
use crate::training::{ProbeConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Manifest to train on; `<data_dir>/manifest.json` when absent.
    pub manifest: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl PathsConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.data_dir.join("manifest.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl RunConfig {
    /// The desk-scale configuration the test suite trains.
    pub fn micro() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: PathsConfig::default(),
            model: micro_model(),
            loss: LossConfig {
                contrastive: ContrastiveConfig {
                    k: 16,
                    ..ContrastiveConfig::default()
                },
                ..LossConfig::default()
            },
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.loss.contrastive.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if value.get("schema_version").is_none() {
            return Err(Error::Config("missing schema_version".into()));
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Micro encoders over an 8 × 8 grid of 2 m cells.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        grid: BevGridSpec {
            extent: [-8.0, 8.0, -8.0, 8.0],
            resolution: 8,
            feature_dim: 16,
        },
        ..ModelConfig::default()
    }
}

/// Sensor noise of the second twin dataset, `(lidar metres, image)`; the
/// first keeps the descriptor defaults.
pub const TWIN_NOISE: (f64, f64) = (0.06, 0.08);

/// Two datasets whose capture rigs are yawed in opposite directions by
/// `bias` radians; the second also has noisier sensors.
pub fn twin_manifest(frames: usize, bias: f64, seed: u64) -> Manifest {
    let scene = SceneParams::default();
    let cams = scene.camera.camera_count;
    let ds = |id: u32, sign: f64| DatasetDescriptor {
        name: format!("twin-{id}"),
        generator_seed: seed.wrapping_mul(1000).wrapping_add(id as u64),
        rig_bias: vec![sign * bias; cams],
        ..DatasetDescriptor::new(id, frames, 1)
    };
    let noisy = DatasetDescriptor {
        lidar_noise: TWIN_NOISE.0,
        image_noise: TWIN_NOISE.1,
        ..ds(1, -1.0)
    };
    Manifest {
        datasets: vec![ds(0, 1.0), noisy],
        scene,
    }
}

/// The standard micro manifest: 2 × 32 frames, ±0.3 rad rig yaw.
pub fn micro_manifest() -> Manifest {
    twin_manifest(32, 0.3, 0)
}

/// Three datasets of 200, 170 and 1500 frames repeated 4, 4 and 1 times:
/// the mix of the large sampling table at 1/133 of its size. Each dataset
/// gets its own rig yaw.
pub fn mixed_manifest(seed: u64) -> Manifest {
    let scene = SceneParams::default();
    let cams = scene.camera.camera_count;
    let datasets = [(200, 4, 0.2), (170, 4, -0.2), (1500, 1, 0.0)]
        .into_iter()
        .enumerate()
        .map(|(i, (frames, repeat, yaw))| DatasetDescriptor {
            name: format!("mixed-{i}"),
            generator_seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
            rig_bias: vec![yaw; cams],
            ..DatasetDescriptor::new(i as u32, frames, repeat)
        })
        .collect();
    Manifest { datasets, scene }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "train": {"epochz": 3}}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "train": {"epochs": 4}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.model, micro_model());
    }

    #[test]
    fn wrong_schema_version() {
        assert!(RunConfig::from_json(r#"{"schema_version": 7}"#).is_err());
        assert!(RunConfig::from_json("{}").is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::micro();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        micro_manifest().validate().unwrap();
    }

    #[test]
    fn mixed_preset_keeps_the_repeat_structure() {
        let m = mixed_manifest(0);
        m.validate().unwrap();
        let s = crate::data::build_epoch_schedule(&m.datasets, 0);
        assert_eq!(s.len(), 800 + 680 + 1500);
        assert_eq!(s.count_for(1), 680);
    }
}
