//! File-level runs: load generated data, pre-train, and write the
//! checkpoint, metrics log and summary into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_dataset, Manifest, SceneSample};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::training::{pretrain, write_metrics_csv, Checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.bvck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l_cl: f64,
    pub l_mae: f64,
    pub l_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub prompts_enabled: bool,
    pub epochs: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
    /// `(dataset_id, frames)` in manifest order.
    pub datasets: Vec<(u32, usize)>,
    pub initial: LossTriple,
    #[serde(rename = "final")]
    pub final_: LossTriple,
    pub elapsed_secs: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// The manifest named by `cfg` and every frame it lists, checked against
/// the model's camera layout.
pub fn load_training_data(cfg: &RunConfig) -> Result<(Manifest, Vec<SceneSample>)> {
    let manifest = Manifest::load(&cfg.paths.manifest_path())?;
    if manifest.scene.camera != cfg.model.camera
        || manifest.scene.image_channels != cfg.model.image_channels
    {
        return Err(Error::Config(
            "manifest camera layout does not match the model's camera layout".into(),
        ));
    }
    let mut samples = Vec::new();
    for d in &manifest.datasets {
        let frames = load_dataset(&cfg.paths.data_dir, d, cfg.exec).map_err(|e| {
            Error::Config(format!(
                "dataset {} under {}: {e}",
                d.dataset_id,
                cfg.paths.data_dir.display()
            ))
        })?;
        samples.extend(frames);
    }
    Ok((manifest, samples))
}

/// Pre-trains a fresh model as configured and writes its artifacts under
/// `cfg.paths.out_dir`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let (manifest, samples) = load_training_data(cfg)?;
    let mut model = Model::new(&cfg.model)?;
    let outcome = pretrain(
        &mut model,
        &samples,
        &manifest.datasets,
        &cfg.train,
        &cfg.loss,
        cfg.exec,
    )?;

    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    let mut ck = Checkpoint::from_model(&model, Some(&outcome.optimizer));
    ck.run_config = Some(serde_json::to_value(cfg)?);
    ck.save(&checkpoint)?;
    write_metrics_csv(&metrics, &outcome.metrics)?;

    let triple = |r: &crate::losses::LossReport| LossTriple {
        l_cl: r.l_cl,
        l_mae: r.l_mae,
        l_all: r.l_all,
    };
    let summary = RunSummary {
        seed: cfg.train.seed,
        prompts_enabled: cfg.model.prompt.enabled,
        epochs: cfg.train.epochs,
        steps: outcome.metrics.len(),
        steps_per_epoch: outcome.steps_per_epoch,
        datasets: manifest
            .datasets
            .iter()
            .map(|d| (d.dataset_id, d.frame_count))
            .collect(),
        initial: triple(&outcome.initial_eval),
        final_: triple(&outcome.final_eval),
        elapsed_secs: start.elapsed().as_secs_f64(),
        checkpoint,
        metrics,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// The run configuration stored in a checkpoint, or the defaults.
pub fn stored_run_config(ck: &Checkpoint) -> Result<RunConfig> {
    match &ck.run_config {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Format(format!("stored run config: {e}"))),
        None => Ok(RunConfig {
            model: ck.model_config.clone(),
            ..RunConfig::default()
        }),
    }
}
