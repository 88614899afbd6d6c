use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, OptimState};
use super::lr::LrSchedule;
use crate::data::{build_epoch_schedule, DatasetDescriptor, SceneSample};
use crate::encoders::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{combined_loss, CellSample, LossConfig, LossReport};
use crate::nn::ParamGroup;
use crate::prompt::PromptContext;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Final learning rate as a fraction of the peak.
    pub floor_ratio: f64,
    pub optimizer: AdamWConfig,
    /// Learning-rate multiplier for the prompt and adapter groups.
    pub prompt_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 8,
            peak_lr: 3e-3,
            floor_ratio: 0.01,
            optimizer: AdamWConfig::default(),
            prompt_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-size hyperparameters: lr 4e-4, batch 32, 50 epochs with 5 of
    /// warmup, weight decay 0.01.
    pub fn full_scale() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 32,
            peak_lr: 4e-4,
            floor_ratio: 0.01,
            optimizer: AdamWConfig::default(),
            prompt_lr_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prompt_lr_scale >= 0.0) {
            return Err(Error::Config("prompt_lr_scale must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        LrSchedule::new(
            self.peak_lr,
            self.warmup_epochs,
            self.epochs,
            self.floor_ratio,
            1,
        )
        .map(|_| ())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_cl: f64,
    pub l_mae: f64,
    pub l_all: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,l_cl,l_mae,l_all";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.l_cl, r.l_mae, r.l_all
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}

pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    /// Fixed-seed evaluation over every training frame before the first
    /// update and after the last.
    pub initial_eval: LossReport,
    pub final_eval: LossReport,
    pub optimizer: OptimState,
    pub steps_per_epoch: usize,
}

/// SplitMix64 over a sequence of words; derives independent sub-seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

struct Pass {
    l_cl: f64,
    l_mae: f64,
    cells: CellSample,
    grads: Option<Vec<Option<Tensor>>>,
}

fn sample_pass(
    model: &Model,
    sample: &SceneSample,
    prompt: PromptContext,
    loss: &LossConfig,
    mask_seed: u64,
    cell_seed: u64,
    with_grad: bool,
) -> Result<Pass> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| with_grad);
    let opts = ForwardOptions {
        mask_ratio: None,
        mask_seed,
    };
    let out = model.forward(
        &mut g,
        &p,
        &sample.images(),
        &sample.points(),
        prompt,
        &opts,
    )?;
    let parts = combined_loss(&mut g, &out, loss, cell_seed)?;
    let (l_cl, l_mae) = (g.value(parts.l_cl).item(), g.value(parts.l_mae).item());
    let grads = if with_grad && (l_cl + l_mae).is_finite() {
        g.backward(parts.l_all)?;
        Some(p.grads(&g))
    } else {
        None
    };
    Ok(Pass {
        l_cl,
        l_mae,
        cells: parts.cells,
        grads,
    })
}

/// Losses of `model` on `samples` with seeds fixed by `seed` alone.
pub fn evaluate(
    model: &Model,
    samples: &[&SceneSample],
    loss: &LossConfig,
    seed: u64,
    exec: Exec,
) -> Result<LossReport> {
    let ids: Vec<u32> = samples.iter().map(|s| s.dataset_id).collect();
    let ctx = model.registry.resolve_prompt(&ids)?;
    let passes = exec.map_range(samples.len(), |i| {
        let s = samples[i];
        let base = [seed, s.dataset_id as u64, s.frame_id];
        sample_pass(
            model,
            s,
            ctx[i],
            loss,
            mix_seed(&[base[0], base[1], base[2], 1]),
            mix_seed(&[base[0], base[1], base[2], 2, loss.contrastive.sample_seed]),
            false,
        )
    });
    let parts = passes
        .into_iter()
        .map(|p| p.map(|p| (p.l_cl, p.l_mae, p.cells)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::from_parts(&parts))
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Mixed multi-dataset pre-training of every parameter group.
///
/// Each epoch visits a freshly shuffled schedule in batches. Every sample
/// runs under its own dataset's prompt on its own graph; gradients are
/// averaged over the batch in batch order before one AdamW step.
pub fn pretrain(
    model: &mut Model,
    samples: &[SceneSample],
    descs: &[DatasetDescriptor],
    cfg: &TrainConfig,
    loss: &LossConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.contrastive.validate()?;
    let by_key: BTreeMap<(u32, u64), &SceneSample> = samples
        .iter()
        .map(|s| ((s.dataset_id, s.frame_id), s))
        .collect();
    for d in descs {
        for f in 0..d.frame_count as u64 {
            if !by_key.contains_key(&(d.dataset_id, f)) {
                return Err(Error::Config(format!(
                    "frame {f} of dataset {} not loaded",
                    d.dataset_id
                )));
            }
        }
    }
    let epoch_len: usize = descs.iter().map(|d| d.frame_count * d.repeat_times).sum();
    if epoch_len == 0 {
        return Err(Error::Config("schedule is empty".into()));
    }
    let steps_per_epoch = epoch_len.div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(
        cfg.peak_lr,
        cfg.warmup_epochs,
        cfg.epochs,
        cfg.floor_ratio,
        steps_per_epoch,
    )?;
    let eval_set: Vec<&SceneSample> = by_key.values().copied().collect();
    let eval_seed = mix_seed(&[cfg.seed, u64::MAX]);
    let initial_eval = evaluate(model, &eval_set, loss, eval_seed, exec)?;

    let mut opt = OptimState::new(&model.store, cfg.optimizer);
    let trainable = vec![true; model.store.len()];
    let lr_scale: Vec<f64> = model
        .store
        .iter()
        .map(|(_, p)| match p.group {
            ParamGroup::Adapters | ParamGroup::Prompts => cfg.prompt_lr_scale,
            _ => 1.0,
        })
        .collect();
    let mut metrics = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let schedule = build_epoch_schedule(descs, mix_seed(&[cfg.seed, epoch as u64]));
        for batch in schedule.entries.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&SceneSample> = batch.iter().map(|k| by_key[k]).collect();
            let ids: Vec<u32> = batch.iter().map(|s| s.dataset_id).collect();
            let ctx = model.registry.resolve_prompt(&ids)?;
            let frozen: &Model = model;
            let passes = exec.map_range(batch.len(), |i| {
                let s = batch[i];
                sample_pass(
                    frozen,
                    s,
                    ctx[i],
                    loss,
                    mix_seed(&[cfg.seed, step as u64, i as u64, 1]),
                    mix_seed(&[
                        cfg.seed,
                        step as u64,
                        i as u64,
                        2,
                        loss.contrastive.sample_seed,
                    ]),
                    true,
                )
            });
            let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
            let mut parts = Vec::with_capacity(batch.len());
            for (s, pass) in batch.iter().zip(passes) {
                let pass = pass?;
                if !(pass.l_cl.is_finite() && pass.l_mae.is_finite()) {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!(
                            "dataset {} frame {}: l_cl={} l_mae={}",
                            s.dataset_id, s.frame_id, pass.l_cl, pass.l_mae
                        ),
                    });
                }
                accumulate(&mut acc, pass.grads.expect("finite pass has grads"));
                parts.push((pass.l_cl, pass.l_mae, pass.cells));
            }
            let inv = 1.0 / batch.len() as f64;
            for t in acc.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let report = LossReport::from_parts(&parts);
            let lr = sched.lr_at(step);
            let updated = opt.step_scaled(&mut model.store, &acc, &trainable, &lr_scale, lr)?;
            debug_assert_eq!(updated, model.store.len());
            metrics.push(StepMetrics {
                step,
                epoch,
                lr,
                l_cl: report.l_cl,
                l_mae: report.l_mae,
                l_all: report.l_all,
            });
        }
    }
    let final_eval = evaluate(model, &eval_set, loss, eval_seed, exec)?;
    Ok(TrainOutcome {
        metrics,
        initial_eval,
        final_eval,
        optimizer: opt,
        steps_per_epoch,
    })
}
