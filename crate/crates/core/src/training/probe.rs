//! Frozen-backbone linear probe on per-cell occupancy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, OptimState};
use crate::data::{occupancy_labels, SceneSample};
use crate::encoders::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Linear, ParamGroup, ParamStore};
use crate::prompt::{init_finetune_prompt, PromptContext, PromptStrategy};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Full-batch optimizer steps on the head.
    pub steps: usize,
    pub lr: f64,
    /// Share of frames used to fit the head; the rest are scored.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            lr: 0.05,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub strategy: String,
    pub dataset_id: u32,
    pub accuracy: f64,
    pub iou: f64,
    /// Head training loss after the last step.
    pub final_train_loss: f64,
    pub train_frames: usize,
    pub eval_frames: usize,
    pub positive_rate: f64,
}

/// Frozen model and prompt context a probe strategy evaluates under.
///
/// Correspond, Wrong and Random copy their vector into the prompt slot of
/// `dataset_id` (or the first registered slot when that dataset has none);
/// None switches the registry off.
pub fn prepare_strategy(
    model: &Model,
    dataset_id: u32,
    strategy: PromptStrategy,
) -> Result<(Model, PromptContext)> {
    let vector = init_finetune_prompt(&model.registry, &model.store, strategy)?;
    let Some(vector) = vector else {
        return Ok((model.plain_twin(), PromptContext::Disabled));
    };
    if !model.registry.enabled {
        return Err(Error::MissingGroup(ParamGroup::Prompts.name().into()));
    }
    let ids = model.registry.dataset_ids();
    let slot = if ids.contains(&dataset_id) {
        dataset_id
    } else {
        *ids.first()
            .ok_or_else(|| Error::MissingGroup(ParamGroup::Prompts.name().into()))?
    };
    let mut m = model.clone();
    let param = m.registry.prompt(slot)?.param;
    let dst = m.store.value_mut(param);
    if dst.shape() != vector.shape() {
        return Err(Error::shape("prompt", vector.shape(), dst.shape()));
    }
    *dst = vector;
    Ok((m, PromptContext::Dataset(slot)))
}

/// Per-cell `BEV_pcd ‖ BEV_img` features of one frame, `[G², 2C]`.
pub fn probe_features(model: &Model, sample: &SceneSample, ctx: PromptContext) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| false);
    let opts = ForwardOptions {
        mask_ratio: Some(0.0),
        mask_seed: 0,
    };
    let img = model.image_forward(&mut g, &p, &sample.images(), ctx, &opts)?;
    let (pcd, _) = model.point_forward(&mut g, &p, &sample.points(), ctx)?;
    let cat = g.concat_cols(&[pcd.var, img.bev.var])?;
    Ok(g.value(cat).clone())
}

/// Trains a linear occupancy classifier on frozen features of `samples`
/// under `strategy` and scores it on held-out frames.
pub fn linear_probe(
    model: &Model,
    samples: &[SceneSample],
    dataset_id: u32,
    strategy: PromptStrategy,
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<ProbeReport> {
    let frames: Vec<&SceneSample> = samples
        .iter()
        .filter(|s| s.dataset_id == dataset_id)
        .collect();
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "probe needs at least two frames of dataset {dataset_id}, got {}",
            frames.len()
        )));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {} outside (0, 1)",
            cfg.train_fraction
        )));
    }
    let (frozen, ctx) = prepare_strategy(model, dataset_id, strategy)?;
    let grid = &frozen.cfg.grid;
    let feats = exec
        .map(&frames, |s| probe_features(&frozen, s, ctx))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = frames
        .iter()
        .map(|s| occupancy_labels(&s.boxes, grid))
        .collect();

    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train =
        ((frames.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, frames.len() - 1);
    let (train, eval) = order.split_at(n_train);

    let stack = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &i in idx {
            x.extend_from_slice(feats[i].data());
            y.extend(labels[i].iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        (x, y)
    };
    let width = feats[0].last_dim();
    let (mut xtr, ytr) = stack(train);
    let (mut xev, yev) = stack(eval);
    // standardize with training statistics
    let rows = ytr.len();
    for c in 0..width {
        let col = (0..rows).map(|r| xtr[r * width + c]);
        let mean = col.clone().sum::<f64>() / rows as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt().max(1e-8);
        for x in [&mut xtr, &mut xev] {
            for r in 0..x.len() / width {
                x[r * width + c] = (x[r * width + c] - mean) / sd;
            }
        }
    }
    let xtr = Tensor::new(vec![rows, width], xtr)?;
    let ytr_t = Tensor::new(vec![rows, 1], ytr.clone())?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let head = Linear::new(
        &mut store,
        "probe.head",
        ParamGroup::Auxiliary,
        width,
        1,
        &mut rng,
    );
    let mut opt = OptimState::new(
        &store,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let trainable = vec![true; store.len()];
    let bce = |store: &ParamStore, grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| grad);
        let x = g.constant(xtr.clone());
        let y = g.constant(ytr_t.clone());
        let z = head.forward(&mut g, &p, x)?;
        // softplus(z) - y z
        let sp = g.softplus(z);
        let yz = g.mul(y, z)?;
        let l = g.sub(sp, yz)?;
        let l = g.mean(l);
        let value = g.value(l).item();
        if grad {
            g.backward(l)?;
        }
        Ok((value, p.grads(&g)))
    };
    for _ in 0..cfg.steps {
        let (_, grads) = bce(&store, true)?;
        opt.step(&mut store, &grads, &trainable, cfg.lr)?;
    }
    let (final_train_loss, _) = bce(&store, false)?;

    let w = store.value(head.weight).data().to_vec();
    let b = store.value(head.bias).data()[0];
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (r, &y) in yev.iter().enumerate() {
        let z: f64 = b + (0..width).map(|c| xev[r * width + c] * w[c]).sum::<f64>();
        let pred = z > 0.0;
        let truth = y > 0.5;
        correct += usize::from(pred == truth);
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let union = tp + fp + fneg;
    Ok(ProbeReport {
        strategy: strategy.label().into(),
        dataset_id,
        accuracy: correct as f64 / yev.len() as f64,
        iou: if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        },
        final_train_loss,
        train_frames: train.len(),
        eval_frames: eval.len(),
        positive_rate: yev.iter().sum::<f64>() / yev.len() as f64,
    })
}
