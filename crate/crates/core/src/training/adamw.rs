use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One bias-corrected AdamW update of `p` in place; `t` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * cfg.weight_decay * p[i];
        p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Moment buffers for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every parameter flagged in `trainable`; a missing gradient
    /// counts as zero. Returns how many parameters were updated.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        trainable: &[bool],
        lr: f64,
    ) -> Result<usize> {
        self.step_scaled(store, grads, trainable, &vec![1.0; store.len()], lr)
    }

    /// [`OptimState::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        trainable: &[bool],
        lr_scale: &[f64],
        lr: f64,
    ) -> Result<usize> {
        let n = store.len();
        if grads.len() != n || trainable.len() != n || lr_scale.len() != n || self.m.len() != n {
            return Err(Error::Contract(format!(
                "optimizer got {} grads and {} flags for {n} parameters ({} moments)",
                grads.len(),
                trainable.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step;
        let mut updated = 0;
        for (i, param) in store.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let shape = param.value.shape().to_vec();
            if self.m[i].shape() != shape.as_slice() {
                return Err(Error::ShapeDrift {
                    name: param.name.clone(),
                    stored: self.m[i].shape().to_vec(),
                    expected: shape,
                });
            }
            let zero;
            let g = match &grads[i] {
                Some(g) if g.shape() == shape.as_slice() => g.data(),
                Some(g) => return Err(Error::shape("adamw", g.shape(), &shape)),
                None => {
                    zero = vec![0.0; param.value.numel()];
                    &zero
                }
            };
            adamw_update(
                param.value.data_mut(),
                g,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                t,
                lr * lr_scale[i],
                &self.cfg,
            );
            updated += 1;
        }
        Ok(updated)
    }
}
