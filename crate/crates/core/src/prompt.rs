//! Per-dataset soft prompts and the adapters that turn them into the affine
//! parameters of every backbone normalization (PromptNorm).
//!
//! Each dataset owns one trainable prompt vector shared by all sites. Each
//! normalization site owns a one-hidden-layer MLP mapping that prompt to
//! `(alpha, beta)` of the site's width:
//!
//! ```text
//! alpha, beta = split(W2 · gelu(W1 · r + b1) + b2);  alpha += 1
//! PromptNorm(x) = alpha ⊙ LayerNorm(x) + beta
//! ```
//!
//! `W2` and `b2` start at zero, so a fresh registry reproduces plain
//! LayerNorm bit for bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub enabled: bool,
    pub prompt_dim: usize,
    /// Adapter hidden width; `2 * prompt_dim` when absent.
    pub hidden_dim: Option<usize>,
    /// Std of the initial prompt vectors.
    pub init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            prompt_dim: 16,
            hidden_dim: None,
            init_std: 1.0,
        }
    }
}

impl PromptConfig {
    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(2 * self.prompt_dim)
    }
}

/// A dataset's trainable prompt.
#[derive(Clone, Debug)]
pub struct SoftPrompt {
    pub dataset_id: u32,
    pub param: ParamId,
}

/// The adapter MLP for one normalization site.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub site: String,
    pub width: usize,
    pub hidden: Linear,
    pub out: Linear,
}

/// Which prompt a forward pass runs under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptContext {
    /// Plain LayerNorm everywhere.
    Disabled,
    Dataset(u32),
}

#[derive(Clone, Debug, Default)]
pub struct PromptRegistry {
    pub enabled: bool,
    pub prompt_dim: usize,
    prompts: BTreeMap<u32, SoftPrompt>,
    adapters: BTreeMap<String, AdapterParams>,
}

impl PromptRegistry {
    /// A registry that resolves every sample to plain LayerNorm and owns no
    /// parameters.
    pub fn disabled() -> Self {
        Self::default()
    }

    /// Registers one prompt per dataset and one adapter per `(site, width)`.
    pub fn new<R: Rng + ?Sized>(
        cfg: &PromptConfig,
        dataset_ids: &[u32],
        sites: &[(String, usize)],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if !cfg.enabled {
            return Ok(Self::disabled());
        }
        if cfg.prompt_dim == 0 {
            return Err(Error::Config("prompt_dim must be positive".into()));
        }
        let mut prompts = BTreeMap::new();
        for &id in dataset_ids {
            let v = Tensor::randn(&[1, cfg.prompt_dim], cfg.init_std, rng);
            let param = store.add(format!("prompt.{id}"), ParamGroup::Prompts, v);
            prompts.insert(
                id,
                SoftPrompt {
                    dataset_id: id,
                    param,
                },
            );
        }
        let h = cfg.hidden();
        let mut adapters = BTreeMap::new();
        for (site, width) in sites {
            let name = format!("adapter.{site}");
            let hidden = Linear::new(
                store,
                &format!("{name}.fc1"),
                ParamGroup::Adapters,
                cfg.prompt_dim,
                h,
                rng,
            );
            let out = Linear::zeros(
                store,
                &format!("{name}.fc2"),
                ParamGroup::Adapters,
                h,
                2 * width,
            );
            adapters.insert(
                site.clone(),
                AdapterParams {
                    site: site.clone(),
                    width: *width,
                    hidden,
                    out,
                },
            );
        }
        Ok(Self {
            enabled: true,
            prompt_dim: cfg.prompt_dim,
            prompts,
            adapters,
        })
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    pub fn dataset_ids(&self) -> Vec<u32> {
        self.prompts.keys().copied().collect()
    }

    pub fn has_site(&self, site: &str) -> bool {
        self.adapters.contains_key(site)
    }

    pub fn prompt(&self, dataset_id: u32) -> Result<&SoftPrompt> {
        self.prompts
            .get(&dataset_id)
            .ok_or(Error::UnknownDataset(dataset_id))
    }

    /// `(alpha, beta)`, each `[1, width]`, for `site` under prompt `r`.
    pub fn adapter_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        site: &str,
        r: Var,
    ) -> Result<(Var, Var)> {
        let a = self
            .adapters
            .get(site)
            .ok_or_else(|| Error::UnknownSite(site.to_string()))?;
        let h = a.hidden.forward(g, p, r)?;
        let h = g.gelu(h);
        let out = a.out.forward(g, p, h)?;
        let raw_alpha = g.slice_cols(out, 0, a.width)?;
        let beta = g.slice_cols(out, a.width, 2 * a.width)?;
        let ones = g.constant(Tensor::full(&[1, a.width], 1.0));
        let alpha = g.add(raw_alpha, ones)?;
        Ok((alpha, beta))
    }

    /// PromptNorm at `site`; plain LayerNorm when the registry or the context
    /// is disabled.
    pub fn prompt_norm(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        site: &str,
        ctx: PromptContext,
        eps: f64,
    ) -> Result<Var> {
        match (self.enabled, ctx) {
            (true, PromptContext::Dataset(id)) => {
                let r = p.var(self.prompt(id)?.param);
                let (alpha, beta) = self.adapter_forward(g, p, site, r)?;
                affine_norm(g, x, alpha, beta, eps)
            }
            _ => g.layer_norm(x, eps),
        }
    }

    /// One context per sample, each sample keeping its own dataset's prompt.
    pub fn resolve_prompt(&self, dataset_ids: &[u32]) -> Result<Vec<PromptContext>> {
        dataset_ids
            .iter()
            .map(|&id| {
                if !self.enabled {
                    Ok(PromptContext::Disabled)
                } else {
                    self.prompt(id).map(|_| PromptContext::Dataset(id))
                }
            })
            .collect()
    }
}

/// `alpha ⊙ LayerNorm(x) + beta` with explicit affine rows.
pub fn affine_norm(g: &mut Graph, x: Var, alpha: Var, beta: Var, eps: f64) -> Result<Var> {
    let ln = g.layer_norm(x, eps)?;
    let scaled = g.mul_row(ln, alpha)?;
    g.add_row(scaled, beta)
}

/// How the fine-tuning prompt is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "arg")]
pub enum PromptStrategy {
    /// The prompt learned for this dataset.
    Correspond(u32),
    /// The prompt learned for some other dataset.
    Wrong(u32),
    /// A fresh unit-Gaussian prompt.
    Random(u64),
    /// No prompt; the registry is switched off.
    None,
}

impl PromptStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            PromptStrategy::Correspond(_) => "correspond",
            PromptStrategy::Wrong(_) => "wrong",
            PromptStrategy::Random(_) => "random",
            PromptStrategy::None => "none",
        }
    }
}

/// Prompt vector to install for fine-tuning, or `None` to disable prompts.
pub fn init_finetune_prompt(
    registry: &PromptRegistry,
    store: &ParamStore,
    strategy: PromptStrategy,
) -> Result<Option<Tensor>> {
    match strategy {
        PromptStrategy::Correspond(id) | PromptStrategy::Wrong(id) => {
            if !registry.enabled {
                return Err(Error::MissingGroup(ParamGroup::Prompts.name().into()));
            }
            let sp = registry.prompt(id)?;
            Ok(Some(store.value(sp.param).clone()))
        }
        PromptStrategy::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Some(Tensor::randn(
                &[1, registry.prompt_dim.max(1)],
                1.0,
                &mut rng,
            )))
        }
        PromptStrategy::None => Ok(None),
    }
}
