use rand::Rng;

use super::block::{Block, Norm, NormCtx, NormScope, Windows};
use super::DecoderConfig;
use crate::error::Result;
use crate::nn::{Bound, Linear, ParamGroup, ParamStore};
use crate::tensor::{Graph, Var};

/// Narrow attention stack mapping encoder tokens back to patch pixels.
/// Uses plain LayerNorm and attends within each camera.
#[derive(Clone, Debug)]
pub struct MaeDecoder {
    in_proj: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    out_proj: Linear,
    windows: Windows,
}

impl MaeDecoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: &DecoderConfig,
        embed_dim: usize,
        cameras: usize,
        tokens_per_camera: usize,
        patch_len: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let w = cfg.width.unwrap_or((embed_dim / 2).max(1));
        let grp = ParamGroup::Auxiliary;
        let blocks = (0..cfg.block_count)
            .map(|i| {
                Block::new(
                    store,
                    &format!("dec.block{i}"),
                    grp,
                    NormScope::Auxiliary,
                    w,
                    cfg.head_count,
                    2,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = (0..cameras)
            .map(|c| (c * tokens_per_camera..(c + 1) * tokens_per_camera).collect())
            .collect();
        Ok(Self {
            in_proj: Linear::new(store, "dec.in_proj", grp, embed_dim, w, rng),
            blocks,
            norm: Norm {
                site: "dec.norm".into(),
                width: w,
                scope: NormScope::Auxiliary,
            },
            out_proj: Linear::new(store, "dec.out_proj", grp, w, patch_len, rng),
            windows: Windows::new(groups)?,
        })
    }

    pub fn norms(&self) -> Vec<&Norm> {
        self.blocks
            .iter()
            .flat_map(|b| b.norms())
            .chain(std::iter::once(&self.norm))
            .collect()
    }

    /// Reconstructed patches, `[tokens, patch_len]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, ctx: NormCtx<'_>) -> Result<Var> {
        let mut x = self.in_proj.forward(g, p, tokens)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, &self.windows, ctx)?;
        }
        let x = self.norm.forward(g, p, x, ctx)?;
        self.out_proj.forward(g, p, x)
    }
}
