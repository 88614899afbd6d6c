use rand::Rng;

use super::block::{Block, Norm, NormCtx, NormScope, Windows};
use super::patch::{apply_mask, patchify, PatchGrid};
use super::ImageEncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    splat_stacked, splat_targets, BevFeatureMap, BevGridSpec, CameraRig, DepthBins, FeatureLayout,
};
use crate::nn::{Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Patch embedding, windowed-attention blocks, and the BEV/depth heads
/// feeding lift-splat.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    cameras: usize,
    height: usize,
    width: usize,
    channels: usize,
    layout: FeatureLayout,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    bev_proj: Linear,
    depth_head: Linear,
    windows: Windows,
}

pub struct ImageOutput {
    /// Encoded tokens, `[cams * H' * W', embed_dim]`.
    pub tokens: Var,
    pub depth_logits: Var,
    pub bev: BevFeatureMap,
    /// Unmasked patches together with the mask that was applied.
    pub target: PatchGrid,
}

impl ImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        cfg: &ImageEncoderConfig,
        cameras: usize,
        height: usize,
        width: usize,
        channels: usize,
        depth_bins: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(height, width)?;
        let p = cfg.patch_size;
        let layout = FeatureLayout {
            rows: height / p,
            cols: width / p,
        };
        let tokens = cameras * layout.cells();
        let e = cfg.embed_dim;
        let grp = ParamGroup::BackboneImg;
        let embed = Linear::new(store, "img.embed", grp, p * p * channels, e, rng);
        let pos = store.add("img.pos", grp, Tensor::randn(&[tokens, e], 0.2, rng));
        let blocks = (0..cfg.block_count)
            .map(|i| {
                Block::new(
                    store,
                    &format!("img.block{i}"),
                    grp,
                    NormScope::Backbone,
                    e,
                    cfg.head_count,
                    2,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = Norm {
            site: "img.final_norm".into(),
            width: e,
            scope: NormScope::Backbone,
        };
        let bev_proj = Linear::new(store, "img.bev_proj", grp, e, cfg.bev_feature_dim, rng);
        let depth_head = Linear::new(
            store,
            "lss.depth_head",
            ParamGroup::Auxiliary,
            e,
            depth_bins,
            rng,
        );
        let windows = Windows::tiled(cameras, layout.rows, layout.cols, cfg.window_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            cameras,
            height,
            width,
            channels,
            layout,
            embed,
            pos,
            blocks,
            final_norm,
            bev_proj,
            depth_head,
            windows,
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn token_count(&self) -> usize {
        self.cameras * self.layout.cells()
    }

    pub fn norms(&self) -> Vec<&Norm> {
        self.blocks
            .iter()
            .flat_map(|b| b.norms())
            .chain(std::iter::once(&self.final_norm))
            .collect()
    }

    pub fn windows(&self) -> &Windows {
        &self.windows
    }

    /// Patchify → mask → embed → blocks → lift-splat.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &Tensor,
        rig: &CameraRig,
        bins: &DepthBins,
        grid: &BevGridSpec,
        ctx: NormCtx<'_>,
        mask_ratio: f64,
        mask_seed: u64,
    ) -> Result<ImageOutput> {
        let expect = [self.cameras, self.height, self.width, self.channels];
        if images.shape() != expect {
            return Err(Error::shape("image_forward", images.shape(), &expect));
        }
        if rig.camera_count() != self.cameras {
            return Err(Error::Contract(format!(
                "rig has {} cameras, encoder expects {}",
                rig.camera_count(),
                self.cameras
            )));
        }
        let original = patchify(images, self.cfg.patch_size)?;
        let masked = apply_mask(&original, mask_ratio, mask_seed)?;
        let x = g.constant(masked.patches.clone());
        let x = self.embed.forward(g, p, x)?;
        let mut x = g.add(x, p.var(self.pos))?;
        for b in &self.blocks {
            x = b.forward(g, p, x, &self.windows, ctx)?;
        }
        let tokens = self.final_norm.forward(g, p, x, ctx)?;
        let feats = self.bev_proj.forward(g, p, tokens)?;
        let depth_logits = self.depth_head.forward(g, p, tokens)?;
        let targets = splat_targets(rig, self.layout, bins, grid);
        let bev = splat_stacked(g, feats, depth_logits, &targets, bins, grid)?;
        Ok(ImageOutput {
            tokens,
            depth_logits,
            bev,
            target: PatchGrid {
                mask: masked.mask,
                ..original
            },
        })
    }
}
