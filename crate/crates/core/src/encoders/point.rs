use rand::Rng;

use super::block::{Block, Norm, NormCtx, NormScope, Windows};
use super::PointEncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{voxelize, BevFeatureMap, BevGridSpec, Modality, Points};
use crate::nn::{Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor};

/// Per-cell encoder inputs and the occupancy mask.
///
/// Occupied cells carry the pooled `x, y` as offsets from the cell centre,
/// the remaining pooled columns as-is, and `ln(1 + count)`. Empty cells are
/// all zero.
pub fn point_features(points: &Points, grid: &BevGridSpec) -> Result<(Tensor, Vec<bool>)> {
    let vox = voxelize(points, grid)?;
    let width = vox.last_dim();
    let f = width - 1;
    let cells = grid.cell_count();
    let mut data = vec![0.0; cells * width];
    let mut occupied = vec![false; cells];
    for cell in 0..cells {
        let src = &vox.data()[cell * width..(cell + 1) * width];
        let n = src[f];
        if n == 0.0 {
            continue;
        }
        occupied[cell] = true;
        let (cx, cy) = grid.cell_center(cell);
        let dst = &mut data[cell * width..(cell + 1) * width];
        dst[..f].copy_from_slice(&src[..f]);
        dst[0] -= cx;
        dst[1] -= cy;
        dst[f] = n.ln_1p();
    }
    Ok((Tensor::new(vec![cells, width], data)?, occupied))
}

/// Attention over the full sequence of BEV cell tokens.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub cfg: PointEncoderConfig,
    embed: Linear,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
    windows: Windows,
}

impl PointEncoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: &PointEncoderConfig,
        grid: &BevGridSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let grp = ParamGroup::BackbonePcd;
        let cells = grid.cell_count();
        let embed = Linear::new(store, "pcd.embed", grp, cfg.input_feature_dim, e, rng);
        let pos = cfg
            .positional
            .then(|| store.add("pcd.pos", grp, Tensor::randn(&[cells, e], 0.2, rng)));
        let blocks = (0..cfg.block_count)
            .map(|i| {
                Block::new(
                    store,
                    &format!("pcd.block{i}"),
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
            site: "pcd.final_norm".into(),
            width: e,
            scope: NormScope::Backbone,
        };
        let head = Linear::new(store, "pcd.bev_head", grp, e, cfg.bev_feature_dim, rng);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            final_norm,
            head,
            windows: Windows::global(cells),
        })
    }

    pub fn norms(&self) -> Vec<&Norm> {
        self.blocks
            .iter()
            .flat_map(|b| b.norms())
            .chain(std::iter::once(&self.final_norm))
            .collect()
    }

    /// Voxelize → embed → blocks → BEV head. Also returns which cells hold
    /// at least one point.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        points: &Points,
        grid: &BevGridSpec,
        ctx: NormCtx<'_>,
    ) -> Result<(BevFeatureMap, Vec<bool>)> {
        let (feats, occupied) = point_features(points, grid)?;
        if feats.last_dim() != self.cfg.input_feature_dim {
            return Err(Error::shape(
                "point_forward",
                feats.shape(),
                &[grid.cell_count(), self.cfg.input_feature_dim],
            ));
        }
        let x = g.constant(feats);
        let x = self.embed.forward(g, p, x)?;
        let mut x = match self.pos {
            Some(pos) => g.add(x, p.var(pos))?,
            None => x,
        };
        for b in &self.blocks {
            x = b.forward(g, p, x, &self.windows, ctx)?;
        }
        let x = self.final_norm.forward(g, p, x, ctx)?;
        let out = self.head.forward(g, p, x)?;
        let bev = BevFeatureMap::new(g, out, grid.resolution, Modality::Points)?;
        Ok((bev, occupied))
    }
}
