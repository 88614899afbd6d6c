//! Cell-wise contrastive loss between the two BEV maps, masked-patch
//! reconstruction, and their sum.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ModelOutput, PatchGrid};
use crate::error::{Error, Result};
use crate::geometry::BevFeatureMap;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Cells sampled per map.
    pub k: usize,
    /// Softmax temperature; 0.07 with normalization and 1.0 without when
    /// absent.
    pub tau: Option<f64>,
    pub sample_seed: u64,
    pub normalize_features: bool,
    pub restrict_to_occupied: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            k: 64,
            tau: None,
            sample_seed: 0,
            normalize_features: false,
            restrict_to_occupied: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn temperature(&self) -> f64 {
        self.tau
            .unwrap_or(if self.normalize_features { 0.07 } else { 1.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let tau = self.temperature();
        if self.k == 0 || !(tau > 0.0) {
            return Err(Error::Config(format!("contrastive k={} tau={tau}", self.k)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    /// Only masked patches count; `false` averages over every patch.
    pub masked_only: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { masked_only: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub contrastive: ContrastiveConfig,
    pub mae: MaeConfig,
}

/// Which cells one contrastive evaluation used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellSample {
    pub indices: Vec<usize>,
    pub requested: usize,
    /// `true` when fewer than `requested` occupied cells were available.
    pub clamped: bool,
}

/// Draws the contrastive cells without replacement.
///
/// With `restrict_to_occupied` and an occupancy mask, candidates are the
/// occupied cells and `k` is clamped to their count (possibly zero).
/// Otherwise `k` larger than the grid is an error.
pub fn sample_cells(
    cell_count: usize,
    occupancy: Option<&[bool]>,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<CellSample> {
    let candidates: Vec<usize> = match occupancy {
        Some(occ) if cfg.restrict_to_occupied => {
            if occ.len() != cell_count {
                return Err(Error::shape("sample_cells", &[occ.len()], &[cell_count]));
            }
            (0..cell_count).filter(|&i| occ[i]).collect()
        }
        _ => {
            if cfg.k > cell_count {
                return Err(Error::Config(format!(
                    "contrastive k={} exceeds {cell_count} grid cells",
                    cfg.k
                )));
            }
            (0..cell_count).collect()
        }
    };
    let k = cfg.k.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Ok(CellSample {
        indices,
        requested: cfg.k,
        clamped: k < cfg.k,
    })
}

/// NCE over the given cells: `score(j, k) = x_j · y_k / tau`, loss
/// `-mean_j log_softmax_k(score)[j, j]`. No cells gives exactly zero.
pub fn nce_loss(
    g: &mut Graph,
    bev_img: &BevFeatureMap,
    bev_pcd: &BevFeatureMap,
    cells: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    if bev_img.resolution != bev_pcd.resolution || bev_img.feature_dim != bev_pcd.feature_dim {
        return Err(Error::shape(
            "nce_loss",
            g.shape(bev_img.var),
            g.shape(bev_pcd.var),
        ));
    }
    if cells.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut x = g.gather_rows(bev_img.var, cells)?;
    let mut y = g.gather_rows(bev_pcd.var, cells)?;
    if cfg.normalize_features {
        x = g.normalize_rows(x, 1e-12);
        y = g.normalize_rows(y, 1e-12);
    }
    let yt = g.transpose(y)?;
    let s = g.matmul(x, yt)?;
    let s = g.scale(s, 1.0 / cfg.temperature());
    let ls = g.log_softmax(s);
    let diag: Vec<usize> = (0..cells.len()).collect();
    let picked = g.pick_per_row(ls, &diag)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Mean squared error between `recon` and the unmasked target patches, over
/// masked patches only unless `masked_only` is off. An empty mask gives
/// exactly zero.
pub fn mae_loss(g: &mut Graph, recon: Var, target: &PatchGrid, masked_only: bool) -> Result<Var> {
    if g.shape(recon) != target.patches.shape() {
        return Err(Error::shape(
            "mae_loss",
            g.shape(recon),
            target.patches.shape(),
        ));
    }
    let t = g.constant(target.patches.clone());
    let d = g.sub(recon, t)?;
    let d = if masked_only {
        let rows = target.masked_indices();
        if rows.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        g.gather_rows(d, &rows)?
    } else {
        d
    };
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Loss nodes for one sample plus the cells the contrastive term used.
pub struct LossParts {
    pub l_cl: Var,
    pub l_mae: Var,
    pub l_all: Var,
    pub cells: CellSample,
}

/// `l_all = l_mae + l_cl` for one forward pass.
pub fn combined_loss(
    g: &mut Graph,
    out: &ModelOutput,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossParts> {
    let cells = sample_cells(
        out.bev_pcd.cell_count(),
        Some(&out.occupancy),
        &cfg.contrastive,
        seed,
    )?;
    let l_cl = nce_loss(
        g,
        &out.image.bev,
        &out.bev_pcd,
        &cells.indices,
        &cfg.contrastive,
    )?;
    let l_mae = mae_loss(g, out.recon, &out.image.target, cfg.mae.masked_only)?;
    let l_all = g.add(l_mae, l_cl)?;
    Ok(LossParts {
        l_cl,
        l_mae,
        l_all,
        cells,
    })
}

/// Scalar values of a batch's losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cl: f64,
    pub l_mae: f64,
    pub l_all: f64,
    /// Cells used by each sample, in batch order.
    pub sampled_cell_indices: Vec<Vec<usize>>,
    /// Samples whose cell count was clamped to the occupied cells.
    pub clamped_samples: usize,
}

impl LossReport {
    /// Batch average of per-sample parts, in the given order.
    pub fn from_parts(parts: &[(f64, f64, CellSample)]) -> Self {
        let n = parts.len().max(1) as f64;
        let l_cl = parts.iter().map(|p| p.0).sum::<f64>() / n;
        let l_mae = parts.iter().map(|p| p.1).sum::<f64>() / n;
        Self {
            l_cl,
            l_mae,
            l_all: l_cl + l_mae,
            sampled_cell_indices: parts.iter().map(|p| p.2.indices.clone()).collect(),
            clamped_samples: parts.iter().filter(|p| p.2.clamped).count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Modality;

    fn maps(g: &mut Graph, x: Tensor, y: Tensor) -> (BevFeatureMap, BevFeatureMap) {
        let (xv, yv) = (g.constant(x), g.constant(y));
        let r = (g.shape(xv)[0] as f64).sqrt() as usize;
        (
            BevFeatureMap::new(g, xv, r, Modality::Image).unwrap(),
            BevFeatureMap::new(g, yv, r, Modality::Points).unwrap(),
        )
    }

    #[test]
    fn single_cell_is_zero() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[4, 2], |i| i as f64);
        let (a, b) = maps(&mut g, t.clone(), t);
        let l = nce_loss(&mut g, &a, &b, &[3], &ContrastiveConfig::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn occupied_restriction_clamps() {
        let occ = [true, false, true, false];
        let cfg = ContrastiveConfig {
            k: 3,
            ..Default::default()
        };
        let s = sample_cells(4, Some(&occ), &cfg, 1).unwrap();
        assert!(s.clamped);
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 2]);
        let open = ContrastiveConfig {
            k: 5,
            restrict_to_occupied: false,
            ..Default::default()
        };
        assert!(sample_cells(4, Some(&occ), &open, 1).is_err());
    }

    #[test]
    fn empty_mask_mae_is_zero() {
        let mut g = Graph::new();
        let grid = PatchGrid {
            patch_size: 1,
            channels: 1,
            images: 1,
            rows: 1,
            cols: 2,
            patches: Tensor::zeros(&[2, 1]),
            mask: vec![false, false],
        };
        let r = g.constant(Tensor::full(&[2, 1], 3.0));
        let l = mae_loss(&mut g, r, &grid, true).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = mae_loss(&mut g, r, &grid, false).unwrap();
        assert_eq!(g.value(l).item(), 9.0);
    }
}
