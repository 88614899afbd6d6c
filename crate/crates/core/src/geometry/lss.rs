//! Lift image features along camera rays and splat them into the BEV grid.

use serde::{Deserialize, Serialize};

use super::{BevGridSpec, CameraRig, DepthBins, Vec3};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Points,
}

/// A `[G*G, C]` node on a graph, tagged with its grid and modality.
#[derive(Clone, Copy, Debug)]
pub struct BevFeatureMap {
    pub var: Var,
    pub resolution: usize,
    pub feature_dim: usize,
    pub modality: Modality,
}

impl BevFeatureMap {
    pub fn new(g: &Graph, var: Var, resolution: usize, modality: Modality) -> Result<Self> {
        let shape = g.shape(var);
        if shape.len() != 2 || shape[0] != resolution * resolution {
            return Err(Error::shape(
                "bev_map",
                shape,
                &[resolution * resolution, 0],
            ));
        }
        Ok(Self {
            var,
            resolution,
            feature_dim: shape[1],
            modality,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// The map reshaped to `[G, G, C]`.
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        g.value(self.var)
            .clone()
            .reshape(&[self.resolution, self.resolution, self.feature_dim])
            .expect("bev shape")
    }
}

/// Per-camera feature raster size (`H' × W'`), covering the full image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub rows: usize,
    pub cols: usize,
}

impl FeatureLayout {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Ego position of every `(camera, row, col, bin)` lifted point, in that
/// nesting order.
pub fn lifted_points(rig: &CameraRig, layout: FeatureLayout, bins: &DepthBins) -> Vec<Vec3> {
    let centers = bins.centers();
    let mut out = Vec::with_capacity(rig.camera_count() * layout.cells() * bins.count);
    for cam in &rig.cameras {
        let su = cam.width as f64 / layout.cols as f64;
        let sv = cam.height as f64 / layout.rows as f64;
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                let (u, v) = ((c as f64 + 0.5) * su, (r as f64 + 0.5) * sv);
                out.extend(centers.iter().map(|&d| cam.back_project(u, v, d)));
            }
        }
    }
    out
}

/// BEV cell receiving each lifted point, `None` when it falls outside.
pub fn splat_targets(
    rig: &CameraRig,
    layout: FeatureLayout,
    bins: &DepthBins,
    grid: &BevGridSpec,
) -> Vec<Option<usize>> {
    lifted_points(rig, layout, bins)
        .into_iter()
        .map(|p| grid.index_of(p[0], p[1]))
        .collect()
}

/// Lift-splat: softmax the per-pixel depth logits, weight each pixel's
/// feature by its depth distribution at every bin centre, and sum-pool the
/// weighted features into the BEV cells those points land in.
///
/// `features[i]` is `[H'*W', C]` and `depth_logits[i]` is `[H'*W', D]` for
/// camera `i`, rows in raster order.
pub fn lift_splat(
    g: &mut Graph,
    features: &[Var],
    depth_logits: &[Var],
    layout: FeatureLayout,
    rig: &CameraRig,
    bins: &DepthBins,
    grid: &BevGridSpec,
) -> Result<BevFeatureMap> {
    let cams = rig.camera_count();
    if features.len() != cams || depth_logits.len() != cams {
        return Err(Error::Contract(format!(
            "lift_splat got {} feature maps and {} depth maps for {cams} cameras",
            features.len(),
            depth_logits.len()
        )));
    }
    let c = g.shape(features[0]).last().copied().unwrap_or(0);
    for (f, d) in features.iter().zip(depth_logits) {
        let (fs, ds) = (g.shape(*f), g.shape(*d));
        if fs != [layout.cells(), c] {
            return Err(Error::shape("lift_splat", fs, &[layout.cells(), c]));
        }
        if ds != [layout.cells(), bins.count] {
            return Err(Error::shape(
                "lift_splat",
                ds,
                &[layout.cells(), bins.count],
            ));
        }
    }
    let feats = g.concat_rows(features)?;
    let logits = g.concat_rows(depth_logits)?;
    let targets = splat_targets(rig, layout, bins, grid);
    splat_stacked(g, feats, logits, &targets, bins, grid)
}

/// [`lift_splat`] over camera-stacked inputs (`[cams*H'*W', C]` and
/// `[cams*H'*W', D]`) with a precomputed [`splat_targets`] table.
pub fn splat_stacked(
    g: &mut Graph,
    features: Var,
    depth_logits: Var,
    targets: &[Option<usize>],
    bins: &DepthBins,
    grid: &BevGridSpec,
) -> Result<BevFeatureMap> {
    bins.validate()?;
    grid.validate()?;
    let (fs, ds) = (g.shape(features), g.shape(depth_logits));
    if fs.len() != 2 || ds.len() != 2 || fs[0] != ds[0] || ds[1] != bins.count {
        return Err(Error::shape("lift_splat", fs, ds));
    }
    if targets.len() != ds[0] * bins.count {
        return Err(Error::Contract(
            "splat target table does not match the layout".into(),
        ));
    }
    let probs = g.softmax(depth_logits);
    let out = g.splat(features, probs, targets, grid.cell_count())?;
    BevFeatureMap::new(g, out, grid.resolution, Modality::Image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, Intrinsics, SurroundLayout};
    use crate::tensor::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_cam() -> CameraRig {
        let k = Intrinsics {
            fx: 4.0,
            fy: 4.0,
            cx: 4.0,
            cy: 4.0,
        };
        CameraRig::new(vec![Camera::looking_at_yaw(k, 8, 8, 0.2, [0.0, 0.0, 1.0])]).unwrap()
    }

    #[test]
    fn zero_features_give_zero_map() {
        let rig = CameraRig::surround(&SurroundLayout::default(), &[]).unwrap();
        let layout = FeatureLayout { rows: 2, cols: 4 };
        let bins = DepthBins::default();
        let grid = BevGridSpec::default();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<Var> = (0..6).map(|_| g.constant(Tensor::zeros(&[8, 3]))).collect();
        let logits: Vec<Var> = (0..6)
            .map(|_| g.constant(Tensor::randn(&[8, bins.count], 1.0, &mut rng)))
            .collect();
        let bev = lift_splat(&mut g, &feats, &logits, layout, &rig, &bins, &grid).unwrap();
        assert!(g.value(bev.var).data().iter().all(|v| *v == 0.0));
        assert_eq!(bev.to_tensor(&g).shape(), &[16, 16, 3]);
    }

    #[test]
    fn depth_logit_gradient_matches_finite_differences() {
        let rig = one_cam();
        let layout = FeatureLayout { rows: 4, cols: 4 };
        let bins = DepthBins {
            d_min: 1.0,
            d_max: 6.0,
            count: 2,
        };
        let grid = BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feat = Tensor::randn(&[16, 3], 1.0, &mut rng);
        let logits = Tensor::randn(&[16, 2], 1.0, &mut rng);
        let weights = Tensor::randn(&[64, 3], 1.0, &mut rng);
        let err = GradCheck::new(1e-4)
            .run(
                |g, v| {
                    let w = g.constant(weights.clone());
                    let bev = lift_splat(g, &[v[0]], &[v[1]], layout, &rig, &bins, &grid)?;
                    let m = g.mul(bev.var, w)?;
                    Ok(g.sum(m))
                },
                &[feat.clone(), logits.clone()],
            )
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn shape_disagreement_is_rejected() {
        let rig = one_cam();
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[16, 3]));
        let d = g.constant(Tensor::zeros(&[15, 2]));
        let bins = DepthBins {
            d_min: 1.0,
            d_max: 6.0,
            count: 2,
        };
        let layout = FeatureLayout { rows: 4, cols: 4 };
        let grid = BevGridSpec::default();
        assert!(lift_splat(&mut g, &[f], &[d], layout, &rig, &bins, &grid).is_err());
    }
}
