use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square bird's-eye-view grid over the ego frame.
///
/// Cell `(row, col)` covers the `row`-th slice along ego x and the `col`-th
/// slice along ego y; its flat index is `row * resolution + col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevGridSpec {
    /// `[x_min, x_max, y_min, y_max]` in metres.
    pub extent: [f64; 4],
    pub resolution: usize,
    pub feature_dim: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            extent: [-8.0, 8.0, -8.0, 8.0],
            resolution: 16,
            feature_dim: 16,
        }
    }
}

impl BevGridSpec {
    pub fn new(extent: [f64; 4], resolution: usize, feature_dim: usize) -> Result<Self> {
        let spec = Self {
            extent,
            resolution,
            feature_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The full-size 128×128 preset.
    pub fn full_scale(extent: [f64; 4], feature_dim: usize) -> Self {
        Self {
            extent,
            resolution: 128,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.extent;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Config(format!(
                "degenerate BEV extent {:?}",
                self.extent
            )));
        }
        if self.resolution < 2 {
            return Err(Error::Config("BEV resolution must be at least 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("BEV feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn cell_size(&self) -> (f64, f64) {
        let [x0, x1, y0, y1] = self.extent;
        let g = self.resolution as f64;
        ((x1 - x0) / g, (y1 - y0) / g)
    }

    /// `(row, col)` of the cell containing ego `(x, y)`; `None` outside the
    /// half-open extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let [x0, x1, y0, y1] = self.extent;
        if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
            return None;
        }
        let (dx, dy) = self.cell_size();
        let g = self.resolution;
        let row = (((x - x0) / dx) as usize).min(g - 1);
        let col = (((y - y0) / dy) as usize).min(g - 1);
        Some((row, col))
    }

    pub fn index_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(r, c)| r * self.resolution + c)
    }

    /// Ego `(x, y)` of a cell centre.
    pub fn cell_center(&self, index: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        let (r, c) = (index / self.resolution, index % self.resolution);
        (
            self.extent[0] + (r as f64 + 0.5) * dx,
            self.extent[2] + (c as f64 + 0.5) * dy,
        )
    }
}

/// Uniform metric depth bins along each camera ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 12.0,
            count: 8,
        }
    }
}

impl DepthBins {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.count >= 2) {
            return Err(Error::Config(format!("invalid depth bins {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self, i: usize) -> f64 {
        let step = (self.d_max - self.d_min) / self.count as f64;
        self.d_min + (i as f64 + 0.5) * step
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }
}

/// Row-major `N × dim` point array; each row starts with `x, y, z`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 3 {
            return Err(Error::Format(format!(
                "points need at least x, y, z columns, got {dim}"
            )));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Format(format!(
                "point buffer of {} values is not a multiple of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Mean-pools point features into BEV cells.
///
/// Returns a `[G, G, F + 1]` tensor: the per-cell mean of every point column
/// followed by the point count. Points outside the extent are dropped.
/// Accumulation within a cell follows a canonical order (cell, then point
/// values), so the result does not depend on input ordering.
pub fn voxelize(points: &Points, grid: &BevGridSpec) -> Result<Tensor> {
    grid.validate()?;
    let f = points.dim();
    if f < 3 {
        return Err(Error::Format(format!(
            "points need at least 3 columns, got {f}"
        )));
    }
    let g = grid.resolution;
    let width = f + 1;
    let mut keyed: Vec<(usize, &[f64])> = points
        .iter()
        .filter_map(|p| grid.index_of(p[0], p[1]).map(|c| (c, p)))
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut out = vec![0.0; g * g * width];
    for (cell, p) in &keyed {
        let slot = &mut out[cell * width..(cell + 1) * width];
        for (s, v) in slot.iter_mut().zip(p.iter()) {
            *s += v;
        }
        slot[f] += 1.0;
    }
    for slot in out.chunks_mut(width) {
        let n = slot[f];
        if n > 0.0 {
            for s in &mut slot[..f] {
                *s /= n;
            }
        }
    }
    Tensor::new(vec![g, g, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BevGridSpec {
        BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 16, 4).unwrap()
    }

    #[test]
    fn corner_indices() {
        let g = grid();
        let eps = 1e-9;
        assert_eq!(g.cell_of(-8.0 + eps, -8.0 + eps), Some((0, 0)));
        assert_eq!(g.cell_of(8.0 - eps, 8.0 - eps), Some((15, 15)));
        assert_eq!(g.cell_of(8.0, 0.0), None);
        // index arithmetic oracle: floor((x - x0) / dx)
        for &(x, y) in &[(0.3, -2.7), (-7.9, 6.1), (3.999, 4.0)] {
            let r = ((x + 8.0f64) / 1.0).floor() as usize;
            let c = ((y + 8.0f64) / 1.0).floor() as usize;
            assert_eq!(g.cell_of(x, y), Some((r, c)));
        }
    }

    #[test]
    fn invalid_grids() {
        assert!(BevGridSpec::new([1.0, 1.0, 0.0, 1.0], 4, 1).is_err());
        assert!(BevGridSpec::new([0.0, 1.0, 0.0, 1.0], 1, 1).is_err());
        assert!(DepthBins {
            d_min: 0.0,
            d_max: 1.0,
            count: 4
        }
        .validate()
        .is_err());
    }

    #[test]
    fn empty_cloud_is_all_zero() {
        let t = voxelize(&Points::empty(4).unwrap(), &grid()).unwrap();
        assert_eq!(t.shape(), &[16, 16, 5]);
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mean_intensity_and_count() {
        let pts = Points::new(4, vec![0.2, 0.2, 0.0, 2.0, 0.7, 0.4, 1.0, 4.0]).unwrap();
        let t = voxelize(&pts, &grid()).unwrap();
        let cell = grid().index_of(0.2, 0.2).unwrap();
        let slot = &t.data()[cell * 5..cell * 5 + 5];
        assert_eq!(slot[3], 3.0);
        assert_eq!(slot[4], 2.0);
        assert_eq!(slot[2], 0.5);
    }

    #[test]
    fn too_few_columns() {
        assert!(matches!(
            Points::new(2, vec![0.0; 4]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn out_of_extent_points_dropped() {
        let pts = Points::new(3, vec![100.0, 0.0, 0.0, 0.5, 0.5, 0.0]).unwrap();
        let t = voxelize(&pts, &grid()).unwrap();
        let total: f64 = t.data().chunks(4).map(|s| s[3]).sum();
        assert_eq!(total, 1.0);
    }
}
