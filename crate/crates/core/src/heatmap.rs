//! Per-cell BEV activation maps exported as 16-bit PGM and CSV.
//!
//! Both files use the same top-down orientation: ego forward (+x) points
//! right along the image's horizontal axis and ego left (+y) points up, so
//! pixel `(r, c)` shows grid cell `(row = c, col = G - 1 - r)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::SceneSample;
use crate::encoders::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::prompt::PromptContext;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub resolution: usize,
    /// Row-major in image orientation.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// L2 norm of every cell's feature vector of a `[G², C]` BEV map.
    pub fn from_bev(bev: &Tensor, resolution: usize) -> Result<Self> {
        let g = resolution;
        if bev.shape().len() != 2 || bev.rows() != g * g {
            return Err(Error::shape(
                "heatmap",
                bev.shape(),
                &[g * g, bev.last_dim()],
            ));
        }
        let mut values = vec![0.0; g * g];
        for r in 0..g {
            for c in 0..g {
                let cell = c * g + (g - 1 - r);
                values[r * g + c] = bev.row(cell).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        Ok(Self { resolution, values })
    }

    /// Value at BEV grid cell `(row, col)`.
    pub fn at_cell(&self, row: usize, col: usize) -> f64 {
        let g = self.resolution;
        self.values[(g - 1 - col) * g + row]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Binary PGM, 16 bits per pixel, scaled so the largest value is 65535.
    pub fn to_pgm(&self) -> Vec<u8> {
        let g = self.resolution;
        let mut out = format!("P5\n{g} {g}\n65535\n").into_bytes();
        let max = self.max();
        for &v in &self.values {
            let level = if max > 0.0 {
                (v / max * 65535.0).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&level.to_be_bytes());
        }
        out
    }

    /// Raw values, one image row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Format(format!("heatmap csv: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let g = rows.len();
        if rows.iter().any(|r| r.len() != g) {
            return Err(Error::Format("heatmap csv is not square".into()));
        }
        Ok(Self {
            resolution: g,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn write(&self, pgm: &Path, csv: &Path) -> Result<()> {
        fs::write(pgm, self.to_pgm())?;
        fs::write(csv, self.to_csv())?;
        Ok(())
    }

    /// Euclidean distance between two maps of equal size.
    pub fn l2_distance(&self, other: &Heatmap) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::shape(
                "heatmap",
                &[self.resolution],
                &[other.resolution],
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// Heat of the image-branch BEV map of `sample` under `ctx`, unmasked.
pub fn image_heatmap(model: &Model, sample: &SceneSample, ctx: PromptContext) -> Result<Heatmap> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| false);
    let opts = ForwardOptions {
        mask_ratio: Some(0.0),
        mask_seed: 0,
    };
    let out = model.image_forward(&mut g, &p, &sample.images(), ctx, &opts)?;
    Heatmap::from_bev(g.value(out.bev.var), model.cfg.grid.resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_points_right() {
        // grid 3x3, only the cell ahead-left of centre is hot: row 2 (max x), col 2 (max y)
        let mut bev = Tensor::zeros(&[9, 2]);
        bev.data_mut()[(2 * 3 + 2) * 2] = 3.0;
        bev.data_mut()[(2 * 3 + 2) * 2 + 1] = 4.0;
        let h = Heatmap::from_bev(&bev, 3).unwrap();
        // top-right pixel
        assert_eq!(h.values[2], 5.0);
        assert_eq!(h.at_cell(2, 2), 5.0);
        assert_eq!(h.values.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn pgm_header_and_scale() {
        let h = Heatmap {
            resolution: 2,
            values: vec![0.0, 1.0, 2.0, 4.0],
        };
        let pgm = h.to_pgm();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        let px: Vec<u16> = pgm[header.len()..]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(px, vec![0, 16384, 32768, 65535]);
    }

    #[test]
    fn csv_round_trip() {
        let h = Heatmap {
            resolution: 2,
            values: vec![0.25, 1.0, 2.5, 1e-7],
        };
        assert_eq!(Heatmap::from_csv(&h.to_csv()).unwrap(), h);
    }
}
