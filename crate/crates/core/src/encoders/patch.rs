use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-overlapping square patches of one or more equally sized images.
///
/// `patches` is `[images * rows * cols, patch_size² * channels]`, images
/// outermost, patches in raster order within an image, and each patch
/// flattened as `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub channels: usize,
    pub images: usize,
    pub rows: usize,
    pub cols: usize,
    pub patches: Tensor,
    /// `true` for patches that were masked out.
    pub mask: Vec<bool>,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.images * self.rows * self.cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        self.patches.row(i)
    }
}

/// Splits `[images, H, W, ch]` (or `[H, W, ch]`) into patches.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<PatchGrid> {
    let (n, h, w, ch) = match images.shape() {
        [h, w, c] => (1, *h, *w, *c),
        [n, h, w, c] => (*n, *h, *w, *c),
        other => return Err(Error::shape("patchify", other, &[0, 0, 0])),
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let plen = patch_size * patch_size * ch;
    let src = images.data();
    let mut data = Vec::with_capacity(n * rows * cols * plen);
    for img in 0..n {
        let base = img * h * w * ch;
        for pr in 0..rows {
            for pc in 0..cols {
                for y in 0..patch_size {
                    let row = pr * patch_size + y;
                    let start = base + (row * w + pc * patch_size) * ch;
                    data.extend_from_slice(&src[start..start + patch_size * ch]);
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        channels: ch,
        images: n,
        rows,
        cols,
        patches: Tensor::new(vec![n * rows * cols, plen], data)?,
        mask: vec![false; n * rows * cols],
    })
}

/// Inverse of [`patchify`]; always returns `[images, H, W, ch]`.
pub fn unpatchify(grid: &PatchGrid) -> Result<Tensor> {
    let p = grid.patch_size;
    let (h, w, ch) = (grid.rows * p, grid.cols * p, grid.channels);
    let mut out = vec![0.0; grid.images * h * w * ch];
    let src = grid.patches.data();
    let mut k = 0;
    for img in 0..grid.images {
        let base = img * h * w * ch;
        for pr in 0..grid.rows {
            for pc in 0..grid.cols {
                for y in 0..p {
                    let row = pr * p + y;
                    let start = base + (row * w + pc * p) * ch;
                    out[start..start + p * ch].copy_from_slice(&src[k..k + p * ch]);
                    k += p * ch;
                }
            }
        }
    }
    Tensor::new(vec![grid.images, h, w, ch], out)
}

/// Masks `round(ratio * P)` patches drawn uniformly without replacement.
/// Masked patch contents become exactly zero; the mask is recorded.
pub fn apply_mask(grid: &PatchGrid, ratio: f64, seed: u64) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let total = grid.count();
    let k = (ratio * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = grid.clone();
    out.mask = vec![false; total];
    let plen = grid.patch_len();
    for i in index::sample(&mut rng, total, k).into_iter() {
        out.mask[i] = true;
        out.patches.data_mut()[i * plen..(i + 1) * plen].fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w, 1], |i| i as f64)
    }

    #[test]
    fn patch_count() {
        let g = patchify(&ramp(8, 8), 4).unwrap();
        assert_eq!(g.count(), 4);
        assert_eq!(g.patch_len(), 16);
    }

    #[test]
    fn patch_contents_follow_raster_order() {
        // patch (row 1, col 0) of an 8x8 ramp covers pixels rows 4..8, cols 0..4
        let g = patchify(&ramp(8, 8), 4).unwrap();
        let idx = 2; // row 1 * 2 cols + col 0
        let expect: Vec<f64> = (4..8)
            .flat_map(|r| (0..4).map(move |c| (r * 8 + c) as f64))
            .collect();
        assert_eq!(g.patch(idx), expect.as_slice());
    }

    #[test]
    fn indivisible_is_rejected() {
        assert!(patchify(&ramp(6, 8), 4).is_err());
    }

    #[test]
    fn mask_cardinality_and_zeroing() {
        let g = patchify(&ramp(8, 8), 4).unwrap();
        let same = apply_mask(&g, 0.0, 1).unwrap();
        assert_eq!(same.patches, g.patches);
        assert!(same.mask.iter().all(|m| !m));

        let m = apply_mask(&g, 0.5, 1).unwrap();
        let masked = m.masked_indices();
        assert_eq!(masked.len(), 2);
        for i in masked {
            assert!(m.patch(i).iter().all(|v| *v == 0.0));
        }
        assert!(apply_mask(&g, 1.0, 1).is_err());
    }

    #[test]
    fn mask_is_seeded() {
        let img = Tensor::from_fn(&[6, 16, 32, 1], |i| i as f64);
        let g = patchify(&img, 4).unwrap();
        let a = apply_mask(&g, 0.5, 42).unwrap();
        let b = apply_mask(&g, 0.5, 42).unwrap();
        assert_eq!(a.mask, b.mask);
        let differing = (0..100u64)
            .filter(|s| apply_mask(&g, 0.5, 1000 + s).unwrap().mask != a.mask)
            .count();
        assert_eq!(differing, 100);
    }
}
