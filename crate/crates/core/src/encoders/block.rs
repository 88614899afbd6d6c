//! Pre-norm transformer block with (optionally windowed) multi-head attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamGroup, ParamStore};
use crate::prompt::{PromptContext, PromptRegistry};
use crate::tensor::{Graph, Var};

/// Where a normalization layer lives; only backbone sites take prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormScope {
    Backbone,
    Auxiliary,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub site: String,
    pub width: usize,
    pub scope: NormScope,
}

/// What a forward pass needs to evaluate normalization layers.
#[derive(Clone, Copy)]
pub struct NormCtx<'a> {
    pub registry: &'a PromptRegistry,
    pub prompt: PromptContext,
    pub eps: f64,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: NormCtx<'_>) -> Result<Var> {
        match self.scope {
            NormScope::Backbone => ctx
                .registry
                .prompt_norm(g, p, x, &self.site, ctx.prompt, ctx.eps),
            NormScope::Auxiliary => g.layer_norm(x, ctx.eps),
        }
    }
}

/// Partition of a token sequence into attention windows.
#[derive(Clone, Debug)]
pub struct Windows {
    groups: Vec<Vec<usize>>,
    /// Position of token `i` in the concatenation of `groups`.
    inverse: Vec<usize>,
}

impl Windows {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = groups.iter().map(Vec::len).sum();
        let mut inverse = vec![usize::MAX; n];
        for (pos, &t) in groups.iter().flatten().enumerate() {
            if t >= n || inverse[t] != usize::MAX {
                return Err(Error::Contract(
                    "attention windows must partition the tokens".into(),
                ));
            }
            inverse[t] = pos;
        }
        Ok(Self { groups, inverse })
    }

    /// A single window over `n` tokens.
    pub fn global(n: usize) -> Self {
        Self::new(vec![(0..n).collect()]).expect("partition")
    }

    /// `win × win` windows tiled over `images` raster grids of `rows × cols`.
    pub fn tiled(images: usize, rows: usize, cols: usize, win: usize) -> Result<Self> {
        if win == 0 || !rows.is_multiple_of(win) || !cols.is_multiple_of(win) {
            return Err(Error::Config(format!(
                "token grid {rows}x{cols} is not divisible by window {win}"
            )));
        }
        let mut groups = Vec::new();
        for img in 0..images {
            let base = img * rows * cols;
            for wr in (0..rows).step_by(win) {
                for wc in (0..cols).step_by(win) {
                    let mut grp = Vec::with_capacity(win * win);
                    for r in wr..wr + win {
                        for c in wc..wc + win {
                            grp.push(base + r * cols + c);
                        }
                    }
                    groups.push(grp);
                }
            }
        }
        Self::new(groups)
    }

    pub fn token_count(&self) -> usize {
        self.inverse.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    fn is_identity(&self) -> bool {
        self.inverse.iter().enumerate().all(|(i, &p)| i == p)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embed dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dim, dim, rng),
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, windows: &Windows) -> Result<Var> {
        self.forward_inner(g, p, x, windows, None)
    }

    /// Softmax weight matrices, one per `(window, head)`.
    pub fn weights(&self, g: &mut Graph, p: &Bound, x: Var, windows: &Windows) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        self.forward_inner(g, p, x, windows, Some(&mut out))?;
        Ok(out)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        windows: &Windows,
        mut sink: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let single = windows.groups.len() == 1 && windows.is_identity();
        let mut outs = Vec::with_capacity(windows.groups.len());
        for grp in &windows.groups {
            let (qw, kw, vw) = if single {
                (q, k, v)
            } else {
                (
                    g.gather_rows(q, grp)?,
                    g.gather_rows(k, grp)?,
                    g.gather_rows(v, grp)?,
                )
            };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
                let (qh, kh, vh) = if self.heads == 1 {
                    (qw, kw, vw)
                } else {
                    (
                        g.slice_cols(qw, lo, hi)?,
                        g.slice_cols(kw, lo, hi)?,
                        g.slice_cols(vw, lo, hi)?,
                    )
                };
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale);
                let a = g.softmax(s);
                if let Some(sink) = sink.as_deref_mut() {
                    sink.push(a);
                }
                heads.push(g.matmul(a, vh)?);
            }
            outs.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            });
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)?
        };
        let merged = if windows.is_identity() {
            merged
        } else {
            g.gather_rows(merged, &windows.inverse)?
        };
        self.o.forward(g, p, merged)
    }
}

/// `x + Attn(Norm(x))`, then `x + MLP(Norm(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        scope: NormScope,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let norm = |suffix: &str| Norm {
            site: format!("{name}.{suffix}"),
            width: dim,
            scope,
        };
        Ok(Self {
            norm1: norm("norm1"),
            attn: Attention::new(store, &format!("{name}.attn"), group, dim, heads, rng)?,
            norm2: norm("norm2"),
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                group,
                dim,
                mlp_ratio * dim,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                group,
                mlp_ratio * dim,
                dim,
                rng,
            ),
        })
    }

    pub fn norms(&self) -> [&Norm; 2] {
        [&self.norm1, &self.norm2]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        windows: &Windows,
        ctx: NormCtx<'_>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x, ctx)?;
        let a = self.attn.forward(g, p, h, windows)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x, ctx)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiled_windows_partition() {
        let w = Windows::tiled(2, 2, 4, 2).unwrap();
        assert_eq!(w.groups().len(), 4);
        assert_eq!(w.groups()[1], vec![2, 3, 6, 7]);
        assert_eq!(w.token_count(), 16);
        assert!(Windows::tiled(1, 3, 4, 2).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn =
            Attention::new(&mut store, "a", ParamGroup::BackboneImg, 8, 2, &mut rng).unwrap();
        let windows = Windows::tiled(1, 4, 4, 2).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let x = g.constant(Tensor::randn(&[16, 8], 3.0, &mut rng));
        let ws = attn.weights(&mut g, &p, x, &windows).unwrap();
        assert_eq!(ws.len(), 8);
        for w in ws {
            for row in g.value(w).data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn windows_isolate_tokens() {
        // perturbing a token outside a window leaves that window's output unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let attn =
            Attention::new(&mut store, "a", ParamGroup::BackboneImg, 4, 1, &mut rng).unwrap();
        let windows = Windows::tiled(1, 2, 4, 2).unwrap();
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let mut y = x.clone();
        y.data_mut()[3 * 4] += 1.0; // token 3 lives in the second window
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| true);
            let xv = g.constant(t.clone());
            let o = attn.forward(&mut g, &p, xv, &windows).unwrap();
            g.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for tok in [0usize, 1, 4, 5] {
            assert_eq!(a.row(tok), b.row(tok));
        }
        assert_ne!(a.row(2), b.row(2));
    }
}
