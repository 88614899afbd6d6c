//! The finite-difference verification suite: every engine primitive in
//! isolation, the geometric and loss composites, and the full training loss
//! of a micro model.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_frame, DatasetDescriptor, SceneParams};
use crate::encoders::{patchify, ForwardOptions, Model, ModelConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::geometry::{
    lift_splat, BevFeatureMap, BevGridSpec, CameraRig, DepthBins, FeatureLayout, Modality,
    SurroundLayout,
};
use crate::losses::{combined_loss, mae_loss, nce_loss, ContrastiveConfig, LossConfig};
use crate::nn::{Bound, ParamGroup, ParamStore};
use crate::prompt::{PromptConfig, PromptContext, PromptRegistry};
use crate::tensor::{GradCheck, Graph, OpKind, Tensor, Var};
use crate::training::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub step: f64,
    pub seeds: u64,
    pub tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Parameter coordinates probed per seed in the end-to-end check.
    pub end_to_end_coords: usize,
    /// Backward rule whose sign is flipped on the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            seeds: 10,
            tolerance: 1e-4,
            end_to_end_tolerance: 1e-3,
            end_to_end_coords: 48,
            fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Primitive,
    Composite,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    /// Worst relative error over every seed and coordinate.
    pub max_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub step: f64,
    pub seeds: u64,
    pub fault: Option<String>,
    pub checks: Vec<CheckResult>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// The failing check that best localizes a fault: primitives before
    /// composites, then the largest error relative to tolerance. With no
    /// failures, the check closest to its tolerance.
    pub fn worst_offender(&self) -> Option<&CheckResult> {
        let ratio = |c: &CheckResult| c.max_error / c.tolerance;
        let rank = |c: &CheckResult| match c.kind {
            CheckKind::Primitive => 0,
            CheckKind::Composite => 1,
            CheckKind::EndToEnd => 2,
        };
        let failures = self.failures();
        if failures.is_empty() {
            return self
                .checks
                .iter()
                .max_by(|a, b| ratio(a).total_cmp(&ratio(b)));
        }
        failures.into_iter().min_by(|a, b| {
            rank(a)
                .cmp(&rank(b))
                .then_with(|| ratio(b).total_cmp(&ratio(a)))
        })
    }
}

type CheckFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

/// One isolated primitive: its inputs for a given RNG and the single-op
/// function under test.
struct Primitive {
    op: OpKind,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: CheckFn,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(rng, &[3, 4])]
}

fn row_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(rng, &[3, 4]), randn(rng, &[1, 4])]
}

fn wide(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(rng, &[3, 6])]
}

fn primitives() -> Vec<Primitive> {
    fn p(op: OpKind, inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: CheckFn) -> Primitive {
        Primitive { op, inputs, f }
    }
    vec![
        p(OpKind::Add, pair, Box::new(|g, v| g.add(v[0], v[1]))),
        p(OpKind::Sub, pair, Box::new(|g, v| g.sub(v[0], v[1]))),
        p(OpKind::Mul, pair, Box::new(|g, v| g.mul(v[0], v[1]))),
        p(
            OpKind::AddRow,
            row_pair,
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        p(
            OpKind::MulRow,
            row_pair,
            Box::new(|g, v| g.mul_row(v[0], v[1])),
        ),
        p(OpKind::Scale, one, Box::new(|g, v| Ok(g.scale(v[0], -0.7)))),
        p(OpKind::Exp, one, Box::new(|g, v| Ok(g.exp(v[0])))),
        p(
            OpKind::Log,
            |rng| vec![Tensor::uniform(&[3, 4], 0.5, 2.0, rng)],
            Box::new(|g, v| g.log(v[0])),
        ),
        p(OpKind::Gelu, one, Box::new(|g, v| Ok(g.gelu(v[0])))),
        p(OpKind::Softplus, one, Box::new(|g, v| Ok(g.softplus(v[0])))),
        p(OpKind::Sum, one, Box::new(|g, v| Ok(g.sum(v[0])))),
        p(OpKind::Mean, one, Box::new(|g, v| Ok(g.mean(v[0])))),
        p(
            OpKind::MatMul,
            |rng| vec![randn(rng, &[3, 4]), randn(rng, &[4, 2])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        p(OpKind::Transpose, one, Box::new(|g, v| g.transpose(v[0]))),
        p(OpKind::Softmax, wide, Box::new(|g, v| Ok(g.softmax(v[0])))),
        p(
            OpKind::LogSoftmax,
            wide,
            Box::new(|g, v| Ok(g.log_softmax(v[0]))),
        ),
        p(
            OpKind::LayerNorm,
            wide,
            Box::new(|g, v| g.layer_norm(v[0], 1e-5)),
        ),
        p(
            OpKind::Reshape,
            one,
            Box::new(|g, v| g.reshape(v[0], &[2, 6])),
        ),
        p(
            OpKind::GatherRows,
            |rng| vec![randn(rng, &[4, 3])],
            Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ),
        p(
            OpKind::SliceCols,
            wide,
            Box::new(|g, v| g.slice_cols(v[0], 1, 4)),
        ),
        p(
            OpKind::ConcatRows,
            |rng| vec![randn(rng, &[2, 3]), randn(rng, &[3, 3])],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        p(
            OpKind::ConcatCols,
            |rng| vec![randn(rng, &[3, 2]), randn(rng, &[3, 3])],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        p(
            OpKind::Splat,
            |rng| vec![randn(rng, &[4, 3]), randn(rng, &[4, 2])],
            Box::new(|g, v| {
                let targets = [
                    Some(0),
                    Some(2),
                    None,
                    Some(1),
                    Some(2),
                    Some(2),
                    Some(0),
                    None,
                ];
                g.splat(v[0], v[1], &targets, 3)
            }),
        ),
        p(
            OpKind::NormalizeRows,
            one,
            Box::new(|g, v| Ok(g.normalize_rows(v[0], 1e-12))),
        ),
        p(
            OpKind::PickPerRow,
            one,
            Box::new(|g, v| g.pick_per_row(v[0], &[1, 3, 0])),
        ),
    ]
}

/// Worst error of `f` over `seeds` input draws, each read out through
/// random weights.
fn check_seeds(
    gc: &GradCheck,
    seeds: u64,
    salt: u64,
    inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: &CheckFn,
) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[salt, seed]));
        let xs = inputs(&mut rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let w = randn(&mut rng, g.shape(out));
        let e = gc.run_weighted(f, &xs, &w)?;
        worst = if e.is_nan() {
            f64::INFINITY
        } else {
            worst.max(e)
        };
        coords += xs.iter().map(Tensor::numel).sum::<usize>();
    }
    Ok((worst, coords))
}

/// A two-camera rig small enough to check every coordinate.
fn micro_rig() -> Result<(CameraRig, FeatureLayout, DepthBins, BevGridSpec)> {
    let layout = SurroundLayout {
        camera_count: 2,
        width: 8,
        height: 8,
        ..SurroundLayout::default()
    };
    let rig = CameraRig::surround(&layout, &[0.1, -0.2])?;
    let bins = DepthBins {
        d_min: 1.0,
        d_max: 6.0,
        count: 4,
    };
    let grid = BevGridSpec {
        extent: [-6.0, 6.0, -6.0, 6.0],
        resolution: 4,
        feature_dim: 3,
    };
    Ok((rig, FeatureLayout { rows: 2, cols: 2 }, bins, grid))
}

type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync>;

struct Composite {
    name: &'static str,
    inputs: InputFn,
    f: CheckFn,
}

fn composites() -> Result<Vec<Composite>> {
    let (rig, layout, bins, grid) = micro_rig()?;
    let cells = layout.cells();
    let (c, d) = (grid.feature_dim, bins.count);
    let mut out = vec![Composite {
        name: "lift_splat",
        inputs: Box::new(move |rng| {
            vec![
                randn(rng, &[cells, c]),
                randn(rng, &[cells, c]),
                randn(rng, &[cells, d]),
                randn(rng, &[cells, d]),
            ]
        }),
        f: Box::new(move |g, v| {
            let bev = lift_splat(g, &v[..2], &v[2..], layout, &rig, &bins, &grid)?;
            Ok(bev.var)
        }),
    }];

    for (name, normalize) in [("nce_loss", false), ("nce_loss_normalized", true)] {
        let cfg = ContrastiveConfig {
            k: 3,
            tau: Some(if normalize { 0.2 } else { 0.5 }),
            normalize_features: normalize,
            ..ContrastiveConfig::default()
        };
        out.push(Composite {
            name,
            inputs: Box::new(|rng| vec![randn(rng, &[4, 4]), randn(rng, &[4, 4])]),
            f: Box::new(move |g, v| {
                let img = BevFeatureMap::new(g, v[0], 2, Modality::Image)?;
                let pcd = BevFeatureMap::new(g, v[1], 2, Modality::Points)?;
                nce_loss(g, &img, &pcd, &[0, 1, 3], &cfg)
            }),
        });
    }

    let image = Tensor::from_fn(&[2, 4, 6, 1], |i| ((i * 7) % 11) as f64 / 11.0);
    let mut target = patchify(&image, 2)?;
    target.mask = (0..target.count()).map(|i| i % 3 != 1).collect();
    let shape = target.patches.shape().to_vec();
    out.push(Composite {
        name: "mae_loss",
        inputs: Box::new(move |rng| vec![randn(rng, &shape)]),
        f: Box::new(move |g, v| mae_loss(g, v[0], &target, true)),
    });

    // PromptNorm over its input, the prompt and every adapter weight.
    let mut store = ParamStore::new();
    let pcfg = PromptConfig {
        prompt_dim: 3,
        hidden_dim: Some(5),
        ..PromptConfig::default()
    };
    let site = "site".to_string();
    let registry = PromptRegistry::new(
        &pcfg,
        &[0],
        &[(site.clone(), 4)],
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let shapes: Vec<Vec<usize>> = store
        .iter()
        .map(|(_, p)| p.value.shape().to_vec())
        .collect();
    let n = shapes.len();
    out.push(Composite {
        name: "prompt_norm",
        inputs: Box::new(move |rng| {
            // weights at their init scale keep the hidden units out of the
            // far GELU tail, where gradients shrink below float resolution
            let mut xs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let std = if s[0] > 1 {
                        1.0 / (s[0] as f64).sqrt()
                    } else {
                        1.0
                    };
                    Tensor::randn(s, std, rng)
                })
                .collect();
            xs.push(randn(rng, &[3, 4]));
            xs
        }),
        f: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            registry.prompt_norm(g, &bound, v[n], &site, PromptContext::Dataset(0), 1e-5)
        }),
    });
    Ok(out)
}

/// Smallest model the full loss runs on: one camera-ring with a single
/// attention block per encoder over a 4 × 4 grid.
pub fn end_to_end_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.camera.camera_count = 3;
    cfg.camera.hfov = 120f64.to_radians();
    cfg.image.embed_dim = 8;
    cfg.point.embed_dim = 8;
    cfg.grid = BevGridSpec {
        extent: [-8.0, 8.0, -8.0, 8.0],
        resolution: 4,
        feature_dim: 4,
    };
    cfg.image.bev_feature_dim = 4;
    cfg.point.bev_feature_dim = 4;
    cfg.prompt.prompt_dim = 4;
    cfg.depth.count = 4;
    cfg
}

/// Worst error of the combined loss over sampled parameter coordinates of a
/// micro model whose adapters have been perturbed away from identity.
fn end_to_end(gc: &GradCheck, cfg: &SuiteConfig, seed: u64) -> Result<f64> {
    let mut mcfg = end_to_end_model_config();
    mcfg.init_seed = seed;
    let mut model = Model::new(&mcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0xE2E, seed]));
    for p in model.store.iter_mut() {
        if p.group == ParamGroup::Adapters {
            p.value = Tensor::randn(p.value.shape(), 0.2, &mut rng);
        }
    }
    let scene = SceneParams {
        camera: mcfg.camera.clone(),
        ..SceneParams::default()
    };
    let desc = DatasetDescriptor {
        generator_seed: seed,
        rig_bias: vec![0.1; mcfg.camera.camera_count],
        ..DatasetDescriptor::new(0, 1, 1)
    };
    let sample = generate_frame(&desc, &scene, 0)?;
    let loss = LossConfig {
        contrastive: ContrastiveConfig {
            k: 6,
            ..ContrastiveConfig::default()
        },
        ..LossConfig::default()
    };
    let params: Vec<Tensor> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    // coordinates spread over parameters first, then within each
    let mut coords = Vec::with_capacity(cfg.end_to_end_coords);
    for k in index::sample(
        &mut rng,
        params.len(),
        cfg.end_to_end_coords.min(params.len()),
    ) {
        let c = rand::Rng::random_range(&mut rng, 0..params[k].numel());
        coords.push((k, c));
    }
    while coords.len() < cfg.end_to_end_coords {
        let k = rand::Rng::random_range(&mut rng, 0..params.len());
        coords.push((k, rand::Rng::random_range(&mut rng, 0..params[k].numel())));
    }
    let (images, points) = (sample.images(), sample.points());
    let opts = ForwardOptions {
        mask_ratio: None,
        mask_seed: mix_seed(&[seed, 1]),
    };
    let cell_seed = mix_seed(&[seed, 2]);
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(v.to_vec());
        let out = model.forward(
            g,
            &bound,
            &images,
            &points,
            PromptContext::Dataset(0),
            &opts,
        )?;
        Ok(combined_loss(g, &out, &loss, cell_seed)?.l_all)
    };
    gc.run_subset(f, &params, &coords)
}

/// Runs every check. Independent checks are spread over `exec`.
pub fn run_suite(cfg: &SuiteConfig, exec: Exec) -> Result<SuiteReport> {
    let start = Instant::now();
    let gc = GradCheck::new(cfg.step).with_fault(cfg.fault);
    let prims = primitives();
    let prim_results = exec.map(&prims, |p| {
        check_seeds(&gc, cfg.seeds, p.op as u64, &p.inputs, &p.f).map(|(e, n)| CheckResult {
            name: p.op.name().to_string(),
            kind: CheckKind::Primitive,
            max_error: e,
            tolerance: cfg.tolerance,
            coordinates: n,
        })
    });
    let comps = composites()?;
    let comp_results = exec.map(&comps, |c| {
        check_seeds(&gc, cfg.seeds, 1000 + c.name.len() as u64, &c.inputs, &c.f).map(|(e, n)| {
            CheckResult {
                name: c.name.to_string(),
                kind: CheckKind::Composite,
                max_error: e,
                tolerance: cfg.tolerance,
                coordinates: n,
            }
        })
    });
    let e2e = exec.map_range(cfg.seeds as usize, |s| end_to_end(&gc, cfg, s as u64));
    let mut checks = prim_results
        .into_iter()
        .chain(comp_results)
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for e in e2e {
        let e = e?;
        worst = if e.is_nan() {
            f64::INFINITY
        } else {
            worst.max(e)
        };
    }
    checks.push(CheckResult {
        name: "end_to_end".into(),
        kind: CheckKind::EndToEnd,
        max_error: worst,
        tolerance: cfg.end_to_end_tolerance,
        coordinates: cfg.end_to_end_coords * cfg.seeds as usize,
    });
    Ok(SuiteReport {
        step: cfg.step,
        seeds: cfg.seeds,
        fault: cfg.fault.map(|f| f.name().to_string()),
        checks,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
