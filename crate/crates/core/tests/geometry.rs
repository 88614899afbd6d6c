use bevalign::geometry::{
    lift_splat, voxelize, BevGridSpec, Camera, CameraRig, DepthBins, FeatureLayout, Intrinsics,
    Points, SurroundLayout,
};
use bevalign::{Graph, Tensor};
use proptest::prelude::*;

fn camera(yaw: f64, x: f64, y: f64, f: f64, w: usize, h: usize) -> Camera {
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
    };
    Camera::looking_at_yaw(k, w, h, yaw, [x, y, 1.5])
}

fn splat(
    rig: &CameraRig,
    layout: FeatureLayout,
    feats: &[Tensor],
    logits: &[Tensor],
    grid: &BevGridSpec,
) -> Tensor {
    let bins = DepthBins {
        d_min: 1.0,
        d_max: 9.0,
        count: logits[0].last_dim(),
    };
    let mut g = Graph::new();
    let f: Vec<_> = feats.iter().map(|t| g.constant(t.clone())).collect();
    let l: Vec<_> = logits.iter().map(|t| g.constant(t.clone())).collect();
    let bev = lift_splat(&mut g, &f, &l, layout, rig, &bins, grid).unwrap();
    g.value(bev.var).clone()
}

fn tensor(shape: &[usize], seed: &[f64]) -> Tensor {
    Tensor::from_fn(shape, |i| {
        seed[i % seed.len()] * ((i * 7 % 11) as f64 - 5.0) / 5.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_round_trips(
        yaw in -3.1f64..3.1, x in -2.0f64..2.0, y in -2.0f64..2.0, f in 2.0f64..20.0,
        u in 0.0f64..16.0, v in 0.0f64..8.0, depth in 0.2f64..40.0,
    ) {
        let cam = camera(yaw, x, y, f, 16, 8);
        let p = cam.back_project(u, v, depth);
        let (pu, pv, pd) = cam.project(p).unwrap();
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pd - depth).abs() < 1e-9);
    }

    #[test]
    fn lift_splat_is_linear_in_features(
        yaw in -3.1f64..3.1, a in -3.0f64..3.0, b in -3.0f64..3.0,
        s1 in prop::collection::vec(-2.0f64..2.0, 1..8),
        s2 in prop::collection::vec(-2.0f64..2.0, 1..8),
        sl in prop::collection::vec(-2.0f64..2.0, 1..8),
    ) {
        let rig = CameraRig::new(vec![camera(yaw, 0.0, 0.0, 4.0, 8, 4), camera(yaw + 1.5, 0.3, 0.0, 4.0, 8, 4)]).unwrap();
        let layout = FeatureLayout { rows: 2, cols: 4 };
        let grid = BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 8, 3).unwrap();
        let f1 = [tensor(&[8, 3], &s1), tensor(&[8, 3], &s2)];
        let f2 = [tensor(&[8, 3], &s2), tensor(&[8, 3], &s1)];
        let mix: Vec<Tensor> = f1.iter().zip(&f2).map(|(x, y)| {
            Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap()
        }).collect();
        let logits = [tensor(&[8, 5], &sl), tensor(&[8, 5], &s1)];
        let (o1, o2, om) = (
            splat(&rig, layout, &f1, &logits, &grid),
            splat(&rig, layout, &f2, &logits, &grid),
            splat(&rig, layout, &mix, &logits, &grid),
        );
        for i in 0..om.numel() {
            prop_assert!((om.data()[i] - (a * o1.data()[i] + b * o2.data()[i])).abs() < 1e-9);
        }
    }

    /// With every lifted point inside the grid, the splat keeps the total
    /// feature mass: each pixel's depth distribution sums to one.
    #[test]
    fn lift_splat_conserves_mass(
        yaw in -3.1f64..3.1,
        sf in prop::collection::vec(-2.0f64..2.0, 1..8),
        sl in prop::collection::vec(-4.0f64..4.0, 1..8),
    ) {
        let rig = CameraRig::new(vec![camera(yaw, 0.5, -0.5, 4.0, 8, 4)]).unwrap();
        let layout = FeatureLayout { rows: 2, cols: 4 };
        let grid = BevGridSpec::new([-64.0, 64.0, -64.0, 64.0], 16, 2).unwrap();
        let feats = [tensor(&[8, 2], &sf)];
        let out = splat(&rig, layout, &feats, &[tensor(&[8, 4], &sl)], &grid);
        for ch in 0..2 {
            let put: f64 = out.data().iter().skip(ch).step_by(2).sum();
            let taken: f64 = feats[0].data().iter().skip(ch).step_by(2).sum();
            prop_assert!((put - taken).abs() < 1e-9, "{put} vs {taken}");
        }
    }

    #[test]
    fn voxelize_ignores_point_order_and_counts_in_extent(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.0f64..3.0, 0.0f64..1.0), 0..60),
        rot in 0usize..60,
    ) {
        let grid = BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 8, 4).unwrap();
        let flat = |v: &[(f64, f64, f64, f64)]| Points::new(4, v.iter().flat_map(|p| [p.0, p.1, p.2, p.3]).collect()).unwrap();
        let a = voxelize(&flat(&pts), &grid).unwrap();
        let mut shuffled = pts.clone();
        if !shuffled.is_empty() {
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
        }
        let b = voxelize(&flat(&shuffled), &grid).unwrap();
        prop_assert!(a.bit_eq(&b));
        let inside = pts.iter().filter(|p| grid.index_of(p.0, p.1).is_some()).count();
        let counted: f64 = a.data().iter().skip(4).step_by(5).sum();
        prop_assert_eq!(counted, inside as f64);
    }

    /// The per-cell mean lies in its own cell, so voxelizing the means
    /// marks exactly the same cells, once each.
    #[test]
    fn voxelize_means_reoccupy_the_same_cells(
        pts in prop::collection::vec((-7.9f64..7.9, -7.9f64..7.9, 0.0f64..3.0, 0.0f64..1.0), 1..60),
    ) {
        let grid = BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 8, 4).unwrap();
        let v = voxelize(&Points::new(4, pts.iter().flat_map(|p| [p.0, p.1, p.2, p.3]).collect()).unwrap(), &grid).unwrap();
        let means: Vec<f64> = v.data().chunks(5).filter(|c| c[4] > 0.0).flat_map(|c| c[..4].to_vec()).collect();
        let again = voxelize(&Points::new(4, means).unwrap(), &grid).unwrap();
        for (c1, c2) in v.data().chunks(5).zip(again.data().chunks(5)) {
            prop_assert_eq!(c2[4], if c1[4] > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn cell_lookup_agrees_with_centres(res in 2usize..20, cell in 0usize..400) {
        let grid = BevGridSpec::new([-5.0, 7.0, -3.0, 9.0], res, 1).unwrap();
        let cell = cell % grid.cell_count();
        let (x, y) = grid.cell_center(cell);
        prop_assert_eq!(grid.index_of(x, y), Some(cell));
    }
}

#[test]
fn surround_rig_covers_every_azimuth() {
    let rig = CameraRig::surround(&SurroundLayout::default(), &[]).unwrap();
    for deg in 0..360 {
        let a = (deg as f64).to_radians();
        let p = [6.0 * a.cos(), 6.0 * a.sin(), 0.5];
        let seen = (0..rig.camera_count()).any(|i| {
            rig.project_point(i, p)
                .unwrap()
                .is_some_and(|(u, v, _)| rig.cameras[i].in_image(u, v))
        });
        assert!(seen, "azimuth {deg} is not covered");
    }
}
