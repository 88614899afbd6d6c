use bevalign::config::twin_manifest;
use bevalign::data::{
    build_epoch_schedule, generate_frame, occupancy_labels, read_sample, visible_fraction,
    write_sample, DatasetDescriptor, SceneParams,
};
use bevalign::geometry::{BevGridSpec, CameraRig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every (dataset, frame) appears exactly `repeat_times` times.
    #[test]
    fn schedule_is_a_permutation_of_the_repeated_lists(
        sets in prop::collection::vec((0usize..40, 1usize..5), 1..5),
        seed in any::<u64>(),
    ) {
        let descs: Vec<DatasetDescriptor> = sets
            .iter()
            .enumerate()
            .map(|(i, &(n, r))| DatasetDescriptor::new(i as u32, n, r))
            .collect();
        let s = build_epoch_schedule(&descs, seed);
        prop_assert_eq!(s.len(), sets.iter().map(|(n, r)| n * r).sum::<usize>());
        let mut seen = s.entries.clone();
        seen.sort_unstable();
        let mut expect: Vec<(u32, u64)> = descs
            .iter()
            .flat_map(|d| (0..d.repeat_times).flat_map(move |_| (0..d.frame_count as u64).map(move |f| (d.dataset_id, f))))
            .collect();
        expect.sort_unstable();
        prop_assert_eq!(seen, expect);
        prop_assert_eq!(s.entries, build_epoch_schedule(&descs, seed).entries);
    }
}

#[test]
fn frames_are_deterministic_and_distinct() {
    let m = twin_manifest(4, 0.3, 7);
    let d = &m.datasets[0];
    let a = generate_frame(d, &m.scene, 2).unwrap();
    assert_eq!(a, generate_frame(d, &m.scene, 2).unwrap());
    assert_ne!(a, generate_frame(d, &m.scene, 3).unwrap());
    assert_ne!(
        a.images,
        generate_frame(&m.datasets[1], &m.scene, 2).unwrap().images
    );
    assert!(a.images.iter().chain(&a.points).all(|v| v.is_finite()));
    assert_eq!(a.images.len(), a.image_shape.iter().product::<usize>());
}

#[test]
fn boxes_are_visible_to_the_standard_rig() {
    let scene = SceneParams::default();
    let rig = CameraRig::surround(&scene.camera, &[]).unwrap();
    let d = DatasetDescriptor::new(0, 64, 1);
    let worst = (0..64)
        .map(|f| visible_fraction(&generate_frame(&d, &scene, f).unwrap().boxes, &rig, 6))
        .fold(1.0, f64::min);
    assert!(
        worst >= 0.95,
        "worst frame shows {worst:.3} of its box surface"
    );
}

#[test]
fn every_frame_has_occupied_and_free_cells() {
    let m = twin_manifest(16, 0.3, 0);
    let grid = BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 8, 1).unwrap();
    for d in &m.datasets {
        for f in 0..16 {
            let s = generate_frame(d, &m.scene, f).unwrap();
            let occ = occupancy_labels(&s.boxes, &grid);
            let n = occ.iter().filter(|&&o| o).count();
            assert!(
                n > 0 && n < occ.len(),
                "dataset {} frame {f}: {n} occupied",
                d.dataset_id
            );
        }
    }
}

#[test]
fn truncated_sample_is_rejected() {
    let m = twin_manifest(1, 0.0, 0);
    let s = generate_frame(&m.datasets[0], &m.scene, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.bvs");
    write_sample(&s, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(read_sample(&p).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    std::fs::write(&p, &bad).unwrap();
    assert!(read_sample(&p).is_err());
}
