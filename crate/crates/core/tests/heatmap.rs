use bevalign::config::{twin_manifest, RunConfig};
use bevalign::data::{generate_in_memory, SceneSample};
use bevalign::encoders::Model;
use bevalign::heatmap::{image_heatmap, Heatmap};
use bevalign::prompt::PromptContext;
use bevalign::training::{pretrain, TrainConfig};
use bevalign::Exec;

fn frames() -> (Vec<SceneSample>, Vec<bevalign::data::DatasetDescriptor>) {
    let m = twin_manifest(4, 0.3, 0);
    let s = m
        .datasets
        .iter()
        .flat_map(|d| generate_in_memory(d, &m.scene, Exec::default()).unwrap())
        .collect();
    (s, m.datasets)
}

#[test]
fn zero_weights_give_a_flat_map() {
    let mut model = Model::new(&RunConfig::micro().model).unwrap();
    for p in model.store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let (samples, _) = frames();
    let h = image_heatmap(&model, &samples[0], PromptContext::Dataset(0)).unwrap();
    let lo = h.values.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(h.max() - lo < 1e-12, "spread {}", h.max() - lo);
    assert!(!h.to_pgm().is_empty());
}

#[test]
fn matching_and_mismatched_prompts_differ() {
    let cfg = RunConfig::micro();
    let mut model = Model::new(&cfg.model).unwrap();
    let (samples, descs) = frames();
    let short = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        prompt_lr_scale: 1.0,
        ..cfg.train.clone()
    };
    pretrain(
        &mut model,
        &samples,
        &descs,
        &short,
        &cfg.loss,
        Exec::default(),
    )
    .unwrap();
    let s = samples.iter().find(|s| s.dataset_id == 0).unwrap();
    let own = image_heatmap(&model, s, PromptContext::Dataset(0)).unwrap();
    let other = image_heatmap(&model, s, PromptContext::Dataset(1)).unwrap();
    let plain = image_heatmap(&model.plain_twin(), s, PromptContext::Disabled).unwrap();
    assert!(own.l2_distance(&other).unwrap() > 0.0);
    assert!(own.l2_distance(&plain).unwrap() > 0.0);

    // the CSV carries the values exactly
    let back = Heatmap::from_csv(&own.to_csv()).unwrap();
    assert_eq!(back, own);
}
