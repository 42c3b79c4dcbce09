//! Empirical training and evaluation behaviour on small models.

use amflow::model::{random_frames, Model, ModelConfig};
use amflow::params::AdamConfig;
use amflow::rng::seeded;
use amflow::synth::{
    direction_spec, make_appearance_dataset, make_direction_dataset, render_clip, Clip, SynthConfig,
};
use amflow::temporal::FusionMode;
use amflow::train::{evaluate, pretrain_backbone, train, PretrainConfig, TrainConfig, PRETRAIN_FRAMES_PER_CLASS};
use amflow::weights::WeightTable;

fn random_set(config: &ModelConfig, n: usize, seed: u64) -> Vec<Clip> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| Clip {
            frames: random_frames(config, &mut rng),
            label: i % config.categories,
        })
        .collect()
}

#[test]
fn two_clip_loss_decreases_over_fifty_steps() {
    let config = ModelConfig::micro();
    let mut decreased = 0;
    for seed in 0..10 {
        let mut model = Model::new(config.clone(), seed).unwrap();
        let data = random_set(&config, 2, 100 + seed);
        let before = evaluate(&model, &data).unwrap().loss;
        let tc = TrainConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            batch: 2,
            epochs: 50,
            seed,
            ..Default::default()
        };
        train(&mut model, &data, &[], &tc, |_| Ok(())).unwrap();
        decreased += usize::from(evaluate(&model, &data).unwrap().loss < before);
    }
    assert!(decreased >= 9, "loss decreased in {decreased}/10 seeds");
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let synth = SynthConfig::default();
    let data = make_direction_dataset(10, 9, &synth).unwrap();
    let clips: Vec<Clip> = data.all().cloned().collect();
    for seed in 0..10 {
        let model = Model::new(ModelConfig::default(), seed).unwrap();
        let m = evaluate(&model, &clips).unwrap();
        assert!((0.10..=0.45).contains(&m.top1), "seed {seed}: top1 {}", m.top1);
        // K = 4 <= 5
        assert_eq!(m.top5, 1.0);
        assert_eq!(evaluate(&model, &clips).unwrap(), m);
    }
}

#[test]
fn frozen_fusion_matrix_survives_training() {
    let config = ModelConfig {
        fusion: FusionMode::FrozenLinear,
        ..ModelConfig::micro()
    };
    let mut model = Model::new(config.clone(), 4).unwrap();
    let id = model.store.id("fusion.w").unwrap();
    let before = model.store.value(id).clone();
    let data = random_set(&config, 2, 5);
    let tc = TrainConfig {
        batch: 1,
        epochs: 50,
        ..Default::default()
    };
    // 2 clips, batch 1: 100 optimizer steps
    train(&mut model, &data, &[], &tc, |_| Ok(())).unwrap();
    assert_eq!(model.store.value(id).data(), before.data());
}

#[test]
fn pretrained_backbone_classifies_held_out_frames() {
    let synth = SynthConfig::default();
    let data = make_appearance_dataset(PRETRAIN_FRAMES_PER_CLASS, 0, &synth).unwrap();
    let backbone = ModelConfig::default().backbone;
    let (table, report) =
        pretrain_backbone(&backbone, &data.train, &data.val, data.categories, &PretrainConfig::default()).unwrap();
    assert!(report.val_top1 >= 0.90, "held-out appearance accuracy {}", report.val_top1);
    let back = WeightTable::from_bytes(&table.to_bytes(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back, table);
    // the table seeds a model whose backbone is exactly these tensors
    let model = Model::with_backbone(ModelConfig::default(), &table, 0).unwrap();
    for (name, t) in table.iter() {
        let id = model.store.id(name).unwrap();
        assert_eq!(model.store.value(id), t);
    }
}

#[test]
fn single_frames_carry_no_direction_signal() {
    // every class draws its final-frame corner from the same box
    let synth = SynthConfig::default();
    let mut ranges = Vec::new();
    for label in 0..4 {
        let mut rng = seeded(label as u64);
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for _ in 0..400 {
            let spec = direction_spec(&synth, label, &mut rng);
            let (x, y) = spec.position(synth.frames - 1);
            lo = lo.min(x.min(y));
            hi = hi.max(x.max(y));
        }
        ranges.push((lo, hi));
    }
    assert!(ranges.windows(2).all(|w| w[0] == w[1]), "{ranges:?}");
}

/// Mean column of the pixels bright enough to belong to the sprite.
fn sprite_column(frame: &amflow::Tensor, side: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0.0);
    for y in 0..side {
        for x in 0..side {
            if frame.data()[y * side + x] > 0.35 {
                sum += x as f64;
                count += 1.0;
            }
        }
    }
    sum / count
}

#[test]
fn shuffled_frames_lose_the_direction() {
    let synth = SynthConfig::default();
    let spec = direction_spec(&synth, 0, &mut seeded(3));
    let (clip, _) = render_clip(&spec, 1).unwrap();
    let cols = |c: &Clip| -> Vec<f64> { c.frames.iter().map(|f| sprite_column(f, synth.image_px)).collect() };
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    assert!(increasing(&cols(&clip)));
    let reversed: Vec<usize> = (0..synth.frames).rev().collect();
    assert!(decreasing(&cols(&clip.permuted(&reversed))));
    let shuffled = clip.permuted(&[3, 0, 6, 1, 7, 2, 5, 4]);
    let c = cols(&shuffled);
    assert!(!increasing(&c) && !decreasing(&c));
    assert_eq!(shuffled.label, clip.label);
}
