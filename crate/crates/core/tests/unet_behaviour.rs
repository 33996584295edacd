//! Shape contracts, inference, persistence and training behaviour of the U-Net.

mod common;

use std::collections::HashSet;

use common::scenarios::{overfit_four_images, synth_samples};
use slabseg::raster::{BinaryMask, RasterImage};
use slabseg::unet::{
    classical_baseline, kfold_split, load_model, parameter_count, predict, predict_ensemble, save_model, train,
    unet_forward, AnyModel, ModelMetadata, TrainConfig, UNetConfig, UNetError, UNetParams,
};

fn noise_image(h: usize, w: usize, spacing: f64) -> RasterImage {
    RasterImage::from_fn(h, w, 3, Some(spacing), |c, r, col| {
        ((r * 31 + col * 17 + c * 7) % 23) as f64 / 23.0
    })
    .unwrap()
}

#[test]
fn tiny_forward_preserves_shape() {
    let p = UNetParams::<f32>::init(&UNetConfig::tiny(), 1).unwrap();
    let logits = unet_forward(&p, &noise_image(64, 64, 0.5)).unwrap();
    assert_eq!((logits.c, logits.h, logits.w), (2, 64, 64));
    // Odd sides are padded internally and cropped back.
    let logits = unet_forward(&p, &noise_image(37, 50, 0.5)).unwrap();
    assert_eq!((logits.c, logits.h, logits.w), (2, 37, 50));
}

#[test]
fn full_config_forward_on_mean_training_dims() {
    let cfg = UNetConfig::full();
    let p = UNetParams::<f32>::init(&cfg, 0).unwrap();
    let count = parameter_count(&cfg);
    println!("full config parameter count: {count}");
    assert_eq!(p.parameter_count(), count);
    let logits = unet_forward(&p, &noise_image(440, 673, 0.5)).unwrap();
    assert_eq!((logits.c, logits.h, logits.w), (2, 440, 673));
    assert!(logits.data.iter().all(|v| v.is_finite()));
}

#[test]
fn parameter_count_ignores_input_size() {
    let cfg = UNetConfig::desk();
    let p = UNetParams::<f32>::init(&cfg, 0).unwrap();
    for (h, w) in [(16, 16), (64, 40), (128, 128)] {
        let logits = unet_forward(&p, &noise_image(h, w, 0.5)).unwrap();
        assert_eq!((logits.h, logits.w), (h, w));
        assert_eq!(p.parameter_count(), parameter_count(&cfg));
    }
}

#[test]
fn mismatched_config_is_rejected() {
    let mut cfg = UNetConfig::tiny();
    cfg.channels.push(16);
    assert!(matches!(
        UNetParams::<f32>::init(&cfg, 0),
        Err(UNetError::ConfigShapeMismatch(_))
    ));
    let p = UNetParams::<f32>::init(&UNetConfig::tiny(), 0).unwrap();
    let gray = RasterImage::filled(16, 16, 1, 0.5, Some(0.5));
    assert!(matches!(
        unet_forward(&p, &gray),
        Err(UNetError::ConfigShapeMismatch(_))
    ));
}

#[test]
fn crafted_foreground_params_predict_full_mask() {
    let mut p = UNetParams::<f64>::init(&UNetConfig::tiny(), 0).unwrap().zeros_like();
    p.get_mut("head.bias").unwrap().data[1] = 1.0;
    let img = noise_image(24, 40, 0.5);
    let mask = predict(&p, &img).unwrap();
    assert_eq!(mask.count(), 24 * 40);
    assert_eq!(mask.spacing(), Some(0.5));
    let ens = predict_ensemble(&[p.clone(), p], &img).unwrap();
    assert_eq!(ens, mask);
}

#[test]
fn resolution_guard_names_training_resolution() {
    let p = UNetParams::<f32>::init(&UNetConfig::tiny(), 0).unwrap();
    let err = predict(&p, &noise_image(32, 32, 0.1)).unwrap_err();
    assert!(matches!(err, UNetError::ResolutionMismatch { got: Some(g), expected } if g == 0.1 && expected == 0.5));
    assert!(err.to_string().contains("resample to 0.5 mm/px"), "{err}");
    let uncalibrated = RasterImage::filled(32, 32, 3, 0.2, None);
    assert!(matches!(
        predict(&p, &uncalibrated),
        Err(UNetError::ResolutionMismatch { got: None, .. })
    ));
}

#[test]
fn baseline_recovers_two_level_image_and_ignores_blank() {
    let truth = BinaryMask::from_fn(40, 50, Some(0.5), |r, c| (10..30).contains(&r) && (12..41).contains(&c));
    let img = RasterImage::from_fn(40, 50, 3, Some(0.5), |_, r, c| if truth.get(r, c) { 0.8 } else { 0.1 }).unwrap();
    assert_eq!(classical_baseline(&img), truth);
    // Dark object on a bright table: the side touching the border is background.
    let inverted =
        RasterImage::from_fn(40, 50, 3, Some(0.5), |_, r, c| if truth.get(r, c) { 0.1 } else { 0.8 }).unwrap();
    assert_eq!(classical_baseline(&inverted), truth);
    let blank = RasterImage::filled(40, 50, 3, 0.4, Some(0.5));
    assert!(classical_baseline(&blank).is_empty());
}

#[test]
fn model_container_round_trips_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.slabseg");
    let p = UNetParams::<f32>::init(&UNetConfig::tiny(), 4).unwrap();
    save_model(&path, &p, ModelMetadata::now(4, serde_json::json!({"note": "test"}))).unwrap();
    let (model, header) = load_model(&path).unwrap();
    assert_eq!(header.dtype, "f32");
    assert_eq!(header.metadata.seed, 4);
    match model {
        AnyModel::F32(q) => assert_eq!(q, p),
        AnyModel::F64(_) => panic!("dtype changed"),
    }

    let p64 = UNetParams::<f64>::init(&UNetConfig::tiny(), 4).unwrap();
    save_model(&path, &p64, ModelMetadata::now(4, serde_json::Value::Null)).unwrap();
    assert!(matches!(load_model(&path).unwrap().0, AnyModel::F64(q) if q == p64));

    let good = std::fs::read(&path).unwrap();
    let mut bad_header = good.clone();
    bad_header[22] ^= 0x5a;
    std::fs::write(&path, &bad_header).unwrap();
    assert!(matches!(load_model(&path), Err(UNetError::ModelLoadFailure(_))));

    let mut bad_payload = good.clone();
    *bad_payload.last_mut().unwrap() ^= 1;
    std::fs::write(&path, &bad_payload).unwrap();
    assert!(matches!(load_model(&path), Err(UNetError::ModelLoadFailure(_))));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_model(&path), Err(UNetError::ModelLoadFailure(_))));
    std::fs::write(&path, b"not a model").unwrap();
    assert!(matches!(load_model(&path), Err(UNetError::ModelLoadFailure(_))));
}

#[test]
fn kfold_split_partitions() {
    let folds = kfold_split(20, 5, 42);
    assert_eq!(folds.len(), 5);
    let mut seen = HashSet::new();
    for f in &folds {
        assert_eq!(f.len(), 4);
        for &i in f {
            assert!(seen.insert(i), "index {i} in two folds");
        }
    }
    assert_eq!(seen, (0..20).collect());
    assert_eq!(folds, kfold_split(20, 5, 42));
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed,
        ..TrainConfig::desk()
    }
}

#[test]
fn empty_sets_are_rejected() {
    let samples = synth_samples(1, 1, 32);
    let cfg = quick_config(0);
    let r = train::<f32>(&[], &samples, &cfg, &UNetConfig::tiny());
    assert!(matches!(r, Err(UNetError::EmptyDataset(_))));
    let r = train::<f32>(&samples, &[], &cfg, &UNetConfig::tiny());
    assert!(matches!(r, Err(UNetError::EmptyDataset(_))));
}

#[test]
fn training_is_bit_reproducible_in_f64() {
    let samples = synth_samples(5, 4, 32);
    let cfg = quick_config(17);
    let a = train::<f64>(&samples[..3], &samples[3..], &cfg, &UNetConfig::tiny()).unwrap();
    let b = train::<f64>(&samples[..3], &samples[3..], &cfg, &UNetConfig::tiny()).unwrap();
    assert_eq!(a.history.len(), 3);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_soft_dice.to_bits(), y.val_soft_dice.to_bits());
    }
    assert_eq!(a.params, b.params);
    let c = train::<f64>(&samples[..3], &samples[3..], &quick_config(18), &UNetConfig::tiny()).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn tiny_network_overfits_four_images() {
    // 4 images per batch for 125 epochs: 125 optimizer steps, well under 500.
    let r = overfit_four_images();
    println!(
        "train Dice per image {:?}, mean {:.4} after {} steps",
        r.dices, r.mean, r.steps
    );
    assert!(r.steps <= 500);
    assert!(r.mean >= 0.95, "train Dice {}", r.mean);
}
