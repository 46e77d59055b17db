use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmix_core::sim::Patch;
use rawmix_core::{MsfaPattern, RawImage};
use rawmix_features::{all_elements, gradient_check, train, Error, GradCheckConfig, RawMixer, RawMixerConfig, TrainConfig};

fn tiny(pattern_width: usize, num_classes: usize) -> RawMixerConfig {
    RawMixerConfig {
        pattern_width,
        n_kernels: 8,
        mixer_kernel: 3,
        embed_dim: 12,
        heads: 2,
        encoder_layers: 1,
        ff_dim: 24,
        feature_dim: 6,
        num_classes,
    }
}


fn gradcheck_inputs() -> (Vec<RawImage>, RawMixer) {
    let p = MsfaPattern::imec2x2();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let imgs = (0..3)
        .map(|_| RawImage::new(p.clone(), 10, 10, (0..100).map(|_| rng.random()).collect()).unwrap())
        .collect();
    (imgs, RawMixer::new(tiny(2, 3), 32).unwrap())
}

/// With a small step every single element agrees with central differences.
#[test]
fn every_gradient_element_matches_fine_differences() {
    let (imgs, mut model) = gradcheck_inputs();
    let refs: Vec<&RawImage> = imgs.iter().collect();
    let elements = all_elements(&model);
    let cfg = GradCheckConfig {
        step: 1e-5,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&mut model, &refs, &[0, 2, 1], &cfg, &elements).unwrap();
    assert_eq!(report.entries.len(), model.parameter_count());
    let failures: Vec<_> = report.element_failures(1e-4).collect();
    assert!(failures.is_empty(), "{failures:?}");
}

/// Step 1e-3: each parameter tensor within 1e-4 relative error.
#[test]
fn every_parameter_tensor_matches_differences() {
    let (imgs, mut model) = gradcheck_inputs();
    let refs: Vec<&RawImage> = imgs.iter().collect();
    let elements = all_elements(&model);
    let report = gradient_check(&mut model, &refs, &[0, 2, 1], &GradCheckConfig::default(), &elements).unwrap();
    assert_eq!(report.tensors.len(), model.params().len());
    assert!(report.passed(1e-4), "{:?}", report.tensors);
}

fn constant_patches(n_per_class: usize) -> Vec<Patch> {
    let p = MsfaPattern::imec2x2();
    (0..2 * n_per_class)
        .map(|i| Patch {
            image: RawImage::filled(p.clone(), 8, 8, if i % 2 == 0 { 0.2 } else { 0.8 }).unwrap(),
            label: i % 2,
            origin: (0, 0),
        })
        .collect()
}

#[test]
fn constant_levels_are_learned_within_five_epochs() {
    let patches = constant_patches(20);
    for seed in 0..3 {
        let mut model = RawMixer::new(tiny(2, 2), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-2,
            seed,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &patches, &cfg).unwrap();
        assert_eq!(history.val_count, 2);
        assert_eq!(history.train_count, 38);
        let best = history.epochs.iter().filter_map(|e| e.val_accuracy).fold(0.0, f64::max);
        assert_eq!(best, 1.0, "seed {seed}: {history:?}");
    }
}

#[test]
fn zero_learning_rate_only_moves_running_stats() {
    let patches = constant_patches(6);
    let mut model = RawMixer::new(tiny(2, 2), 4).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 4,
        lr: 0.0,
        batch_size: 64,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &patches, &cfg).unwrap();
    for (a, b) in model.params().iter().zip(before.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_ne!(model.batch_norm_states(), before.batch_norm_states());
    let first = history.epochs[0].train_loss;
    for e in &history.epochs {
        assert!((e.train_loss - first).abs() < 1e-9);
    }
}

#[test]
fn training_is_deterministic() {
    let patches = constant_patches(5);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = RawMixer::new(tiny(2, 2), 1).unwrap();
        let h = train(&mut model, &patches, &cfg).unwrap();
        (h, model.to_checkpoint())
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_class_is_a_data_error() {
    let patches = constant_patches(4);
    let mut model = RawMixer::new(tiny(2, 3), 0).unwrap();
    let err = train(&mut model, &patches, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    let mut model = RawMixer::new(tiny(2, 2), 0).unwrap();
    let mut bad = constant_patches(2);
    bad[0].label = 5;
    assert!(matches!(train(&mut model, &bad, &TrainConfig::default()), Err(Error::Data(_))));
}
