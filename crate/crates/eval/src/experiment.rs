//! The cross-illuminant classification protocol, end to end.

use std::time::Instant;

use rawmix_core::augment::{AugmentKind, AugmentSpec};
use rawmix_core::constancy::white_balance;
use rawmix_core::sim::{extract_patches, render_raw, synth_textures, Illuminant, Patch, Role, SceneCube};
use rawmix_core::RawImage;
use rawmix_features::{train, Descriptor, FeatureVector, Mlbp, RawMixer, TrainConfig, TrainHistory};

use crate::config::{DescriptorId, ExperimentConfig};
use crate::error::{Error, Result, StageExt};
use crate::knn::knn_classify;
use crate::manifest::{load_scene, split_for, DatasetManifest};
use crate::report::EvalReport;

/// Train and test patches after augmentation and white balance.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub num_classes: usize,
    pub train: Vec<Patch>,
    pub test: Vec<Patch>,
}

/// Per-patch augmentation seed, distinct for every (run seed, patch) pair.
fn patch_seed(seed: u64, role: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (role << 48) ^ index as u64
}

/// Translation step `floor(0.6 n)` in basic patterns, `n = X / B`.
pub fn translation_step(patch_size: usize, pattern_width: usize) -> isize {
    (0.6 * (patch_size / pattern_width) as f64).floor() as isize
}

/// The augmentation applied to the `index`-th training patch. Flips,
/// translation along y and remodeling take turns. Without pattern
/// preservation the same four run on the mosaic directly: naive flips, a
/// translation off the pattern grid and remodeling from unaligned blocks.
pub fn train_augmentation(cfg: &ExperimentConfig, b: usize, seed: u64, index: usize) -> AugmentSpec {
    let step = translation_step(cfg.patch_size, b);
    let fraction = cfg.augment.remodel_fraction;
    let kind = match (index % 4, cfg.preserving_aug) {
        (0, true) => AugmentKind::Hflip,
        (0, false) => AugmentKind::NaiveHflip,
        (1, true) => AugmentKind::Vflip,
        (1, false) => AugmentKind::NaiveVflip,
        (2, true) => AugmentKind::TranslateY { step },
        (2, false) => AugmentKind::NaiveShiftY {
            pixels: step * b as isize + (b / 2) as isize,
        },
        (_, true) => AugmentKind::Remodel { fraction },
        (_, false) => AugmentKind::NaiveRemodel { fraction },
    };
    AugmentSpec::new(kind, patch_seed(seed, 1, index))
}

/// The augmentation applied to the `index`-th test patch: noise, translation
/// along x and radial distortion take turns.
pub fn test_augmentation(cfg: &ExperimentConfig, b: usize, seed: u64, index: usize) -> AugmentSpec {
    let kind = match index % 3 {
        0 => AugmentKind::GaussianNoise {
            mu: 0.0,
            sigma: cfg.augment.noise_sigma,
        },
        1 => AugmentKind::TranslateX {
            step: translation_step(cfg.patch_size, b),
        },
        _ => AugmentKind::OpticalDistortion {
            k1: cfg.augment.distortion_k1,
        },
    };
    AugmentSpec::new(kind, patch_seed(seed, 2, index))
}

fn augment_copies(
    patches: &[Patch],
    spec_for: impl Fn(usize) -> AugmentSpec,
    stage: &'static str,
) -> Result<Vec<Patch>> {
    patches
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let out = spec_for(i).apply(&p.image).stage(stage)?;
            Ok(Patch {
                image: out.image,
                label: p.label,
                origin: p.origin,
            })
        })
        .collect()
}

struct SceneSource {
    scene: SceneCube,
    label: usize,
    illuminant: Illuminant,
    role: Role,
}

fn scene_sources(cfg: &ExperimentConfig, seed: u64) -> Result<(usize, Vec<SceneSource>)> {
    if let Some(path) = &cfg.dataset {
        let manifest = DatasetManifest::load(path).stage("dataset")?;
        if manifest.msfa != cfg.msfa || manifest.patch_size != cfg.patch_size {
            return Err(Error::Config(format!(
                "manifest is for {} / X={}, experiment wants {} / X={}",
                manifest.msfa, manifest.patch_size, cfg.msfa, cfg.patch_size
            )));
        }
        let mut out = Vec::with_capacity(manifest.scenes.len());
        for e in &manifest.scenes {
            out.push(SceneSource {
                scene: load_scene(&e.scene).stage("dataset")?,
                label: e.label,
                illuminant: Illuminant::by_name(&e.illuminant).stage("dataset")?,
                role: e.role,
            });
        }
        return Ok((manifest.num_classes(), out));
    }
    let pattern = cfg.pattern()?;
    let scenes = synth_textures(cfg.num_classes, cfg.scene_height, cfg.scene_width, &pattern, seed)
        .stage("synthesis")?;
    let train_ill = Illuminant::by_name(&cfg.illuminant_train).stage("synthesis")?;
    let test_ill = Illuminant::by_name(&cfg.illuminant_test).stage("synthesis")?;
    let mut out = Vec::with_capacity(2 * scenes.len());
    for (label, scene) in scenes.into_iter().enumerate() {
        out.push(SceneSource {
            scene: scene.clone(),
            label,
            illuminant: train_ill.clone(),
            role: Role::Train,
        });
        out.push(SceneSource {
            scene,
            label,
            illuminant: test_ill.clone(),
            role: Role::Test,
        });
    }
    Ok((cfg.num_classes, out))
}

/// Everything up to feature extraction: scenes, rendering, patch extraction,
/// augmentation and white balance.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    cfg.validate()?;
    let b = cfg.pattern()?.width();
    let (num_classes, sources) = scene_sources(cfg, seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for src in &sources {
        let raw = render_raw(&src.scene, &src.illuminant).stage("rendering")?;
        let split = split_for(src.role)?;
        let set = extract_patches(&raw, cfg.patch_size, split, src.label, src.illuminant.name())
            .stage("patch extraction")?;
        match src.role {
            Role::Train => train.extend(set.patches),
            _ => test.extend(set.patches),
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "{} training and {} test patches; both sets must be non-empty",
            train.len(),
            test.len()
        )));
    }
    if cfg.augment.train {
        let copies = augment_copies(&train, |i| train_augmentation(cfg, b, seed, i), "train augmentation")?;
        train.extend(copies);
    }
    if cfg.augment.test {
        let copies = augment_copies(&test, |i| test_augmentation(cfg, b, seed, i), "test augmentation")?;
        test.extend(copies);
    }
    if cfg.wb_enabled {
        for p in train.iter_mut().chain(test.iter_mut()) {
            p.image = white_balance(&p.image);
        }
    }
    Ok(PreparedData {
        num_classes,
        train,
        test,
    })
}

fn images(patches: &[Patch]) -> Vec<&RawImage> {
    patches.iter().map(|p| &p.image).collect()
}

/// The configured descriptor, trained on `data.train` when it learns.
fn fit_descriptor(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<(Box<dyn Descriptor>, Option<TrainHistory>)> {
    let b = cfg.pattern()?.width();
    match cfg.descriptor {
        DescriptorId::Mlbp => Ok((Box::new(Mlbp { pattern_width: b }), None)),
        DescriptorId::Rawmixer => {
            let mut model =
                RawMixer::new(cfg.model.to_config(b, data.num_classes), seed).stage("model setup")?;
            let tc = TrainConfig {
                seed: cfg.training.seed.wrapping_add(seed),
                ..cfg.training.clone()
            };
            let history = train(&mut model, &data.train, &tc).stage("training")?;
            Ok((Box::new(model), Some(history)))
        }
    }
}

/// Runs the full protocol for one seed.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
    let data = prepare_data(cfg, seed)?;
    let (descriptor, history) = fit_descriptor(cfg, &data, seed)?;
    let train_feats: Vec<FeatureVector> =
        descriptor.extract_all(&images(&data.train)).stage("feature extraction")?;
    let start = Instant::now();
    let test_feats = descriptor.extract_all(&images(&data.test)).stage("feature extraction")?;
    let seconds = start.elapsed().as_secs_f64();

    let labels: Vec<usize> = data.train.iter().map(|p| p.label).collect();
    let predicted = knn_classify(&train_feats, &labels, &test_feats, 1).stage("classification")?;
    let truth: Vec<usize> = data.test.iter().map(|p| p.label).collect();
    let mut report = EvalReport::from_predictions(cfg.clone(), seed, data.num_classes, &truth, &predicted)?;
    report.feature_dim = descriptor.dim();
    report.train_patches = data.train.len();
    report.extraction_seconds = seconds;
    report.training = history;
    Ok(report)
}

/// [`run_experiment`] for every configured seed, in order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}
