use std::fs;
use std::path::{Path, PathBuf};

use rawmix_core::augment::AugmentSpec;
use rawmix_core::constancy::white_balance_with_estimate;
use rawmix_core::sim::{extract_patches, render_raw, synth_textures, Illuminant, Patch, Role};
use rawmix_core::{io, mosaic, pixel_shuffle, pixel_unshuffle, MsfaPattern, RawImage};
use rawmix_eval::manifest::{load_scene, split_for};
use rawmix_eval::{
    emit_report, knn_classify, median_accuracy, run_seeds, DatasetManifest, ExperimentConfig, PatchEntry,
    PatchManifest, ReportFormat, SceneEntry,
};
use rawmix_features::{train, Descriptor, Mlbp, RawMixer, TrainConfig};

use crate::error::{CliError, Result};
use crate::{verify, Command, RoleArg};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Mosaic(a) => io::write_raw(&a.out, &mosaic(&io::read_full(&a.input)?)?)?,
        Command::Unshuffle(a) => io::write_cube(&a.out, &pixel_unshuffle(&io::read_raw(&a.input)?))?,
        Command::Shuffle(a) => io::write_raw(&a.out, &pixel_shuffle(&io::read_cube(&a.input)?))?,
        Command::Wb { io: a, dump_estimate } => {
            let (out, estimate) = white_balance_with_estimate(&io::read_raw(&a.input)?);
            io::write_raw(&a.out, &out)?;
            if let Some(path) = dump_estimate {
                fs::write(path, serde_json::to_string_pretty(&estimate)? + "\n")?;
            }
        }
        Command::Augment { spec, seed, input, out } => augment(&spec, seed, &input, &out)?,
        Command::Synth {
            msfa,
            classes,
            height,
            width,
            patch_size,
            illuminant_train,
            illuminant_test,
            seed,
            out,
        } => {
            let pattern = MsfaPattern::from_id(msfa.id())?;
            for name in [&illuminant_train, &illuminant_test] {
                Illuminant::by_name(name)?;
            }
            let scenes = synth_textures(classes, height, width, &pattern, seed)?;
            fs::create_dir_all(&out)?;
            let mut entries = Vec::new();
            for (label, scene) in scenes.iter().enumerate() {
                let file = PathBuf::from(format!("scene_{label:03}.bin"));
                io::write_full(out.join(&file), scene.image())?;
                for (illuminant, role) in [(&illuminant_train, Role::Train), (&illuminant_test, Role::Test)] {
                    entries.push(SceneEntry {
                        scene: file.clone(),
                        label,
                        illuminant: illuminant.clone(),
                        role,
                    });
                }
            }
            let manifest = DatasetManifest {
                msfa: msfa.id().into(),
                patch_size,
                scenes: entries,
            };
            manifest.save(out.join("dataset.json"))?;
            println!("{}", out.join("dataset.json").display());
        }
        Command::Render { io: a, illuminant } => {
            let scene = load_scene(&a.input)?;
            io::write_raw(&a.out, &render_raw(&scene, &Illuminant::by_name(&illuminant)?)?)?;
        }
        Command::Patches { input, out, wb } => patches(&input, &out, wb)?,
        Command::Train {
            input,
            out,
            config,
            seed,
            epochs,
        } => train_model(&input, &out, config.as_deref(), seed.unwrap_or(0), epochs)?,
        Command::Extract {
            input,
            out,
            model,
            role,
        } => extract(&input, &out, model.as_deref(), role)?,
        Command::Knn { train, test, out } => knn(&train, &test, out.as_deref())?,
        Command::Bench { config, out } => bench(&config, &out)?,
        Command::Verify { msfa, seed, cases } => verify::run(msfa.id(), seed, cases)?,
    }
    Ok(())
}

fn augment(spec: &Path, seed: Option<u64>, input: &Path, out: &Path) -> Result<()> {
    let mut spec: AugmentSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if input.is_dir() {
        fs::create_dir_all(out)?;
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        for f in files {
            let img = io::read_raw(&f)?;
            io::write_raw(out.join(f.file_name().unwrap()), &spec.apply(&img)?.image)?;
        }
    } else {
        io::write_raw(out, &spec.apply(&io::read_raw(input)?)?.image)?;
    }
    Ok(())
}

fn patches(input: &Path, out: &Path, wb: bool) -> Result<()> {
    let manifest = DatasetManifest::load(input)?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for (k, e) in manifest.scenes.iter().enumerate() {
        let scene = load_scene(&e.scene)?;
        if scene.pattern().id() != manifest.msfa {
            return Err(CliError::Data(format!(
                "{} uses {}, manifest says {}",
                e.scene.display(),
                scene.pattern().id(),
                manifest.msfa
            )));
        }
        let raw = render_raw(&scene, &Illuminant::by_name(&e.illuminant)?)?;
        let set = extract_patches(&raw, manifest.patch_size, split_for(e.role)?, e.label, &e.illuminant)?;
        let role = serde_json::to_value(e.role)?.as_str().unwrap_or("unknown").to_string();
        for (i, p) in set.patches.iter().enumerate() {
            let id = format!("{role}_s{k:03}_c{:03}_{i:04}", e.label);
            let file = PathBuf::from(format!("{id}.bin"));
            let img = if wb { white_balance_with_estimate(&p.image).0 } else { p.image.clone() };
            io::write_raw(out.join(&file), &img)?;
            entries.push(PatchEntry {
                id,
                path: file,
                label: e.label,
                illuminant: e.illuminant.clone(),
                role: e.role,
            });
        }
    }
    let pm = PatchManifest {
        msfa: manifest.msfa,
        patch_size: manifest.patch_size,
        patches: entries,
    };
    pm.save(out.join("patches.json"))?;
    println!("{} patches -> {}", pm.patches.len(), out.join("patches.json").display());
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn train_model(input: &Path, out: &Path, config: Option<&Path>, seed: u64, epochs: Option<usize>) -> Result<()> {
    let cfg = read_config(config)?;
    let manifest = PatchManifest::load(input)?;
    let patches: Vec<Patch> = manifest
        .read_patches(Role::Train)?
        .into_iter()
        .map(|(e, image)| Patch {
            image,
            label: e.label,
            origin: (0, 0),
        })
        .collect();
    let classes = patches.iter().map(|p| p.label + 1).max().unwrap_or(0);
    let b = MsfaPattern::from_id(&manifest.msfa)?.width();
    let mut model = RawMixer::new(cfg.model.to_config(b, classes), seed)?;
    let tc = TrainConfig {
        seed: cfg.training.seed.wrapping_add(seed),
        epochs: epochs.unwrap_or(cfg.training.epochs),
        ..cfg.training
    };
    let history = train(&mut model, &patches, &tc)?;
    model.save(out)?;
    let best = &history.epochs.get(history.best_epoch);
    println!(
        "trained on {} patches ({} held out), best epoch {} val accuracy {}",
        history.train_count,
        history.val_count,
        history.best_epoch,
        best.and_then(|e| e.val_accuracy).map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn extract(input: &Path, out: &Path, model: Option<&Path>, role: RoleArg) -> Result<()> {
    let manifest = PatchManifest::load(input)?;
    let descriptor: Box<dyn Descriptor> = match model {
        Some(p) => Box::new(RawMixer::load(p)?),
        None => Box::new(Mlbp {
            pattern_width: MsfaPattern::from_id(&manifest.msfa)?.width(),
        }),
    };
    let roles: &[Role] = match role {
        RoleArg::Train => &[Role::Train],
        RoleArg::Test => &[Role::Test],
        RoleArg::All => &[Role::Train, Role::Test],
    };
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["id".to_string(), "label".into(), "illuminant".into()];
    header.extend((0..descriptor.dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for &r in roles {
        let items = manifest.read_patches(r)?;
        let imgs: Vec<&RawImage> = items.iter().map(|(_, img)| img).collect();
        let feats = descriptor.extract_all(&imgs)?;
        for ((e, _), f) in items.iter().zip(feats) {
            let mut row = vec![e.id.clone(), e.label.to_string(), e.illuminant.clone()];
            row.extend(f.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct FeatureRows {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

pub fn read_features(path: &Path) -> Result<FeatureRows> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = FeatureRows {
        ids: Vec::new(),
        labels: Vec::new(),
        features: Vec::new(),
    };
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Data(format!("{} row {}: bad {what}", path.display(), n + 1));
        rows.ids.push(rec.get(0).ok_or_else(|| bad("id"))?.to_string());
        rows.labels.push(rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?);
        let f = rec
            .iter()
            .skip(3)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("feature value"))?;
        rows.features.push(f);
    }
    Ok(rows)
}

fn knn(train: &Path, test: &Path, out: Option<&Path>) -> Result<()> {
    let tr = read_features(train)?;
    let te = read_features(test)?;
    let predicted = knn_classify(&tr.features, &tr.labels, &te.features, 1)?;
    let correct = predicted.iter().zip(&te.labels).filter(|(p, l)| p == l).count();
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "label", "predicted"])?;
        for ((id, l), p) in te.ids.iter().zip(&te.labels).zip(&predicted) {
            w.write_record([id.clone(), l.to_string(), p.to_string()])?;
        }
        w.flush()?;
    }
    println!(
        "accuracy {:.2}% ({correct}/{})",
        100.0 * correct as f64 / te.labels.len().max(1) as f64,
        te.labels.len()
    );
    Ok(())
}

fn bench(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_json(&fs::read_to_string(config)?)?;
    let reports = run_seeds(&cfg)?;
    fs::create_dir_all(out)?;
    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg] {
        emit_report(&reports, format, out.join(format!("report.{}", format.extension())))?;
    }
    let median = median_accuracy(&reports).unwrap_or(0.0);
    for r in &reports {
        println!("seed {} accuracy {:.2}%", r.seed, r.accuracy);
    }
    println!("median accuracy {median:.2}% over {} seeds", reports.len());
    if let Some(min) = cfg.thresholds.min_accuracy {
        if median < min {
            return Err(CliError::Acceptance(format!(
                "median accuracy {median:.2}% is below the {min:.2}% threshold"
            )));
        }
    }
    Ok(())
}
