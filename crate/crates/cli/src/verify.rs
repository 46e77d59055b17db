//! Property suite behind `rawmix verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmix_autodiff::Tensor;
use rawmix_core::augment::{AugmentKind, AugmentSpec};
use rawmix_core::constancy::white_balance;
use rawmix_core::{pixel_shuffle, pixel_unshuffle, MsfaPattern, RawImage};
use rawmix_eval::knn_classify;
use rawmix_features::{mlbp, mlbp_dim, raw_conv};

use crate::error::{CliError, Result};

fn random_image(pattern: &MsfaPattern, rng: &mut ChaCha8Rng) -> RawImage {
    let b = pattern.width();
    let (cx, cy) = (rng.random_range(3..9), rng.random_range(3..9));
    let data = (0..cx * cy * b * b).map(|_| rng.random_range(0.01..1.0)).collect();
    RawImage::new(pattern.clone(), cy * b, cx * b, data).expect("dimensions are pattern multiples")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type Check = fn(&MsfaPattern, &mut ChaCha8Rng) -> std::result::Result<(), String>;

fn shuffle_roundtrip(p: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let img = random_image(p, rng);
    if pixel_shuffle(&pixel_unshuffle(&img)) == img {
        Ok(())
    } else {
        Err("shuffle(unshuffle(x)) != x".into())
    }
}

fn raw_conv_matches_unshuffle(p: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let img = random_image(p, rng);
    let b = p.width();
    let k = rng.random_range(1..5);
    let kernels = Tensor::new(vec![k, 1, b, b], (0..k * b * b).map(|_| rng.random_range(-1.0..1.0)).collect())
        .map_err(|e| e.to_string())?;
    let maps = raw_conv(&img, &kernels).map_err(|e| e.to_string())?;
    let cube = pixel_unshuffle(&img);
    for n in 0..k {
        for y in 0..cube.rows() {
            for x in 0..cube.cols() {
                // 1x1 convolution over the unshuffled bands
                let mut want = 0.0;
                for band in 0..p.bands() {
                    let (i, j) = p.cell_of_band(band);
                    want += kernels.data()[((n * b) + j) * b + i] * cube.get(band, x, y);
                }
                let got = maps.get(n, x, y);
                if (got - want).abs() > 1e-12 {
                    return Err(format!("kernel {n} at ({x}, {y}): {got} vs {want}"));
                }
            }
        }
    }
    Ok(())
}

fn wb_illuminant_invariance(p: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let img = random_image(p, rng);
    let l: Vec<f64> = (0..p.bands()).map(|_| rng.random_range(0.05..5.0)).collect();
    let lit: Vec<f64> = (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .map(|(x, y)| img.get(x, y) * l[p.band_at_pixel(x, y)])
        .collect();
    let lit = RawImage::new(p.clone(), img.height(), img.width(), lit).map_err(|e| e.to_string())?;
    let d = max_abs_diff(white_balance(&lit).data(), white_balance(&img).data());
    if d < 1e-6 {
        Ok(())
    } else {
        Err(format!("WB differs by {d:e} under a per-band illuminant"))
    }
}

fn wb_idempotent(p: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let once = white_balance(&random_image(p, rng));
    let d = max_abs_diff(white_balance(&once).data(), once.data());
    if d < 1e-6 {
        Ok(())
    } else {
        Err(format!("WB is not idempotent: {d:e}"))
    }
}

fn augmentations_preserve(p: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let img = random_image(p, rng);
    let seed = rng.random();
    let kinds = [
        AugmentKind::Hflip,
        AugmentKind::Vflip,
        AugmentKind::TranslateX { step: 1 },
        AugmentKind::TranslateY { step: 2 },
        AugmentKind::Remodel { fraction: 0.3 },
        AugmentKind::GaussianNoise { mu: 0.0, sigma: 0.25 },
        AugmentKind::OpticalDistortion { k1: 0.05 },
    ];
    for kind in kinds {
        let out = AugmentSpec::new(kind.clone(), seed).apply(&img).map_err(|e| e.to_string())?;
        if !out.verify() {
            return Err(format!("{kind:?} moved a value onto another band"));
        }
    }
    for kind in [AugmentKind::NaiveHflip, AugmentKind::NaiveVflip] {
        if AugmentSpec::new(kind.clone(), seed).apply(&img).map_err(|e| e.to_string())?.verify() {
            return Err(format!("{kind:?} kept the band map"));
        }
    }
    Ok(())
}

fn mlbp_shape(p: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let h = mlbp(&random_image(p, rng)).map_err(|e| e.to_string())?;
    let mass: f64 = h.iter().sum();
    let bands = p.bands() as f64;
    if h.len() != mlbp_dim(p.width()) || (mass - bands).abs() > 1e-9 {
        return Err(format!("M-LBP has {} bins and mass {mass}", h.len()));
    }
    Ok(())
}

fn knn_self_match(_: &MsfaPattern, rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.random()).collect()).collect();
    let labels: Vec<usize> = (0..30).collect();
    let got = knn_classify(&pts, &labels, &pts, 1).map_err(|e| e.to_string())?;
    if got == labels {
        Ok(())
    } else {
        Err("a training point is not its own nearest neighbour".into())
    }
}

pub fn run(msfa: &str, seed: u64, cases: usize) -> Result<()> {
    let pattern = MsfaPattern::from_id(msfa)?;
    let checks: [(&str, Check); 7] = [
        ("pixel shuffle inverts unshuffle", shuffle_roundtrip),
        ("raw convolution equals unshuffle + 1x1 convolution", raw_conv_matches_unshuffle),
        ("white balance ignores per-band illumination", wb_illuminant_invariance),
        ("white balance is idempotent", wb_idempotent),
        ("augmentations keep the band map, naive flips break it", augmentations_preserve),
        ("M-LBP dimension and histogram mass", mlbp_shape),
        ("1-NN matches training points to themselves", knn_self_match),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match (0..cases).try_for_each(|_| check(&pattern, &mut rng)) {
            Ok(()) => println!("ok   {msfa}: {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {msfa}: {name}: {e}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Acceptance(format!("{failed} of {} properties failed for {msfa}", checks.len())));
    }
    Ok(())
}
