use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmix_core::{MsfaPattern, RawImage};
use rawmix_features::{mlbp, mlbp_dim, Descriptor, Mlbp};

fn random_image(seed: u64, p: MsfaPattern, side: usize) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side).map(|_| rng.random::<f64>()).collect();
    RawImage::new(p, side, side, data).unwrap()
}

#[test]
fn dimensions_per_pattern() {
    assert_eq!(mlbp_dim(2), 1024);
    assert_eq!(mlbp_dim(4), 4096);
    assert_eq!(mlbp_dim(5), 6400);
    for id in MsfaPattern::builtin_ids() {
        let p = MsfaPattern::from_id(id).unwrap();
        let b = p.width();
        let img = RawImage::filled(p, 4 * b, 4 * b, 0.3).unwrap();
        assert_eq!(mlbp(&img).unwrap().len(), 256 * b * b);
        assert_eq!(Mlbp { pattern_width: b }.dim(), 256 * b * b);
    }
}

#[test]
fn constant_image_codes_are_all_ones() {
    let img = RawImage::filled(MsfaPattern::imec4x4(), 20, 20, 0.7).unwrap();
    let h = mlbp(&img).unwrap();
    for band in 0..16 {
        for bin in 0..256 {
            assert_eq!(h[band * 256 + bin], if bin == 255 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn needs_three_patterns_per_side() {
    let img = RawImage::filled(MsfaPattern::imec2x2(), 4, 6, 0.1).unwrap();
    assert!(mlbp(&img).is_err());
    let img = RawImage::filled(MsfaPattern::imec2x2(), 6, 6, 0.1).unwrap();
    assert!(mlbp(&img).is_ok());
}

#[test]
fn descriptor_rejects_other_pattern() {
    let img = RawImage::filled(MsfaPattern::imec2x2(), 8, 8, 0.1).unwrap();
    assert!(Mlbp { pattern_width: 4 }.extract(&img).is_err());
}

/// Walks every pixel, finds its band, and compares against neighbours one
/// basic pattern apart along each axis.
fn naive(img: &RawImage) -> Vec<f64> {
    let p = img.pattern();
    let b = p.width() as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut hist = vec![vec![0.0; 256]; p.bands()];
    for y in b..h - b {
        for x in b..w - b {
            let c = img.get(x as usize, y as usize);
            let ring = [(-b, -b), (0, -b), (b, -b), (b, 0), (b, b), (0, b), (-b, b), (-b, 0)];
            let mut code = 0;
            for (k, (dx, dy)) in ring.iter().enumerate() {
                let nx = (x + dx) as usize;
                let ny = (y + dy) as usize;
                assert_eq!(p.band_at_pixel(nx, ny), p.band_at_pixel(x as usize, y as usize));
                if img.get(nx, ny) >= c {
                    code |= 1 << k;
                }
            }
            hist[p.band_at_pixel(x as usize, y as usize)][code] += 1.0;
        }
    }
    hist.into_iter()
        .flat_map(|hb| {
            let total: f64 = hb.iter().sum();
            hb.into_iter().map(move |v| v / total)
        })
        .collect()
}

#[test]
fn matches_naive_oracle_on_20x20() {
    let img = random_image(4, MsfaPattern::imec2x2(), 20);
    assert_eq!(mlbp(&img).unwrap(), naive(&img));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn histogram_mass_is_band_count(seed in any::<u64>(), which in 0usize..3, cells in 3usize..7) {
        let p = MsfaPattern::from_id(MsfaPattern::builtin_ids()[which]).unwrap();
        let b = p.width();
        let img = random_image(seed, p, cells * b);
        let h = mlbp(&img).unwrap();
        prop_assert!((h.iter().sum::<f64>() - (b * b) as f64).abs() < 1e-9);
        prop_assert_eq!(&h, &naive(&img));
    }
}
