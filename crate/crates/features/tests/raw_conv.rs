use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawmix_autodiff::Tensor;
use rawmix_core::{pixel_unshuffle, MsfaPattern, RawImage};
use rawmix_features::raw_conv;

fn random_image(rng: &mut ChaCha8Rng, p: &MsfaPattern, m: usize) -> RawImage {
    let side = m * p.width();
    let data = (0..side * side).map(|_| rng.random::<f64>()).collect();
    RawImage::new(p.clone(), side, side, data).unwrap()
}

fn random_kernels(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Tensor {
    Tensor::new(vec![n, 1, b, b], (0..n * b * b).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Unshuffle, then mix the B^2 band planes with each kernel flattened in band order.
fn unshuffle_oracle(img: &RawImage, kernels: &Tensor) -> Vec<f64> {
    let p = img.pattern();
    let b = p.width();
    let cube = pixel_unshuffle(img);
    let plane = cube.rows() * cube.cols();
    let n = kernels.shape()[0];
    let mut out = vec![0.0; n * plane];
    for k in 0..n {
        let per_band: Vec<f64> = (0..p.bands())
            .map(|band| {
                let (i, j) = p.cell_of_band(band);
                kernels.data()[k * b * b + j * b + i]
            })
            .collect();
        for (band, w) in per_band.iter().enumerate() {
            for (o, v) in out[k * plane..(k + 1) * plane].iter_mut().zip(cube.channel(band)) {
                *o += w * v;
            }
        }
    }
    out
}

#[test]
fn ones_kernel_sums_each_basic_patch() {
    let p = MsfaPattern::imec4x4();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, &p, 3);
    let maps = raw_conv(&img, &Tensor::full(vec![1, 1, 4, 4], 1.0)).unwrap();
    for y in 0..3 {
        for x in 0..3 {
            let mut s = 0.0;
            for j in 0..4 {
                for i in 0..4 {
                    s += img.get(4 * x + i, 4 * y + j);
                }
            }
            assert!((maps.get(0, x, y) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn indicator_kernel_samples_one_band() {
    let p = MsfaPattern::imec5x5();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, &p, 4);
    let cube = pixel_unshuffle(&img);
    for (i, j) in [(0, 0), (3, 1), (4, 4)] {
        let mut k = Tensor::zeros(vec![1, 1, 5, 5]);
        k.data_mut()[j * 5 + i] = 1.0;
        let maps = raw_conv(&img, &k).unwrap();
        assert_eq!(maps.data, cube.channel(p.band_at_cell(i, j)));
    }
}

#[test]
fn kernel_size_must_match_pattern() {
    let p = MsfaPattern::imec2x2();
    let img = RawImage::filled(p, 8, 8, 0.5).unwrap();
    assert!(raw_conv(&img, &Tensor::zeros(vec![3, 1, 3, 3])).is_err());
    assert!(raw_conv(&img, &Tensor::zeros(vec![3, 2, 2])).is_err());
}

#[test]
fn small_case_matches_unshuffle_oracle() {
    let p = MsfaPattern::imec2x2();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, &p, 3);
    let k = random_kernels(&mut rng, 5, 2);
    let maps = raw_conv(&img, &k).unwrap();
    let oracle = unshuffle_oracle(&img, &k);
    for (a, b) in maps.data.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn equals_unshuffle_then_pointwise(seed in any::<u64>(), which in 0usize..3, m in 1usize..6, n in 1usize..5) {
        let p = MsfaPattern::from_id(MsfaPattern::builtin_ids()[which]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, &p, m);
        let k = random_kernels(&mut rng, n, p.width());
        let maps = raw_conv(&img, &k).unwrap();
        prop_assert_eq!((maps.rows, maps.cols), (m, m));
        for (a, b) in maps.data.iter().zip(unshuffle_oracle(&img, &k)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Bumping one pixel moves exactly the basic patch that holds it, by the
    /// kernel coefficient of that pixel's cell.
    #[test]
    fn perturbation_stays_with_its_band(seed in any::<u64>(), x in 0usize..16, y in 0usize..16, delta in 0.01f64..1.0) {
        let p = MsfaPattern::imec4x4();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, &p, 4);
        let k = random_kernels(&mut rng, 3, 4);
        let mut data = img.data().to_vec();
        data[y * 16 + x] += delta;
        let bumped = RawImage::new(p.clone(), 16, 16, data).unwrap();
        let (before, after) = (raw_conv(&img, &k).unwrap(), raw_conv(&bumped, &k).unwrap());
        for n in 0..3 {
            for cy in 0..4 {
                for cx in 0..4 {
                    let diff = after.get(n, cx, cy) - before.get(n, cx, cy);
                    let expected = if (cx, cy) == (x / 4, y / 4) {
                        delta * k.data()[n * 16 + (y % 4) * 4 + x % 4]
                    } else {
                        0.0
                    };
                    prop_assert!((diff - expected).abs() < 1e-12);
                }
            }
        }
    }
}
