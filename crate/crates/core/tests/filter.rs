mod common;

use common::{reference_filter as reference, rel_l2};
use hocrf_core::filter::{brute_filter, Backend, FeatureField, FilterPlan};
use hocrf_core::grid::PixelGrid;
use hocrf_core::synthetic::{noise_image, scene_image};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_values(n: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bilateral_8x8(seed: u64) -> (FeatureField, Vec<Vec<f64>>) {
    let grid = PixelGrid::new(8, 8).unwrap();
    let image = noise_image(grid, seed);
    let (ta, tb) = (3.0, 40.0);
    let raw: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| {
            let (x, y) = grid.coords(i);
            let p = image.pixel(i);
            vec![x as f64 / ta, y as f64 / ta, p[0] / tb, p[1] / tb, p[2] / tb]
        })
        .collect();
    (FeatureField::bilateral(&image, ta, tb).unwrap(), raw)
}

#[test]
fn brute_matches_independent_double_loop() {
    for seed in 0..5 {
        let (f, raw) = bilateral_8x8(seed);
        let v = random_values(64, 3, seed + 100);
        let got = brute_filter(&f, v.view());
        let want = reference(&raw, &v);
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "seed {seed}: {err}");

        let grid = PixelGrid::new(8, 8).unwrap();
        let s = FeatureField::spatial(grid, 1.7).unwrap();
        let raw: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let (x, y) = grid.coords(i);
                vec![x as f64 / 1.7, y as f64 / 1.7]
            })
            .collect();
        let got = brute_filter(&s, v.view());
        let err = got
            .iter()
            .zip(&reference(&raw, &v))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "spatial seed {seed}: {err}");
    }
}

#[test]
fn backends_agree_on_32x32() {
    let grid = PixelGrid::new(32, 32).unwrap();
    let v = random_values(grid.len(), 3, 9).mapv(|x| x.abs());
    for (name, image) in [("noise", noise_image(grid, 4)), ("scene", scene_image(grid, 4))] {
        let families = [
            ("spatial", FeatureField::spatial(grid, 3.0).unwrap()),
            ("bilateral", FeatureField::bilateral(&image, 10.0, 20.0).unwrap()),
        ];
        for (family, f) in families {
            let exact = FilterPlan::build(f.clone(), Backend::Brute).filter(v.view()).unwrap();
            let approx = FilterPlan::build(f, Backend::Lattice).filter(v.view()).unwrap();
            let err = rel_l2(&approx, &exact);
            assert!(err < 0.05, "{name}/{family}: {err}");
        }
    }
}

#[test]
fn filter_at_matches_full_filter() {
    let (f, _) = bilateral_8x8(2);
    let v = random_values(64, 2, 5);
    let full = brute_filter(&f, v.view());
    for backend in [Backend::Brute, Backend::Lattice] {
        let plan = FilterPlan::build(f.clone(), backend);
        for i in [0, 17, 63] {
            let row = plan.filter_at(i, v.view());
            for c in 0..2 {
                assert!((row[c] - full[[i, c]]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn filtering_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, lattice in any::<bool>()) {
        let (f, _) = bilateral_8x8(seed);
        let backend = if lattice { Backend::Lattice } else { Backend::Brute };
        let plan = FilterPlan::build(f, backend);
        let u = random_values(64, 2, seed + 1);
        let w = random_values(64, 2, seed + 2);
        let combined = plan.filter((&u * a + &w * b).view()).unwrap();
        let separate = plan.filter(u.view()).unwrap() * a + plan.filter(w.view()).unwrap() * b;
        let scale = combined.iter().map(|x| x.abs()).fold(1.0, f64::max);
        for (x, y) in combined.iter().zip(&separate) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn adjoint_identity_holds(seed in 0u64..1000, lattice in any::<bool>()) {
        let (f, _) = bilateral_8x8(seed);
        let backend = if lattice { Backend::Lattice } else { Backend::Brute };
        let plan = FilterPlan::build(f, backend);
        let u = random_values(64, 3, seed + 3);
        let w = random_values(64, 3, seed + 4);
        let lhs = dot(&plan.filter(u.view()).unwrap(), &w);
        let rhs = dot(&u, &plan.filter_adjoint(w.view()).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn constant_features_average_everything_else(n in 2usize..12, value in -5.0f64..5.0) {
        let grid = PixelGrid::new(n, 1).unwrap();
        let f = FeatureField::new(grid, 2, vec![0.5; 2 * n]).unwrap();
        let v = Array2::from_elem((n, 1), value);
        let out = brute_filter(&f, v.view());
        for x in out.iter() {
            prop_assert!((x - value * (n - 1) as f64).abs() < 1e-9);
        }
    }
}
