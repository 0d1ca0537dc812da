use std::sync::Arc;

use hocrf_core::filter::{Backend, FeatureField, FilterPlan};
use hocrf_core::grid::{BoundingBox, ColorImage, PixelGrid};
use hocrf_core::instance::{
    decode_instances, foreground_heuristic, identify_instances, instance_pairwise,
    instance_unaries, naive_baseline, nms_indices, run_instance_crf, run_pipeline,
    InstanceLabelSpace, PipelineConfig,
};
use hocrf_core::potentials::{Detection, DistributionField, KernelSpec, PairwiseConfig, PairwiseModel};
use hocrf_core::semantic::InferenceSettings;
use hocrf_core::synthetic::occlusion_scene;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(grid: PixelGrid, l: usize, rng: &mut ChaCha8Rng) -> DistributionField {
    let mut q = Array2::from_shape_fn((grid.len(), l), |_| rng.gen_range(0.0..1.0));
    for mut row in q.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    DistributionField::new(grid, q).unwrap()
}

fn random_box(grid: PixelGrid, rng: &mut ChaCha8Rng) -> BoundingBox {
    let x0 = rng.gen_range(0..grid.width());
    let y0 = rng.gen_range(0..grid.height());
    BoundingBox::new(
        x0,
        y0,
        rng.gen_range(x0 + 1..=grid.width()),
        rng.gen_range(y0 + 1..=grid.height()),
    )
}

fn random_detections(grid: PixelGrid, l: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Detection> {
    (0..d)
        .map(|_| {
            let bbox = random_box(grid, rng);
            let mut det =
                Detection::from_box(&grid, rng.gen_range(1..l), rng.gen_range(0.05..0.95), bbox)
                    .unwrap();
            det.y_marginal = rng.gen_range(0.0..1.0);
            det
        })
        .collect()
}

fn area_iou(a: [usize; 4], b: [usize; 4]) -> f64 {
    let w = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let h = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = (w * h) as f64;
    let area = |r: [usize; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    inter / (area(a) + area(b) - inter)
}

/// A box survives when no surviving box of its class that ranks above it
/// overlaps it enough; evaluated by recursion over the rank order.
fn nms_oracle(boxes: &[(usize, f64, BoundingBox)], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let ranks_above = |i: usize, j: usize| boxes[j].1 > boxes[i].1 || (boxes[j].1 == boxes[i].1 && j < i);
    fn keep(
        i: usize,
        boxes: &[(usize, f64, BoundingBox)],
        thr: f64,
        above: &dyn Fn(usize, usize) -> bool,
        memo: &mut Vec<Option<bool>>,
    ) -> bool {
        if let Some(k) = memo[i] {
            return k;
        }
        let mut k = true;
        for j in 0..boxes.len() {
            if j != i
                && above(i, j)
                && boxes[j].0 == boxes[i].0
                && area_iou(boxes[i].2.as_array(), boxes[j].2.as_array()) >= thr
                && keep(j, boxes, thr, above, memo)
            {
                k = false;
                break;
            }
        }
        memo[i] = Some(k);
        k
    }
    let mut memo = vec![None; n];
    let mut kept: Vec<usize> = (0..n)
        .filter(|&i| keep(i, boxes, thr, &ranks_above, &mut memo))
        .collect();
    kept.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1).then(a.cmp(&b)));
    kept
}

/// Mean field written directly from the update rule, brute-force kernels.
fn reference_instance_crf(
    unary: &Array2<f64>,
    features: &[Vec<Vec<f64>>],
    weights: &[f64],
    iterations: usize,
) -> Array2<f64> {
    let (n, l) = unary.dim();
    let softmax = |e: &Array2<f64>| {
        let mut q = e.mapv(|v| -v);
        for mut row in q.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        q
    };
    let mut q = softmax(unary);
    for _ in 0..iterations {
        let mut e = unary.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut k = 0.0;
                for (f, w) in features.iter().zip(weights) {
                    let d2: f64 = f[i].iter().zip(&f[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    k += w * (-0.5 * d2).exp();
                }
                for a in 0..l {
                    // Potts: every other label of j costs k.
                    e[[i, a]] += k * (1.0 - q[[j, a]]);
                }
            }
        }
        q = softmax(&e);
    }
    q
}

/// Two overlapping discs of one class in different colours.
struct Circles {
    grid: PixelGrid,
    image: ColorImage,
    owner: Vec<usize>,
    semantic: DistributionField,
    detections: Vec<Detection>,
}

fn circles() -> Circles {
    let grid = PixelGrid::new(14, 9).unwrap();
    let discs = [(5.0, 4.5, 3.6), (9.0, 4.5, 3.6)];
    let owner: Vec<usize> = (0..grid.len())
        .map(|i| {
            let (x, y) = grid.coords(i);
            let inside = |(cx, cy, r): (f64, f64, f64)| {
                (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r
            };
            if inside(discs[0]) {
                1
            } else if inside(discs[1]) {
                2
            } else {
                0
            }
        })
        .collect();
    let pixels = owner
        .iter()
        .map(|&o| match o {
            1 => [220.0, 30.0, 30.0],
            2 => [30.0, 40.0, 220.0],
            _ => [128.0, 128.0, 128.0],
        })
        .collect();
    let image = ColorImage::new(grid, pixels).unwrap();
    let q = Array2::from_shape_fn((grid.len(), 2), |(i, l)| {
        let p = if owner[i] == 0 { 0.1 } else { 0.9 };
        if l == 1 {
            p
        } else {
            1.0 - p
        }
    });
    let semantic = DistributionField::new(grid, q).unwrap();
    let mut detections = vec![
        Detection::from_box(&grid, 1, 0.9, BoundingBox::new(1, 0, 10, 9)).unwrap(),
        Detection::from_box(&grid, 1, 0.8, BoundingBox::new(5, 0, 14, 9)).unwrap(),
    ];
    detections[0].y_marginal = 0.95;
    detections[1].y_marginal = 0.85;
    Circles {
        grid,
        image,
        owner,
        semantic,
        detections,
    }
}

#[test]
fn instance_crf_matches_reference_and_follows_appearance() {
    let c = circles();
    let (ta, tb, tg) = (4.0, 30.0, 1.5);
    let bil = FeatureField::bilateral(&c.image, ta, tb).unwrap();
    let spa = FeatureField::spatial(c.grid, tg).unwrap();
    let raw = |f: &FeatureField| (0..c.grid.len()).map(|i| f.feature(i).to_vec()).collect::<Vec<_>>();
    let features = vec![raw(&bil), raw(&spa)];
    let weights = [1.0, 0.3];

    let cfg = PairwiseConfig::potts(
        2,
        vec![KernelSpec::bilateral(1.0, ta, tb), KernelSpec::spatial(1.0, tg)],
    )
    .unwrap();
    let plans = vec![
        Arc::new(FilterPlan::build(bil, Backend::Brute)),
        Arc::new(FilterPlan::build(spa, Backend::Brute)),
    ];
    let semantic_model = PairwiseModel::from_plans(cfg, plans).unwrap();
    let ident = identify_instances(&c.semantic, &c.detections).unwrap();
    let unaries = instance_unaries(&ident);
    let model = instance_pairwise(&semantic_model, &weights, 3).unwrap();
    let got = run_instance_crf(&unaries, &model, &InferenceSettings::with_iterations(5)).unwrap();
    let want = reference_instance_crf(&unaries.energies().to_owned(), &features, &weights, 5);
    let err = got.q.q().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");

    let space = InstanceLabelSpace::from_detections(&c.detections).unwrap();
    let before = decode_instances(&ident, &space).unwrap();
    let after = decode_instances(&got.q, &space).unwrap();
    let argmax = |q: &Array2<f64>, i: usize| {
        let r = q.row(i);
        (0..r.len()).fold(0, |b, k| if r[k] > r[b] { k } else { b })
    };
    let changed: Vec<usize> = (0..c.grid.len())
        .filter(|&i| before.labels()[i] != after.labels()[i])
        .collect();
    let reference_changed: Vec<usize> = (0..c.grid.len())
        .filter(|&i| argmax(&want, i) != argmax(&ident.q().to_owned(), i))
        .collect();
    assert_eq!(changed, reference_changed);
    assert!(!changed.is_empty());
    // Pixels of the back disc inside the front box were claimed by the
    // front detection; the bilateral term hands them back.
    for &i in &changed {
        assert_eq!(after.labels()[i], c.owner[i], "pixel {i}");
    }
}

#[test]
fn no_detections_give_background_everywhere() {
    let c = circles();
    let ident = identify_instances(&c.semantic, &[]).unwrap();
    assert!(ident.q().iter().all(|&v| v == 1.0));
    let cfg = PairwiseConfig::potts(2, vec![KernelSpec::spatial(1.0, 2.0)]).unwrap();
    let model = PairwiseModel::build(cfg, c.grid, None, Backend::Brute).unwrap();
    let inst = instance_pairwise(&model, &[2.0], 1).unwrap();
    let out = run_instance_crf(&instance_unaries(&ident), &inst, &InferenceSettings::default()).unwrap();
    assert!(out.q.q().iter().all(|&v| v == 1.0));
    let map = decode_instances(&out.q, &InstanceLabelSpace::default()).unwrap();
    assert!(map.instances().is_empty());
}

#[test]
fn zero_weights_return_the_identification() {
    let c = circles();
    let ident = identify_instances(&c.semantic, &c.detections).unwrap();
    let cfg = PairwiseConfig::potts(2, vec![KernelSpec::spatial(1.0, 2.0)]).unwrap();
    let model = PairwiseModel::build(cfg, c.grid, None, Backend::Lattice).unwrap();
    let inst = instance_pairwise(&model, &[0.0], 3).unwrap();
    let out = run_instance_crf(&instance_unaries(&ident), &inst, &InferenceSettings::default()).unwrap();
    // Only the floor on the zero branch separates the two.
    assert!(out.q.max_abs_diff(&ident) < 3e-6);
}

#[test]
fn pipeline_instances_inherit_class_and_recalibrated_score() {
    let scene = occlusion_scene(0);
    let model = PairwiseModel::build(scene.config.clone(), scene.grid(), Some(&scene.image), Backend::Lattice)
        .unwrap();
    let cfg = PipelineConfig::for_model(&model);
    let r = run_pipeline(&scene.unary, &scene.detections, &model, &scene.params, &cfg).unwrap();
    assert!(!r.map.instances().is_empty());
    for info in r.map.instances() {
        assert_eq!(info.class, scene.detections[info.detection].label);
        let k = info.index - 1;
        assert_eq!(r.labels.instance(info.index).unwrap().detection, info.detection);
        assert_eq!(info.score, r.semantic.detections[k].y_marginal);
    }
}

#[test]
fn naive_gives_contested_pixels_to_the_higher_score() {
    let c = circles();
    let map = naive_baseline(&c.semantic, &c.detections).unwrap();
    for i in 0..c.grid.len() {
        let (x, _) = c.grid.coords(i);
        let person = c.semantic.get(i, 1) > 0.5;
        let expected = match (person, (1..10).contains(&x), (5..14).contains(&x)) {
            (false, _, _) => 0,
            (true, true, _) => 1,
            (true, false, true) => 2,
            _ => 0,
        };
        assert_eq!(map.labels()[i], expected, "pixel {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nms_matches_recursive_oracle(seed in 0u64..10_000, thr in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(10, 10).unwrap();
        let boxes: Vec<_> = (0..5)
            .map(|_| {
                // Coarse scores so ties occur.
                let s = rng.gen_range(1..6) as f64 / 6.0;
                (rng.gen_range(1..3), s, random_box(grid, &mut rng))
            })
            .collect();
        prop_assert_eq!(nms_indices(&boxes, thr), nms_oracle(&boxes, thr));
    }

    #[test]
    fn heuristic_matches_scan(seed in 0u64..10_000, thr in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(9, 7).unwrap();
        let q = random_field(grid, 3, &mut rng);
        let bbox = random_box(grid, &mut rng);
        let got = foreground_heuristic(bbox, 2, &q, thr).unwrap();
        let [x0, y0, x1, y1] = bbox.as_array();
        let mut scan = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if q.get(y * 9 + x, 2) >= thr {
                    scan.push(y * 9 + x);
                }
            }
        }
        if scan.is_empty() {
            let (dx, dy) = ((x1 - x0) / 4, (y1 - y0) / 4);
            for y in y0 + dy..y1 - dy {
                for x in x0 + dx..x1 - dx {
                    scan.push(y * 9 + x);
                }
            }
        }
        prop_assert!(!got.is_empty());
        prop_assert_eq!(got, scan);
    }

    #[test]
    fn identification_support_and_normalisation(seed in 0u64..10_000, d in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(8, 6).unwrap();
        let q = random_field(grid, 3, &mut rng);
        let dets = random_detections(grid, 3, d, &mut rng);
        let p = identify_instances(&q, &dets).unwrap();
        for i in 0..grid.len() {
            let row = p.row(i);
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            for (k, det) in dets.iter().enumerate() {
                if !det.bbox().contains_pixel(&grid, i) {
                    prop_assert_eq!(row[k + 1], 0.0);
                }
            }
        }
    }

    #[test]
    fn identification_is_monotone_in_y(seed in 0u64..10_000, bump in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(8, 6).unwrap();
        let q = random_field(grid, 3, &mut rng);
        let dets = random_detections(grid, 3, 3, &mut rng);
        let mut raised = dets.clone();
        raised[1].y_marginal = dets[1].y_marginal + bump * (1.0 - dets[1].y_marginal);
        let a = identify_instances(&q, &dets).unwrap();
        let b = identify_instances(&q, &raised).unwrap();
        for i in dets[1].bbox().pixels(&grid) {
            prop_assert!(b.get(i, 2) >= a.get(i, 2) - 1e-15);
        }
    }

    #[test]
    fn instance_crf_is_permutation_equivariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(7, 5).unwrap();
        let q = random_field(grid, 3, &mut rng);
        let dets = random_detections(grid, 3, 3, &mut rng);
        let perm = [2usize, 0, 1];
        let permuted: Vec<Detection> = perm.iter().map(|&k| dets[k].clone()).collect();
        let cfg = PairwiseConfig::potts(3, vec![KernelSpec::spatial(1.0, 1.5)]).unwrap();
        let model = PairwiseModel::build(cfg, grid, None, Backend::Brute).unwrap();
        let inst = instance_pairwise(&model, &[1.2], 4).unwrap();
        let settings = InferenceSettings::with_iterations(3);
        let run = |d: &[Detection]| {
            let p = identify_instances(&q, d).unwrap();
            run_instance_crf(&instance_unaries(&p), &inst, &settings).unwrap().q
        };
        let a = run(&dets);
        let b = run(&permuted);
        for i in 0..grid.len() {
            prop_assert!((a.get(i, 0) - b.get(i, 0)).abs() < 1e-12);
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((b.get(i, new + 1) - a.get(i, old + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_matches_argmax_scan(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(6, 5).unwrap();
        let dets = random_detections(grid, 3, 3, &mut rng);
        // Quantised probabilities so ties are common.
        let mut q = Array2::from_shape_fn((grid.len(), 4), |_| rng.gen_range(0..4) as f64 + 1.0);
        for mut row in q.outer_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let field = DistributionField::new(grid, q.clone()).unwrap();
        let space = InstanceLabelSpace::from_detections(&dets).unwrap();
        let map = decode_instances(&field, &space).unwrap();
        for i in 0..grid.len() {
            let mut best = 0;
            for k in 1..4 {
                if q[[i, k]] > q[[i, best]] {
                    best = k;
                }
            }
            prop_assert_eq!(map.labels()[i], best);
        }
        for info in map.instances() {
            prop_assert!(info.pixels > 0);
            prop_assert_eq!(info.class, dets[info.index - 1].label());
        }
    }
}
