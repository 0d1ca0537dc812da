use std::sync::Arc;

use hocrf_core::autodiff::{
    backward, backward_with_y, gradcheck_composed, gradcheck_semantic, gradcheck_semantic_with,
    GradcheckInstance, GradcheckSpec,
};
use hocrf_core::filter::{Backend, FeatureField, FilterPlan};
use hocrf_core::grid::{BoundingBox, PixelGrid};
use hocrf_core::potentials::{
    Detection, DetectionParams, KernelSpec, PairwiseConfig, PairwiseModel, UnaryField,
};
use hocrf_core::semantic::{self, InferenceSettings};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn semantic_gradients_match_finite_differences() {
    let report = gradcheck_semantic(&GradcheckSpec::default()).unwrap();
    println!("{report}");
    assert!(report.passed);
    assert_eq!(report.groups.len(), 5);
}

#[test]
fn composed_gradients_match_finite_differences() {
    let report = gradcheck_composed(&GradcheckSpec::default()).unwrap();
    println!("{report}");
    assert!(report.passed);
    assert_eq!(report.groups.len(), 6);
}

#[test]
fn single_round_passes_tight_tolerance() {
    let spec = GradcheckSpec {
        iterations: 1,
        tolerance: 1e-5,
        ..Default::default()
    };
    let report = gradcheck_semantic(&spec).unwrap();
    println!("{report}");
    assert!(report.passed);
}

#[test]
fn other_seeds_pass() {
    for seed in [1, 2, 3] {
        let spec = GradcheckSpec {
            seed,
            ..Default::default()
        };
        assert!(gradcheck_semantic(&spec).unwrap().passed, "seed {seed}");
    }
}

#[test]
fn corrupted_adjoint_fails() {
    let spec = GradcheckSpec::default();
    let report = gradcheck_semantic_with(&spec, &|tape| {
        let grid = tape.grid();
        let wrong: Vec<Arc<FilterPlan>> = tape
            .pairwise()
            .plans()
            .iter()
            .map(|_| {
                let f = FeatureField::spatial(grid, 0.7).unwrap();
                Arc::new(FilterPlan::build(f, Backend::Brute))
            })
            .collect();
        tape.replace_plans(wrong)
    })
    .unwrap();
    assert!(!report.passed);
    let kernel = report.groups.iter().find(|g| g.name == "unaries").unwrap();
    assert!(kernel.max_rel_err > 1e-2);
}

#[test]
fn zero_upstream_gives_zero_bundle() {
    let inst = GradcheckInstance::random(&GradcheckSpec::default()).unwrap();
    let tape = inst.semantic_tape().unwrap();
    let b = backward(&tape, Array2::zeros(inst.unary.dim()).view()).unwrap();
    assert!(b.d_unary.iter().all(|&v| v == 0.0));
    assert!(b.d_kernel_weights.iter().all(|&v| v == 0.0));
    assert!(b.d_compatibility.iter().all(|&v| v == 0.0));
    assert!(b.d_class_weights.iter().all(|&v| v == 0.0));
    assert!(b.d_y_unary_inputs.iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_are_deterministic() {
    let inst = GradcheckInstance::random(&GradcheckSpec::default()).unwrap();
    let a = backward_with_y(&inst.semantic_tape().unwrap(), inst.loss_q.view(), Some(&inst.loss_y))
        .unwrap();
    let b = backward_with_y(&inst.semantic_tape().unwrap(), inst.loss_q.view(), Some(&inst.loss_y))
        .unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
}

#[test]
fn tape_replays_bitwise() {
    let inst = GradcheckInstance::random(&GradcheckSpec::default()).unwrap();
    let tape = inst.semantic_tape().unwrap();
    assert_eq!(tape.rounds(), 3);
    tape.replay().unwrap();
}

#[test]
fn mismatched_upstream_shape_is_rejected() {
    let inst = GradcheckInstance::random(&GradcheckSpec::default()).unwrap();
    let tape = inst.semantic_tape().unwrap();
    assert!(backward(&tape, Array2::zeros((3, 3)).view()).is_err());
    assert!(backward_with_y(&tape, inst.loss_q.view(), Some(&[1.0])).is_err());
}

/// Decoupled pixels: `Q_T = softmax(-U)` for every `T`, so the gradient is
/// the softmax Jacobian alone.
#[test]
fn decoupled_pixels_match_softmax_jacobian() {
    let grid = PixelGrid::new(3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-2.0..2.0));
    let g = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
    let unary = UnaryField::new(grid, u.clone()).unwrap();
    let cfg = PairwiseConfig::potts(3, vec![KernelSpec::spatial(0.0, 3.0)]).unwrap();
    let model = PairwiseModel::build(cfg, grid, None, Backend::Brute).unwrap();
    let det = Detection::from_box(&grid, 1, 0.6, BoundingBox::new(0, 0, 2, 2)).unwrap();
    let params = DetectionParams::new(vec![0.0, 0.0]).unwrap();
    let settings = InferenceSettings {
        iterations: 4,
        record_tape: true,
        ..Default::default()
    };
    let r = semantic::run(&unary, &[det], &model, &params, &settings).unwrap();
    let b = backward(r.tape.as_ref().unwrap(), g.view()).unwrap();
    for i in 0..6 {
        let z: f64 = (0..3).map(|l| (-u[[i, l]]).exp()).sum();
        let q: Vec<f64> = (0..3).map(|l| (-u[[i, l]]).exp() / z).collect();
        let inner: f64 = (0..3).map(|l| q[l] * g[[i, l]]).sum();
        for l in 0..3 {
            let expected = -q[l] * (g[[i, l]] - inner);
            assert!((b.d_unary[[i, l]] - expected).abs() < 1e-14);
        }
    }
    // the class weight of a class that never appears has zero gradient
    assert_eq!(b.d_class_weights[1], 0.0);
}
