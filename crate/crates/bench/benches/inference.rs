use criterion::{criterion_group, criterion_main, Criterion};
use hocrf_core::autodiff::{gradcheck_semantic, GradcheckSpec};
use hocrf_core::filter::Backend;
use hocrf_core::instance::{run_pipeline, PipelineConfig};
use hocrf_core::potentials::PairwiseModel;
use hocrf_core::semantic::{self, InferenceSettings};
use hocrf_core::synthetic::{occlusion_scene, random_instance, RandomInstanceSpec};
use std::hint::black_box;

fn inference(c: &mut Criterion) {
    let scene = occlusion_scene(0);
    let model =
        PairwiseModel::build(scene.config.clone(), scene.grid(), Some(&scene.image), Backend::Lattice).unwrap();
    let cfg = PipelineConfig::for_model(&model);

    let mut group = c.benchmark_group("occlusion scene");
    group.sample_size(20);
    group.bench_function("pipeline", |b| {
        b.iter(|| run_pipeline(black_box(&scene.unary), &scene.detections, &model, &scene.params, &cfg).unwrap())
    });
    group.bench_function("model build", |b| {
        b.iter(|| {
            PairwiseModel::build(scene.config.clone(), scene.grid(), Some(black_box(&scene.image)), Backend::Lattice)
                .unwrap()
        })
    });
    group.finish();

    let inst = random_instance(&RandomInstanceSpec {
        width: 32,
        height: 32,
        num_detections: 4,
        backend: Backend::Lattice,
        ..Default::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("mean field 32x32");
    group.sample_size(20);
    for (name, record) in [("forward", false), ("forward with tape", true)] {
        let s = InferenceSettings {
            record_tape: record,
            ..Default::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| semantic::run(black_box(&inst.unary), &inst.detections, &inst.pairwise, &inst.params, &s).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    group.bench_function("semantic 6x6", |b| {
        b.iter(|| gradcheck_semantic(black_box(&GradcheckSpec::default())).unwrap())
    });
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
