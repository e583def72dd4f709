use autolabel_core::par::Executor;
use autolabel_core::pipeline::{classifier_for, extract_sequence, run_pipeline, PipelineConfig};
use autolabel_core::synth::{generate_scene_with, perturb_detections, NoiseConfig, SceneConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn executors() -> [(&'static str, Executor); 2] {
    [("sequential", Executor::sequential()), ("parallel", Executor::parallel(0))]
}

fn scene_config() -> SceneConfig {
    SceneConfig {
        seed: 1,
        clutter_points: 2000,
        ..SceneConfig::default()
    }
}

fn bench_synth(c: &mut Criterion) {
    let cfg = scene_config();
    let mut group = c.benchmark_group("generate_scene");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| b.iter(|| generate_scene_with(&cfg, exec).unwrap()));
    }
    group.finish();
}

fn bench_pipeline(c: &mut Criterion) {
    let clean = generate_scene_with(&scene_config(), &Executor::default()).unwrap();
    let ds = perturb_detections(&clean, &NoiseConfig::default(), 1).unwrap();
    let cfg = PipelineConfig::default();
    let clf = classifier_for(&cfg, None);

    let mut group = c.benchmark_group("extract_sequence");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| b.iter(|| extract_sequence(&ds, &cfg, &clf, exec).unwrap()));
    }
    group.finish();

    let mut group = c.benchmark_group("run_pipeline");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| b.iter(|| run_pipeline(&ds, &cfg, None, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_synth, bench_pipeline);
criterion_main!(benches);
