use criterion::{criterion_group, criterion_main, Criterion};
use openmatch_bench::{default_dataset, single_step_config};
use openmatch_core::trainer::{select_pseudo_inliers, Trainer};
use openmatch_core::ModelParams;
use std::hint::black_box;

fn training_step(c: &mut Criterion) {
    let dataset = default_dataset();
    let config = single_step_config();
    c.bench_function("train_step_default", |b| {
        b.iter(|| {
            let mut t = Trainer::new(&dataset, config.clone()).unwrap();
            black_box(t.run_epoch().unwrap())
        })
    });
}

fn selection(c: &mut Criterion) {
    let dataset = default_dataset();
    let params = ModelParams::zeros(dataset.dim(), &[64, 64], dataset.num_classes());
    let unlabeled = dataset.unlabeled_matrix();
    c.bench_function("select_pseudo_inliers", |b| {
        b.iter(|| black_box(select_pseudo_inliers(&params, &unlabeled).unwrap()))
    });
}

criterion_group!(benches, training_step, selection);
criterion_main!(benches);
