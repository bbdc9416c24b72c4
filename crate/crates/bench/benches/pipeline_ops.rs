use criterion::{black_box, criterion_group, criterion_main, Criterion};

use sslseg_bench::{random_mask, random_points};
use sslseg_core::anchor;
use sslseg_core::nn::MlpModel;
use sslseg_core::postprocess::{majority_filter, VoteShape};
use sslseg_core::smir;

fn bench_anchor_weights(c: &mut Criterion) {
    let points = random_points(2000, 32, 1);
    let anchors = random_points(100, 32, 2);
    c.bench_function("anchor_weights_2000x100", |b| {
        b.iter(|| {
            let z = anchor::build_weights(
                black_box(&points.view()),
                black_box(&anchors.view()),
                3,
                None,
            )
            .unwrap();
            black_box(anchor::reduced_laplacian(&z).unwrap());
        })
    });
}

fn bench_kernel_matrix(c: &mut Criterion) {
    let points = random_points(400, 32, 3);
    c.bench_function("kernel_matrix_400", |b| {
        b.iter(|| black_box(smir::kernel_matrix(black_box(&points.view()), Some(1.0)).unwrap()))
    });
}

fn bench_forward(c: &mut Criterion) {
    let model = MlpModel::from_dims(&[405, 64, 24, 12, 3], 2, 5).unwrap();
    let x = random_points(512, 405, 4);
    c.bench_function("forward_512x405", |b| {
        b.iter(|| black_box(model.forward(black_box(&x.view())).unwrap()))
    });
}

fn bench_majority_filter(c: &mut Criterion) {
    let mask = random_mask(128, 128, 3, 6);
    c.bench_function("majority_filter_128_r5", |b| {
        b.iter(|| black_box(majority_filter(black_box(&mask), 5, VoteShape::Disc).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_anchor_weights,
    bench_kernel_matrix,
    bench_forward,
    bench_majority_filter
);
criterion_main!(benches);
