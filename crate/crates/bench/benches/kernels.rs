use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use xcam_bench::fixture;
use xcam_core::saliency::{alpha_exponential, explain, ExplainOptions, Method};
use xcam_core::zoo::Architecture;

fn forward_backward(c: &mut Criterion) {
    for arch in [Architecture::Student, Architecture::Teacher] {
        let (model, image) = fixture(arch);
        c.bench_function(&format!("forward/{arch}"), |b| {
            b.iter(|| model.forward(black_box(&image)).unwrap())
        });
        let tape = model.forward(&image).unwrap();
        c.bench_function(&format!("backward/{arch}"), |b| {
            b.iter(|| model.backward(black_box(&tape), 0).unwrap())
        });
    }
}

fn saliency(c: &mut Criterion) {
    let (model, image) = fixture(Architecture::Teacher);
    let tape = model.backward(&model.forward(&image).unwrap(), 1).unwrap();
    let d = model.designated_layer();
    c.bench_function("alpha_exponential/teacher", |b| {
        b.iter(|| alpha_exponential(black_box(tape.gradient(d)), tape.activation(d)).unwrap())
    });
    for method in [Method::GradCam, Method::GradCamPP] {
        c.bench_function(&format!("explain/{method}"), |b| {
            b.iter(|| {
                explain(
                    &model,
                    black_box(&image),
                    method,
                    None,
                    ExplainOptions::default(),
                )
                .unwrap()
            })
        });
    }
}

criterion_group!(benches, forward_backward, saliency);
criterion_main!(benches);
