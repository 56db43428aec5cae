use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use layerseg::losses::total_loss;
use layerseg::model::{forward, init_params};
use layerseg::ops::{conv2d, conv2d_backward};
use layerseg::postprocess::segment;
use layerseg::regions::{adjacency, decompose};
use layerseg::train::{scene_gradient, PreparedScene};
use layerseg::{LossWeights, PostprocessParams, Tensor};
use layerseg_bench::{toy_network, toy_scene};

fn kernels(c: &mut Criterion) {
    let x = Tensor::<f32>::from_fn(&[16, 64, 64], |i| (i % 13) as f32 / 13.0);
    let w = Tensor::<f32>::from_fn(&[16, 16, 3, 3], |i| ((i % 7) as f32 - 3.0) / 10.0);
    let b = Tensor::<f32>::zeros(&[16]);
    c.bench_function("conv2d 16x64x64 -> 16", |bn| {
        bn.iter(|| conv2d(black_box(&x), black_box(&w), black_box(&b)).unwrap())
    });
    let g = conv2d(&x, &w, &b).unwrap();
    c.bench_function("conv2d backward 16x64x64", |bn| {
        bn.iter(|| conv2d_backward(black_box(&x), black_box(&w), black_box(&g), true))
    });
}

fn model(c: &mut Criterion) {
    let net = toy_network();
    let params = init_params(&net, 1).unwrap();
    let scene = toy_scene(3);
    c.bench_function("forward 64x64", |bn| {
        bn.iter(|| forward(black_box(&scene.image), &params, &net).unwrap())
    });
    let prepared = PreparedScene::new(&scene, 15.0).unwrap();
    c.bench_function("scene gradient 64x64", |bn| {
        bn.iter(|| scene_gradient(&params, &net, black_box(&prepared), &LossWeights::default()).unwrap())
    });
}

fn losses_and_post(c: &mut Criterion) {
    let net = toy_network();
    let params = init_params(&net, 1).unwrap();
    let scene = toy_scene(5);
    let pred = forward(&scene.image, &params, &net).unwrap();
    let regions = decompose(64, 64, &scene.instances).unwrap();
    c.bench_function("adjacency", |bn| bn.iter(|| adjacency(black_box(&regions.objects), 15.0)));
    let adj = adjacency(&regions.objects, 15.0);
    c.bench_function("total loss phase 1", |bn| {
        bn.iter(|| total_loss(black_box(&pred), &regions, &adj, None, &LossWeights::default()).unwrap())
    });
    let post = PostprocessParams::default();
    c.bench_function("segment 64x64", |bn| bn.iter(|| segment(black_box(&pred), &post)));
}

criterion_group!(benches, kernels, model, losses_and_post);
criterion_main!(benches);
