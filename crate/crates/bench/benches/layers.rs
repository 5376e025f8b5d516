use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pws_core::layers::{conv_backward, conv_forward, ConvGeometry};
use pws_core::norm::{
    bn_backward, bn_forward, pws_backward, pws_forward, wn_backward, wn_forward, BnConfig, BnParams, Mode, PwsConfig, PwsParams, WnParams,
};
use pws_core::{Rng, Tensor};

const BATCH: usize = 16;
const CHANNELS: usize = 48;
const SIDE: usize = 32;

fn inputs() -> (ConvGeometry, Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(0);
    let geom = ConvGeometry::same(CHANNELS, CHANNELS, 3);
    let x = rng.gaussian_tensor(&[BATCH, CHANNELS, SIDE, SIDE], 0.0, 1.0).unwrap();
    let w = rng.gaussian_tensor(&geom.weight_shape(), 0.0, 0.07).unwrap();
    let dy = rng.gaussian_tensor(&[BATCH, CHANNELS, SIDE, SIDE], 0.0, 1.0).unwrap();
    (geom, x, w, dy)
}

fn conv_layers(c: &mut Criterion) {
    let (geom, x, w, dy) = inputs();
    let ones = vec![1.0f32; CHANNELS];
    let zeros = vec![0.0f32; CHANNELS];
    let mut group = c.benchmark_group("conv3x3_48ch_32px_b16");
    group.sample_size(20);

    group.bench_function("plain_forward", |b| {
        b.iter(|| conv_forward(black_box(&x), &w, Some(&zeros), &geom).unwrap())
    });
    let (_, cache) = conv_forward(&x, &w, Some(&zeros), &geom).unwrap();
    group.bench_function("plain_backward", |b| b.iter(|| conv_backward(black_box(&dy), &cache).unwrap()));

    let pws = PwsParams {
        weight: &w,
        alpha: &ones,
        beta: &zeros,
        cfg: PwsConfig::default(),
    };
    group.bench_function("pws_forward", |b| b.iter(|| pws_forward(black_box(&x), &pws, &geom).unwrap()));
    let (_, cache) = pws_forward(&x, &pws, &geom).unwrap();
    group.bench_function("pws_backward", |b| b.iter(|| pws_backward(black_box(&dy), &cache).unwrap()));

    let wn = WnParams {
        weight: &w,
        g: &ones,
        bias: Some(&zeros),
    };
    group.bench_function("wn_forward", |b| b.iter(|| wn_forward(black_box(&x), &wn, &geom).unwrap()));
    let (_, cache) = wn_forward(&x, &wn, &geom).unwrap();
    group.bench_function("wn_backward", |b| b.iter(|| wn_backward(black_box(&dy), &cache).unwrap()));

    let (y, _) = conv_forward(&x, &w, None, &geom).unwrap();
    let mut bn = BnParams::<f32>::new(CHANNELS, BnConfig::default());
    group.bench_function("bn_forward", |b| {
        b.iter(|| bn_forward(black_box(&y), &mut bn, Mode::Train).unwrap())
    });
    let (_, cache) = bn_forward(&y, &mut bn, Mode::Train).unwrap();
    group.bench_function("bn_backward", |b| b.iter(|| bn_backward(black_box(&dy), &cache).unwrap()));
    group.finish();
}

criterion_group!(benches, conv_layers);
criterion_main!(benches);
