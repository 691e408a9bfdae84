//! Data-parallel kernels on the default rayon pool versus a one-thread pool.
//!
//! Build with `--no-default-features` to time the plain sequential fallback
//! instead; both groups then run the same single-threaded code.

use std::hint::black_box;

use cfnet::features::{hog_extract, HogConfig};
use cfnet::ndgrad::{Tape, Tensor};
use cfnet::rng;
use cfnet::sarsim::{generate_pair, GroundTruth, RadarParams, ReflectivityMap};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn scenes(n: usize) -> Vec<ReflectivityMap> {
    (0..n)
        .map(|k| {
            let mut r = rng::stream(k as u64, &[]);
            let mut img = Tensor::uniform(&[64, 64], 0.0, 1.0, &mut r);
            // Sparse scene: keep roughly one pixel in forty.
            img.data_mut().iter_mut().for_each(|v| *v = if *v > 0.975 { *v } else { 0.0 });
            ReflectivityMap::new(img).unwrap()
        })
        .collect()
}

fn conv_step(x: &Tensor<f32>, w: &Tensor<f32>) -> f32 {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = tape.leaf(w.clone(), true);
    let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    let y = tape.relu(y).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    g.get(wv).unwrap().data()[0]
}

fn workloads(c: &mut Criterion) {
    let p = RadarParams::default();
    let sc = scenes(2);
    let x = Tensor::uniform(&[16, 8, 32, 32], -1.0, 1.0, &mut rng::stream(1, &[]));
    let w = Tensor::uniform(&[16, 8, 3, 3], -0.3, 0.3, &mut rng::stream(2, &[]));
    let imgs: Vec<_> = (0..32).map(|k| Tensor::uniform(&[64, 64], 0.0, 1.0, &mut rng::stream(3, &[k]))).collect();
    let hc = HogConfig::default();

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pools: Vec<(&str, rayon::ThreadPool)> = vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
    ];

    let mut g = c.benchmark_group("sar_pair");
    g.sample_size(10);
    for (name, pool) in &pools {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| sc.iter().map(|s| generate_pair(black_box(s), &p, GroundTruth::Rda).unwrap()).count()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("conv2d_fwd_bwd");
    g.sample_size(10);
    for (name, pool) in &pools {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| conv_step(black_box(&x), &w))));
    }
    g.finish();

    let mut g = c.benchmark_group("hog_batch");
    g.sample_size(10);
    for (name, pool) in &pools {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                pool.install(|| cfnet::par::map_slice(&imgs, |i| hog_extract(black_box(i), &hc).unwrap().len()).len())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, workloads);
criterion_main!(benches);
