//! Rayon path against the sequential fallback on the hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rfpa::dataset::{generate, DatasetConfig};
use rfpa::fingerprint::{embed_batch, EmbedderArch, EmbedderModel};
use rfpa::grad::{Conv1dSpec, Tape, Tensor};
use rfpa::par;
use rfpa::signal::IqWaveform;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn dataset(c: &mut Criterion) {
    let cfg = DatasetConfig {
        transmitters: 8,
        messages_per_transmitter: 32,
        ..DatasetConfig::default()
    };
    let mut g = c.benchmark_group("dataset_256");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate(&cfg).unwrap()));
    }
    g.finish();
}

fn embedding(c: &mut Criterion) {
    let model = EmbedderModel::init(EmbedderArch::default(), 1).unwrap();
    let d = generate(&DatasetConfig {
        transmitters: 4,
        messages_per_transmitter: 32,
        ..DatasetConfig::default()
    })
    .unwrap();
    let waves: Vec<IqWaveform> = d.messages.iter().map(|m| m.waveform.clone()).collect();
    let mut g = c.benchmark_group("embed_128");
    g.sample_size(20);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| embed_batch(&model, &waves).unwrap()));
    }
    g.finish();
}

fn conv_backward(c: &mut Criterion) {
    let x = Tensor::new(vec![32, 16, 256], vec![0.5f32; 32 * 16 * 256]).unwrap();
    let w = Tensor::new(vec![32, 16, 9], vec![0.01f32; 32 * 16 * 9]).unwrap();
    let spec = Conv1dSpec { stride: 2, pad_left: 4, pad_right: 4 };
    let mut g = c.benchmark_group("conv1d_fwd_bwd");
    g.sample_size(20);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.param(x.clone()).unwrap();
                let wv = t.param(w.clone()).unwrap();
                let y = t.conv1d(xv, wv, None, spec).unwrap();
                let l = t.sum(y).unwrap();
                t.backward(l).unwrap();
            })
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, dataset, embedding, conv_backward);
criterion_main!(benches);
