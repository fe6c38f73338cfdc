//! Parallel versus sequential execution of the data-parallel hot paths.
//! Run with `cargo bench -p bandsplit`; on a single core both variants
//! should take about the same time.

use std::hint::black_box;

use bandsplit::dsp::Stft;
use bandsplit::metrics::fsnr;
use bandsplit::par::Exec;
use bandsplit::synth::toy::{toy_noise, toy_speech};
use bandsplit::StftConfig;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn stft_round_trip(c: &mut Criterion) {
    let audio = toy_speech(0, 4.0, 48_000).unwrap();
    let mut group = c.benchmark_group("stft_4s");
    for (name, exec) in MODES {
        let stft = Stft::new(StftConfig::fullband()).unwrap().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let spec = stft.analyze(black_box(&audio)).unwrap();
                black_box(stft.synthesize(&spec).unwrap())
            })
        });
    }
    group.finish();
}

fn fsnr_corpus(c: &mut Criterion) {
    let clean: Vec<_> = (0..8).map(|i| toy_speech(i, 2.0, 48_000).unwrap()).collect();
    let noise: Vec<_> = (0..8).map(|i| toy_noise(100 + i, 2.0, 48_000).unwrap()).collect();
    let cfg = StftConfig::fullband();
    let mut group = c.benchmark_group("fsnr_8_files");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(fsnr(black_box(&clean), &noise, &cfg, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, stft_round_trip, fsnr_corpus);
criterion_main!(benches);
