use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use spikeramp::compress::{compress_window, process_stream};
use spikeramp::link::{frame_config, parse_frame};
use spikeramp::train::jacobi_eigen;
use spikeramp::{RampAdc, RampConfig, WINDOW_LEN};
use spikeramp_bench as fx;

fn ramp_period(c: &mut Criterion) {
    let mut g = c.benchmark_group("ramp_period");
    for channels in [49usize, 256, 600] {
        let held = fx::held_voltages(channels);
        let gate = vec![true; channels];
        let mut adc = RampAdc::new(RampConfig::default()).unwrap();
        g.throughput(Throughput::Elements(channels as u64));
        g.bench_function(format!("{channels}ch"), |b| {
            b.iter(|| adc.run_period(black_box(&held), &gate, 0).unwrap())
        });
    }
    g.finish();
}

fn compressor(c: &mut Criterion) {
    let mem = fx::memory();
    let windows = fx::windows(1000);
    let mut g = c.benchmark_group("compressor");
    g.throughput(Throughput::Elements(windows.len() as u64));
    g.bench_function("window_1000", |b| {
        b.iter(|| {
            for w in &windows {
                black_box(compress_window(w, &mem, 0, 0).unwrap());
            }
        })
    });
    let stream = fx::event_stream(49, 20);
    g.throughput(Throughput::Elements(stream.len() as u64));
    g.bench_function("stream_49ch", |b| {
        b.iter_batched(
            || stream.clone(),
            |s| process_stream(s, &mem, 49, WINDOW_LEN).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn jacobi(c: &mut Criterion) {
    let cov = fx::covariance(2000);
    c.bench_function("jacobi_22x22", |b| b.iter(|| jacobi_eigen(black_box(&cov))));
}

fn link(c: &mut Criterion) {
    let payload: Vec<u8> = (0..=255u8).cycle().take(400).collect();
    let chips = frame_config(&payload);
    c.bench_function("frame_parse_400B", |b| b.iter(|| parse_frame(black_box(&chips)).unwrap()));
}

criterion_group!(benches, ramp_period, compressor, jacobi, link);
criterion_main!(benches);
