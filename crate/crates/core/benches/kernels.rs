use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use relpos::corpus::{next_batch, SyntheticSpec};
use relpos::exec::set_sequential;
use relpos::tensor::{matmul_into, softmax_rows};
use relpos::trainer::{TrainConfig, Trainer};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 256, 512] {
        let a: Vec<f32> = (0..n * n).map(|i| (i % 17) as f32 * 0.01).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i % 13) as f32 * 0.02).collect();
        let mut out = vec![0f32; n * n];
        for (name, seq) in MODES {
            set_sequential(seq);
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| matmul_into(n, n, n, black_box(&a), false, black_box(&b), true, &mut out))
            });
        }
    }
    set_sequential(false);
    group.finish();
}

fn bench_softmax(c: &mut Criterion) {
    let mut group = c.benchmark_group("softmax_rows");
    let (rows, cols) = (4096, 255);
    let base: Vec<f32> = (0..rows * cols).map(|i| ((i * 7919) % 1000) as f32 * 1e-3).collect();
    for (name, seq) in MODES {
        set_sequential(seq);
        group.bench_function(name, |bench| {
            bench.iter_batched(
                || base.clone(),
                |mut x| softmax_rows(&mut x, cols),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    set_sequential(false);
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut cfg = TrainConfig::desk();
    cfg.synthetic = Some(SyntheticSpec {
        vocab_size: 512,
        num_tokens: 20_000,
        seed: 0,
    });
    let corpus = cfg.load_corpus().expect("synthetic corpus");
    let batch = next_batch(&corpus.sequences, cfg.batch_size, 0, 0).expect("batch");
    let mut group = c.benchmark_group("desk_train_step");
    group.sample_size(20);
    for (name, seq) in MODES {
        set_sequential(seq);
        let mut trainer = Trainer::<f32>::new(cfg.clone()).expect("trainer");
        group.bench_function(name, |bench| bench.iter(|| trainer.train_step(&batch).expect("step")));
    }
    set_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_softmax, bench_train_step);
criterion_main!(benches);
