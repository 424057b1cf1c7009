//! Hot kernels under the current build mode.
//!
//! Benchmark ids carry the mode, so running
//!
//! ```text
//! cargo bench -p fairgkd-core
//! cargo bench -p fairgkd-core --no-default-features
//! ```
//!
//! leaves `parallel/...` and `sequential/...` results side by side in
//! `target/criterion`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fairgkd_core::graph::{generate_synthetic, normalize_adjacency, SynthConfig};
use fairgkd_core::losses::{nt_xent, nt_xent_streamed};
use fairgkd_core::tensor::{Matrix, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODE: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::glorot_uniform(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dense(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("{MODE}/matmul"));
    for &(n, k, m) in &[(2000, 16, 16), (512, 512, 512)] {
        let a = random(n, k, 1);
        let b = random(k, m, 2);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{k}x{m}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| black_box(a.matmul(b).unwrap()))
        });
    }
    g.finish();
}

fn sparse(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("{MODE}/spmm"));
    for &n in &[2000, 10000] {
        let graph = generate_synthetic(&SynthConfig { num_nodes: n, ..SynthConfig::default() }, 0).unwrap();
        let adj = normalize_adjacency(&graph);
        let h = random(n, 16, 3);
        g.bench_with_input(BenchmarkId::from_parameter(n), &(adj, h), |bench, (adj, h)| {
            bench.iter(|| black_box(adj.spmm(h).unwrap()))
        });
    }
    g.finish();
}

fn contrastive(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("{MODE}/nt_xent"));
    g.sample_size(10);
    for &n in &[500, 2000] {
        let h = random(n, 16, 4);
        let hp = random(n, 16, 5);
        for (name, streamed) in [("dense", false), ("streamed", true)] {
            g.bench_with_input(BenchmarkId::new(name, n), &(&h, &hp), |bench, (h, hp)| {
                bench.iter(|| {
                    let mut tape = Tape::new();
                    let a = tape.leaf((*h).clone(), true);
                    let b = tape.constant((*hp).clone());
                    let l = if streamed {
                        nt_xent_streamed(&mut tape, a, b, 0.5).unwrap()
                    } else {
                        nt_xent(&mut tape, a, b, 0.5, None).unwrap()
                    };
                    tape.backward(l).unwrap();
                    black_box(tape.grad(a).cloned())
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, dense, sparse, contrastive);
criterion_main!(benches);
