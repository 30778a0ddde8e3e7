#![allow(dead_code)]

use deliberant::agents::TaskInput;
use deliberant::benchmark::{generate_benchmark, Benchmark, HopRange};
use deliberant::config::{Config, Runtime};
use deliberant::math::{EmbeddingMatrix, EmbeddingVector};

pub fn world(chains: usize, min_hops: usize, max_hops: usize, distractors: usize, seed: u64) -> Benchmark {
    generate_benchmark(chains, HopRange::new(min_hops, max_hops).unwrap(), distractors, seed)
}

pub fn runtime(config: Config, bench: &Benchmark) -> Runtime {
    Runtime::from_knowledge(config, bench.kb.clone()).unwrap()
}

pub fn tasks(rt: &Runtime, bench: &Benchmark) -> Vec<TaskInput> {
    rt.tasks(&bench.tasks).unwrap()
}

pub fn vector(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).unwrap()
}

pub fn matrix(rows: &[&[f64]]) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows.iter().map(|r| vector(r)).collect()).unwrap()
}

/// 1-D Simpson quadrature of `f` on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}
