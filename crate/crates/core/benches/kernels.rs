//! Parallel (rayon pool) versus sequential (one-thread pool) on the
//! data-parallel hot paths. Built without the `parallel` feature, only the
//! sequential variant exists.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use disentangle_core::config::RunConfig;
use disentangle_core::data::{Corpus, NormStats, Split, SplitCounts};
use disentangle_core::eval::encode_all;
use disentangle_core::model::Model;
use disentangle_core::seed;

/// Runs a workload under some thread configuration.
type Runner = Box<dyn Fn(&mut (dyn FnMut() + Send))>;

fn variants() -> Vec<(&'static str, Runner)> {
    let mut v: Vec<(&'static str, Runner)> = Vec::new();
    #[cfg(feature = "parallel")]
    {
        v.push(("parallel", Box::new(|f: &mut (dyn FnMut() + Send)| f())));
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        v.push((
            "sequential",
            Box::new(move |f: &mut (dyn FnMut() + Send)| one.install(f)),
        ));
    }
    #[cfg(not(feature = "parallel"))]
    v.push(("sequential", Box::new(|f: &mut (dyn FnMut() + Send)| f())));
    v
}

fn corpus_generation(c: &mut Criterion) {
    let config = RunConfig::default();
    let counts = SplitCounts {
        train: 400,
        dev: 40,
        test: 40,
    };
    let mut group = c.benchmark_group("corpus_generate_480");
    group.sample_size(10);
    for (name, run) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(&mut || {
                    Corpus::generate(config.data.spec.clone(), counts, 0).unwrap();
                })
            })
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let config = RunConfig::default();
    let counts = SplitCounts {
        train: 100,
        dev: 10,
        test: 64,
    };
    let corpus = Corpus::generate(config.data.spec.clone(), counts, 0).unwrap();
    let stats = NormStats::from_corpus(&corpus).unwrap();
    let model = Model::new(config.model.clone(), &mut seed::stream(0, "init", 0)).unwrap();
    let test = corpus.split(Split::Test);
    let mut group = c.benchmark_group("encode_64_utterances");
    group.sample_size(10);
    for (name, run) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(&mut || {
                    encode_all(&model, &stats, &test).unwrap();
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, corpus_generation, encode);
criterion_main!(benches);
