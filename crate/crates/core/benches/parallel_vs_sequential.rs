use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use prunekit::config::RunConfig;
use prunekit::data::make_synthetic_corpus;
use prunekit::model::Model;
use prunekit::par;
use prunekit::plan::{build_plan, GateSet};
use prunekit::train::{total_loss, Masking, TrainState};

/// Gated objective over a batch of 16, once on a
/// single worker and once on the default pool.
fn batch_objective(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let config = cfg.model.build().unwrap();
    let plan = build_plan(&config, cfg.plan).unwrap();
    let gates = GateSet::new(&plan, &cfg.gates).unwrap();
    let corpus = make_synthetic_corpus(cfg.corpus_seed, cfg.data_shape(), &cfg.corpus).unwrap();
    let model = Model::init(config, cfg.seed).unwrap();
    let mut state = TrainState::new(model, plan, gates, cfg.seed);
    state.masking = Masking::Learned;
    let batch: Vec<_> = corpus.train.iter().take(16).collect();

    let mut group = c.benchmark_group("total_loss_batch16");
    group.sample_size(10);
    for (name, threads) in [("sequential", Some(1)), ("parallel", None)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &threads| {
            b.iter(|| par::with_threads(threads, || total_loss(&state, &batch, true, &cfg.training).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_objective);
criterion_main!(benches);
