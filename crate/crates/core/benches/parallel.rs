use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cool_core::encoder::{FrozenEncoder, TransformerConfig};
use cool_core::eval::synthetic::{generate, SyntheticConfig};
use cool_core::knowledge::{ClientConfig, KnowledgeClient};
use cool_core::model::{CoolModel, PreparedItem};
use cool_core::par::Exec;
use cool_core::training::{compute_step, TrainingConfig};
use cool_core::variant::AblationVariant;

struct Fixture {
    model: CoolModel,
    client: KnowledgeClient,
    records: Vec<cool_core::data::NewsRecord>,
    items: Vec<PreparedItem>,
}

fn fixture() -> Fixture {
    let bench = generate(&SyntheticConfig {
        n_source: 64,
        n_target: 32,
        ..Default::default()
    })
    .unwrap();
    let tok = Arc::new(bench.tokenizer());
    let frozen = Arc::new(FrozenEncoder::init(tok.clone(), TransformerConfig::toy(tok.len()), 42).unwrap());
    let model = CoolModel::new(frozen, Default::default(), AblationVariant::Full, 1).unwrap();
    let client = KnowledgeClient::offline(bench.cache().unwrap(), ClientConfig::default());
    let records: Vec<_> = bench.source.records().iter().chain(bench.target.records()).cloned().collect();
    let refs: Vec<_> = records.iter().collect();
    let items = model.prepare_all(&refs, &client, Exec::Sequential).unwrap();
    Fixture {
        model,
        client,
        records,
        items,
    }
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let f = fixture();
    let refs: Vec<_> = f.records.iter().collect();

    let mut g = c.benchmark_group("prepare_all");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(f.model.prepare_all(&refs, &f.client, exec).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("predict_all");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(f.model.predict_all(&f.items, exec).unwrap()))
        });
    }
    g.finish();

    let cfg = TrainingConfig::default();
    let src: Vec<&PreparedItem> = f.items[..16].iter().collect();
    let tgt: Vec<&PreparedItem> = f.items[64..80].iter().collect();
    let mut g = c.benchmark_group("compute_step");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(compute_step(&f.model, &src, &tgt, &cfg, 0, exec).unwrap().report.total))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
