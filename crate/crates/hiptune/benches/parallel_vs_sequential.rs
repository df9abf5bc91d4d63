//! Data-parallel map vs the sequential fallback on the two batch-heavy
//! workloads: sample rendering and end-to-end scoring. With the `parallel`
//! feature enabled `par_map` runs on the rayon pool; both paths produce
//! bit-identical outputs, so the comparison is purely about throughput.

use criterion::{criterion_group, criterion_main, Criterion};

use hiptune::dataset::{render_sample, DatasetConfig};
use hiptune::dpi::hiptune_score;
use hiptune::model::{Model, ModelConfig};
use hiptune::parallel::{par_map, seq_map};
use hiptune::taxonomy::build_taxonomy;

fn bench_generation(c: &mut Criterion) {
    let taxonomy = build_taxonomy();
    let cfg = DatasetConfig {
        n_identities: 2,
        ..DatasetConfig::default()
    };
    let descriptors: Vec<(u32, Option<u16>, u32)> = (0..2u32)
        .flat_map(|id| {
            std::iter::once((id, None, 0u32))
                .chain((0..taxonomy.n_methods() as u16).map(move |m| (id, Some(m), 0u32)))
        })
        .collect();

    let mut group = c.benchmark_group("render_batch_110");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            par_map(&descriptors, |&(id, m, f)| {
                render_sample(&taxonomy, &cfg, id, m, f)
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            seq_map(&descriptors, |&(id, m, f)| {
                render_sample(&taxonomy, &cfg, id, m, f)
            })
        })
    });
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let taxonomy = build_taxonomy();
    let cfg = DatasetConfig {
        n_identities: 2,
        ..DatasetConfig::default()
    };
    let model = Model::new(taxonomy.clone(), ModelConfig::default(), 11).unwrap();
    let images: Vec<_> = (0..8u16)
        .map(|m| render_sample(&taxonomy, &cfg, 0, Some(m * 6), 0).to_tensor())
        .collect();

    let mut group = c.benchmark_group("score_batch_8");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par_map(&images, |img| hiptune_score(&model, img).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| seq_map(&images, |img| hiptune_score(&model, img).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_generation, bench_scoring);
criterion_main!(benches);
