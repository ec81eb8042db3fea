//! Parallel vs sequential throughput on the per-trace aggregations.
//!
//! The default `parallel` feature routes the public entry points
//! through rayon; each has a `_sequential` sibling that is also the
//! fallback when the feature is off. Benching both side by side shows
//! what the feature buys on this machine:
//!
//!   cargo bench -p overlay-core

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::collections::BTreeSet;

use overlay_core::analytics;
use overlay_core::churn;
use overlay_core::classifier::{self, ClassifierRegions};
use overlay_core::tracegen::{self, GenConfig, ModelKind};
use overlay_core::types::{
    CrawlRecord, PeerId, PeerMode, PeerTrace, PhaseState, QueueLimits, SoftwareProfile,
};

/// Deterministic synthetic corpus: wandering degree traces with real
/// neighbor sets so churn extraction has set differences to chew on.
fn corpus(peers: usize, records_per_peer: usize) -> Vec<PeerTrace> {
    let mut state = 0x2545F4914F6CDD1Du64;
    let mut next = move |range: u32| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 33) as u32 % range
    };
    (0..peers)
        .map(|p| {
            let mut d_l = next(31);
            let mut d_u = 20 + next(13);
            let records: Vec<CrawlRecord> = (0..records_per_peer)
                .map(|i| {
                    d_l = (d_l + next(5)).saturating_sub(2).min(30);
                    d_u = (d_u + next(5)).saturating_sub(2).clamp(20, 32);
                    let leaves: BTreeSet<PeerId> = (0..d_l)
                        .map(|k| PeerId(format!("l{}", k + next(40))))
                        .collect();
                    let ultras: BTreeSet<PeerId> = (0..d_u)
                        .map(|k| PeerId(format!("u{}", k + next(40))))
                        .collect();
                    CrawlRecord::new(
                        PeerId(format!("p{p}")),
                        i as i64 * 1800,
                        PeerMode::Ultra,
                        "bench".into(),
                        leaves,
                        ultras,
                    )
                    .unwrap()
                })
                .collect();
            PeerTrace::new(records).unwrap()
        })
        .collect()
}

fn bench_aggregations(c: &mut Criterion) {
    let traces = corpus(2000, 48);
    let regions = ClassifierRegions::from_profile(&SoftwareProfile::limewire()).unwrap();

    let mut group = c.benchmark_group("intensity");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", traces.len()), |b| {
        b.iter(|| analytics::intensity(&traces))
    });
    group.bench_function(BenchmarkId::new("sequential", traces.len()), |b| {
        b.iter(|| {
            analytics::intensity_sequential(
                traces.iter().flat_map(|t| t.states().collect::<Vec<_>>()),
            )
        })
    });
    group.finish();

    let mut group = c.benchmark_group("transition_pairs");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", traces.len()), |b| {
        b.iter(|| analytics::transition_pairs_all(&traces))
    });
    group.bench_function(BenchmarkId::new("sequential", traces.len()), |b| {
        b.iter(|| analytics::transition_pairs_all_sequential(&traces))
    });
    group.finish();

    let mut group = c.benchmark_group("classify");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", traces.len()), |b| {
        b.iter(|| classifier::classify_traces(&traces, &regions))
    });
    group.bench_function(BenchmarkId::new("sequential", traces.len()), |b| {
        b.iter(|| classifier::classify_traces_sequential(&traces, &regions))
    });
    group.finish();

    let mut group = c.benchmark_group("churn_steps");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", traces.len()), |b| {
        b.iter(|| churn::churn_steps_all(&traces))
    });
    group.bench_function(BenchmarkId::new("sequential", traces.len()), |b| {
        b.iter(|| churn::churn_steps_all_sequential(&traces))
    });
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let limits = QueueLimits::default();
    let config = GenConfig {
        model: ModelKind::Bdtm,
        leaf: overlay_core::queue::QueueParams::leaf(9.5, 0.2083, &limits).unwrap(),
        ultra: overlay_core::queue::QueueParams::ultra(8.0, 0.1603, &limits).unwrap(),
        x0: PhaseState { d_l: 28, d_u: 30 },
        steps: 500,
        seed: 17,
        interval_secs: 1800,
    };
    let mut group = c.benchmark_group("generate_64_traces");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| tracegen::generate_many(&config, 64).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| tracegen::generate_many_sequential(&config, 64).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_aggregations, bench_generation);
criterion_main!(benches);
