use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use onionmail::batch;
use onionmail::gossip::{run_flood, FloodSetup, ListMode, MembershipGraph};
use onionmail::identity::{derive_address, generate_identity, verify_address};

fn ring_with_chords(v: usize, mode: ListMode, seed: u64) -> FloodSetup {
    let mut g = MembershipGraph::new(0..v);
    for i in 0..v {
        g.add_edge(i, (i + 1) % v);
        g.add_edge(i, (i + 3) % v);
    }
    let mut s = FloodSetup::new(g, mode);
    s.seed = seed;
    s.posts = 2;
    s
}

fn flood_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("flood_sweep");
    group.sample_size(10);
    for v in [8usize, 16, 32] {
        let setups: Vec<FloodSetup> = (0..16)
            .map(|i| ring_with_chords(v, if i % 2 == 0 { ListMode::Flood } else { ListMode::Tree }, i))
            .collect();
        group.bench_with_input(BenchmarkId::new("sequential", v), &setups, |b, s| {
            b.iter(|| batch::map_sequential(black_box(s), run_flood))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", v), &setups, |b, s| {
            b.iter(|| batch::map_parallel(black_box(s), run_flood))
        });
    }
    group.finish();
}

fn key_audit(c: &mut Criterion) {
    let mut group = c.benchmark_group("address_audit");
    let seeds: Vec<u64> = (0..256).collect();
    let check = |&s: &u64| {
        let k = generate_identity(s).public();
        verify_address(&derive_address(&k, "user").unwrap(), &k)
    };
    group.bench_function("sequential", |b| {
        b.iter(|| batch::map_sequential(black_box(&seeds), check))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| b.iter(|| batch::map_parallel(black_box(&seeds), check)));
    group.finish();
}

criterion_group!(benches, flood_sweep, key_audit);
criterion_main!(benches);
