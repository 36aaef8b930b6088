use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mergerec::merge::{merge_fisher, merge_uniform, MergeEntry, DEFAULT_EPSILON};
use mergerec_bench::merge_fixture;

fn merging(c: &mut Criterion) {
    let mut group = c.benchmark_group("merge");
    for members in [2, 5] {
        let fixture = merge_fixture(members, 1 << 20);
        let entries: Vec<MergeEntry<'_>> = fixture.iter().map(|(p, f)| MergeEntry::new(p, f)).collect();
        let params: Vec<_> = fixture.iter().map(|(p, _)| p).collect();
        group.bench_with_input(BenchmarkId::new("fisher", members), &entries, |b, e| {
            b.iter(|| merge_fisher(e, DEFAULT_EPSILON).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("uniform", members), &params, |b, p| b.iter(|| merge_uniform(p).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, merging);
criterion_main!(benches);
