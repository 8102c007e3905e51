use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use geovocab_bench::{embeddings, features};
use geovocab_core::align::{segment_with_candidates, AlignmentConfig, Similarity};

fn restricted_argmax(c: &mut Criterion) {
    let (h, w, d, k) = (128, 128, 64, 16);
    let fm = features(h, w, d, 1);
    let emb = embeddings(k, d, 2);
    let mut group = c.benchmark_group("segment_128x128_d64");
    group.throughput(Throughput::Elements((h * w) as u64));
    for similarity in [Similarity::Cosine, Similarity::Dot] {
        let config = AlignmentConfig { similarity, ..AlignmentConfig::default() };
        for n in [2, 4, 16] {
            let candidates: Vec<usize> = (0..n).collect();
            group.bench_with_input(BenchmarkId::new(format!("{similarity:?}"), n), &candidates, |b, cand| {
                b.iter(|| segment_with_candidates(&fm, &emb, cand, &config).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, restricted_argmax);
criterion_main!(benches);
