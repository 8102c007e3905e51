use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use geovocab_bench::{labels, pool};
use geovocab_core::metrics::{overall, ConfusionMatrix};

fn confusion(c: &mut Criterion) {
    let (h, w, k) = (512, 512, 7);
    let pred = labels(h, w, k, 3);
    let gt = labels(h, w, k, 4);
    let mut group = c.benchmark_group("confusion_512x512");
    group.throughput(Throughput::Elements((h * w) as u64));
    group.bench_function("accumulate", |b| {
        b.iter(|| {
            let mut cm = ConfusionMatrix::new(pool(k));
            cm.accumulate(&pred, &gt).unwrap();
            cm
        })
    });
    let mut cm = ConfusionMatrix::new(pool(k));
    cm.accumulate(&pred, &gt).unwrap();
    group.bench_function("merge", |b| {
        b.iter(|| {
            let mut total = ConfusionMatrix::new(pool(k));
            total.merge(&cm).unwrap();
            total
        })
    });
    group.bench_function("overall", |b| b.iter(|| overall(&cm).unwrap()));
    group.finish();
}

criterion_group!(benches, confusion);
criterion_main!(benches);
