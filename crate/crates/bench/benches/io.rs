use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use geovocab_bench::{features, labels};
use geovocab_core::tensor_io::{parse_npy, write_npy, NpyData, NpyHeader, NpyDtype};

fn npy(c: &mut Criterion) {
    let fm = features(128, 128, 64, 5);
    let f_header = NpyHeader::new(NpyDtype::F4, vec![128, 128, 64]);
    let f_data = NpyData::F4(fm.data().to_vec());
    let f_bytes = write_npy(&f_header, &f_data).unwrap();

    let raster = labels(1024, 1024, 7, 6);
    let l_header = NpyHeader::new(NpyDtype::U2, vec![1024, 1024]);
    let l_data = NpyData::U2(raster.labels().to_vec());
    let l_bytes = write_npy(&l_header, &l_data).unwrap();

    let mut group = c.benchmark_group("npy");
    group.throughput(Throughput::Bytes(f_bytes.len() as u64));
    group.bench_function("write_f4_128x128x64", |b| b.iter(|| write_npy(&f_header, &f_data).unwrap()));
    group.bench_function("parse_f4_128x128x64", |b| b.iter(|| parse_npy(&f_bytes).unwrap()));
    group.throughput(Throughput::Bytes(l_bytes.len() as u64));
    group.bench_function("write_u2_1024x1024", |b| b.iter(|| write_npy(&l_header, &l_data).unwrap()));
    group.bench_function("parse_u2_1024x1024", |b| b.iter(|| parse_npy(&l_bytes).unwrap()));
    group.finish();
}

criterion_group!(benches, npy);
criterion_main!(benches);
