//! Seeded inputs shared by the benchmarks.

use geovocab_core::model::{CategoryPool, DenseFeatureMap, LabelRaster, TextEmbeddingSet};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn pool(n: usize) -> CategoryPool {
    CategoryPool::from_names(None, (0..n).map(|i| format!("class{i}"))).expect("distinct names")
}

pub fn features(h: usize, w: usize, d: usize, seed: u64) -> DenseFeatureMap {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    DenseFeatureMap::new(h, w, d, data).expect("finite features")
}

pub fn embeddings(k: usize, d: usize, seed: u64) -> TextEmbeddingSet {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    TextEmbeddingSet::new(pool(k), d, data, false).expect("finite embeddings")
}

pub fn labels(h: usize, w: usize, k: usize, seed: u64) -> LabelRaster {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| rng.random_range(0..k as u16)).collect();
    LabelRaster::new(h, w, data).expect("sized raster")
}
