//! File formats: npy tensors, label rasters, embedding sidecars and the
//! standards store.

pub mod npy;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CategoryPool, DenseFeatureMap, DiscriminationRule, InterpretationStandard, LabelRaster,
    ModelError, StandardsStore, TextEmbeddingSet, STANDARDS_SCHEMA_VERSION,
};
pub use npy::{parse_npy, read_npy, write_npy, write_npy_file, NpyData, NpyDtype, NpyError, NpyHeader};

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error("expected a rank-{expected} tensor, found shape {found:?}")]
    RankMismatch { expected: usize, found: Vec<usize> },
    #[error("expected dtype {expected}, found {found}")]
    DtypeMismatch { expected: NpyDtype, found: NpyDtype },
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("embedding sidecar has no row for category {0:?}")]
    MissingCategoryRow(String),
    #[error("embedding sidecar names {0:?}, which is not in the pool")]
    UnknownSidecarCategory(String),
    #[error("embedding sidecar is inconsistent: {0}")]
    BadSidecar(String),
    #[error("label {value} at flat position {position} is out of range for a pool of {pool_size}")]
    LabelOutOfRange {
        value: u16,
        position: usize,
        pool_size: usize,
    },
    #[error("standards schema version {found:?} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: Option<u64>, expected: u32 },
    #[error("standards file has no entry for category {0:?}")]
    MissingStandard(String),
    #[error("invalid standards file: {0}")]
    InvalidStandards(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for TensorIoError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteValue(i) => Self::NonFiniteValue(i),
            ModelError::LabelOutOfRange {
                value,
                position,
                pool_size,
            } => Self::LabelOutOfRange {
                value,
                position,
                pool_size,
            },
            ModelError::MissingStandard(n) => Self::MissingStandard(n),
            other => Self::Model(other),
        }
    }
}

pub fn load_feature_map(path: &Path) -> Result<DenseFeatureMap, TensorIoError> {
    let (header, data) = read_npy(path)?;
    feature_map_from_npy(header, data)
}

pub fn feature_map_from_npy(header: NpyHeader, data: NpyData) -> Result<DenseFeatureMap, TensorIoError> {
    let &[h, w, d] = header.shape.as_slice() else {
        return Err(TensorIoError::RankMismatch {
            expected: 3,
            found: header.shape,
        });
    };
    let NpyData::F4(values) = data else {
        return Err(TensorIoError::DtypeMismatch {
            expected: NpyDtype::F4,
            found: header.dtype,
        });
    };
    Ok(DenseFeatureMap::new(h, w, d, values)?)
}

pub fn save_feature_map(features: &DenseFeatureMap, path: &Path) -> Result<(), TensorIoError> {
    let header = NpyHeader::new(
        NpyDtype::F4,
        vec![features.height(), features.width(), features.dim()],
    );
    write_npy_file(path, &header, &NpyData::F4(features.data().to_vec()))?;
    Ok(())
}

/// Sidecar mapping embedding rows to category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSidecar {
    pub rows: Vec<SidecarRow>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarRow {
    pub row: usize,
    pub category: String,
}

/// Loads a (K, D) embedding tensor and reorders its rows into pool order
/// using the mandatory sidecar.
pub fn load_text_embeddings(
    npy_path: &Path,
    pool: &CategoryPool,
    sidecar_path: &Path,
) -> Result<TextEmbeddingSet, TensorIoError> {
    let (header, data) = read_npy(npy_path)?;
    let sidecar: EmbeddingSidecar = serde_json::from_slice(&std::fs::read(sidecar_path)?)?;
    embeddings_from_npy(header, data, pool, &sidecar)
}

pub fn embeddings_from_npy(
    header: NpyHeader,
    data: NpyData,
    pool: &CategoryPool,
    sidecar: &EmbeddingSidecar,
) -> Result<TextEmbeddingSet, TensorIoError> {
    let &[rows, dim] = header.shape.as_slice() else {
        return Err(TensorIoError::RankMismatch {
            expected: 2,
            found: header.shape,
        });
    };
    let NpyData::F4(values) = data else {
        return Err(TensorIoError::DtypeMismatch {
            expected: NpyDtype::F4,
            found: header.dtype,
        });
    };
    if sidecar.dim != dim {
        return Err(TensorIoError::BadSidecar(format!(
            "sidecar dim {} does not match tensor dim {dim}",
            sidecar.dim
        )));
    }
    let mut by_category: BTreeMap<usize, usize> = BTreeMap::new();
    let mut used_rows = vec![false; rows];
    for entry in &sidecar.rows {
        let idx = pool
            .index_of(&entry.category)
            .ok_or_else(|| TensorIoError::UnknownSidecarCategory(entry.category.clone()))?;
        if entry.row >= rows {
            return Err(TensorIoError::BadSidecar(format!(
                "row {} is out of range for {rows} rows",
                entry.row
            )));
        }
        if std::mem::replace(&mut used_rows[entry.row], true) {
            return Err(TensorIoError::BadSidecar(format!("row {} listed twice", entry.row)));
        }
        if by_category.insert(idx, entry.row).is_some() {
            return Err(TensorIoError::BadSidecar(format!(
                "category {:?} listed twice",
                entry.category
            )));
        }
    }
    let mut ordered = Vec::with_capacity(pool.len() * dim);
    for c in pool {
        let row = *by_category
            .get(&c.index)
            .ok_or_else(|| TensorIoError::MissingCategoryRow(c.name.clone()))?;
        ordered.extend_from_slice(&values[row * dim..(row + 1) * dim]);
    }
    Ok(TextEmbeddingSet::new(pool.clone(), dim, ordered, false)?)
}

/// Writes embeddings in pool order together with their sidecar.
pub fn save_text_embeddings(
    embeddings: &TextEmbeddingSet,
    npy_path: &Path,
    sidecar_path: &Path,
) -> Result<(), TensorIoError> {
    let header = NpyHeader::new(NpyDtype::F4, vec![embeddings.len(), embeddings.dim()]);
    write_npy_file(npy_path, &header, &NpyData::F4(embeddings.data().to_vec()))?;
    let sidecar = EmbeddingSidecar {
        rows: embeddings
            .pool()
            .iter()
            .map(|c| SidecarRow {
                row: c.index,
                category: c.name.clone(),
            })
            .collect(),
        dim: embeddings.dim(),
    };
    crate::fsio::write_atomic(sidecar_path, &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_label_raster(path: &Path, pool: &CategoryPool) -> Result<LabelRaster, TensorIoError> {
    let (header, data) = read_npy(path)?;
    label_raster_from_npy(header, data, pool)
}

pub fn label_raster_from_npy(
    header: NpyHeader,
    data: NpyData,
    pool: &CategoryPool,
) -> Result<LabelRaster, TensorIoError> {
    let &[h, w] = header.shape.as_slice() else {
        return Err(TensorIoError::RankMismatch {
            expected: 2,
            found: header.shape,
        });
    };
    let NpyData::U2(labels) = data else {
        return Err(TensorIoError::DtypeMismatch {
            expected: NpyDtype::U2,
            found: header.dtype,
        });
    };
    let raster = LabelRaster::new(h, w, labels)?;
    raster.check_pool(pool.len())?;
    Ok(raster)
}

pub fn label_raster_to_npy(raster: &LabelRaster) -> Result<Vec<u8>, TensorIoError> {
    let header = NpyHeader::new(NpyDtype::U2, vec![raster.height(), raster.width()]);
    Ok(write_npy(&header, &NpyData::U2(raster.labels().to_vec()))?)
}

pub fn save_label_raster(raster: &LabelRaster, path: &Path) -> Result<(), TensorIoError> {
    crate::fsio::write_atomic(path, &label_raster_to_npy(raster)?)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StandardsDocument {
    schema_version: u32,
    pool: CategoryPool,
    standards: Vec<InterpretationStandard>,
    rules: Vec<DiscriminationRule>,
    created_at: DateTime<Utc>,
}

pub fn standards_to_json(store: &StandardsStore) -> Result<String, TensorIoError> {
    let doc = StandardsDocument {
        schema_version: store.schema_version(),
        pool: store.pool().clone(),
        standards: store.standards().to_vec(),
        rules: store.rules().to_vec(),
        created_at: store.created_at(),
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn standards_from_json(text: &str) -> Result<StandardsStore, TensorIoError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(STANDARDS_SCHEMA_VERSION)) {
        return Err(TensorIoError::SchemaVersionMismatch {
            found: version,
            expected: STANDARDS_SCHEMA_VERSION,
        });
    }
    let doc: StandardsDocument =
        serde_json::from_value(value).map_err(|e| TensorIoError::InvalidStandards(e.to_string()))?;
    Ok(StandardsStore::new(doc.pool, doc.standards, doc.rules, doc.created_at)?)
}

pub fn save_standards(store: &StandardsStore, path: &Path) -> Result<(), TensorIoError> {
    crate::fsio::write_atomic(path, standards_to_json(store)?.as_bytes())?;
    Ok(())
}

pub fn load_standards(path: &Path) -> Result<StandardsStore, TensorIoError> {
    standards_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StandardSource, IGNORE_LABEL};

    fn npy_f4(shape: Vec<usize>, values: Vec<f32>) -> (NpyHeader, NpyData) {
        (NpyHeader::new(NpyDtype::F4, shape), NpyData::F4(values))
    }

    #[test]
    fn feature_map_shape_passthrough() {
        let (h, d) = npy_f4(vec![16, 16, 8], vec![0.25; 16 * 16 * 8]);
        let fm = feature_map_from_npy(h, d).unwrap();
        assert_eq!((fm.height(), fm.width(), fm.dim()), (16, 16, 8));
    }

    #[test]
    fn feature_map_rank_and_nan() {
        let (h, d) = npy_f4(vec![4, 4], vec![0.0; 16]);
        assert!(matches!(
            feature_map_from_npy(h, d),
            Err(TensorIoError::RankMismatch { expected: 3, .. })
        ));
        let mut v = vec![0.0; 8];
        v[5] = f32::NAN;
        let (h, d) = npy_f4(vec![2, 2, 2], v);
        assert!(matches!(feature_map_from_npy(h, d), Err(TensorIoError::NonFiniteValue(5))));
    }

    fn shuffled_loveda() -> (NpyHeader, NpyData, EmbeddingSidecar) {
        let pool = CategoryPool::loveda();
        // Row r holds the value 10*pool_index + column for the category listed at r.
        let order = ["water", "road", "agricultural", "forest", "barren", "building", "background"];
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for (r, name) in order.iter().enumerate() {
            let idx = pool.index_of(name).unwrap() as f32;
            values.extend([10.0 * idx, 10.0 * idx + 1.0]);
            rows.push(SidecarRow {
                row: r,
                category: name.to_string(),
            });
        }
        let (h, d) = npy_f4(vec![7, 2], values);
        (h, d, EmbeddingSidecar { rows, dim: 2 })
    }

    #[test]
    fn embeddings_reordered_to_pool() {
        let pool = CategoryPool::loveda();
        let (h, d, sidecar) = shuffled_loveda();
        let set = embeddings_from_npy(h, d, &pool, &sidecar).unwrap();
        for c in &pool {
            assert_eq!(set.row(c.index), &[10.0 * c.index as f32, 10.0 * c.index as f32 + 1.0]);
        }
    }

    #[test]
    fn embeddings_missing_and_unknown_rows() {
        let pool = CategoryPool::loveda();
        let (h, d, mut sidecar) = shuffled_loveda();
        sidecar.rows.retain(|r| r.category != "road");
        assert!(matches!(
            embeddings_from_npy(h.clone(), d.clone(), &pool, &sidecar),
            Err(TensorIoError::MissingCategoryRow(n)) if n == "road"
        ));
        sidecar.rows.push(SidecarRow {
            row: 1,
            category: "swamp".into(),
        });
        assert!(matches!(
            embeddings_from_npy(h, d, &pool, &sidecar),
            Err(TensorIoError::UnknownSidecarCategory(n)) if n == "swamp"
        ));
    }

    #[test]
    fn label_raster_sentinel_and_range() {
        let pool = CategoryPool::loveda();
        let h = NpyHeader::new(NpyDtype::U2, vec![2, 2]);
        let r = label_raster_from_npy(h.clone(), NpyData::U2(vec![0, 1, IGNORE_LABEL, 2]), &pool).unwrap();
        assert_eq!(r.labels().iter().filter(|&&l| l == IGNORE_LABEL).count(), 1);
        assert!(matches!(
            label_raster_from_npy(h, NpyData::U2(vec![0, 1, 7, 2]), &pool),
            Err(TensorIoError::LabelOutOfRange { value: 7, position: 2, .. })
        ));
    }

    fn sample_store() -> StandardsStore {
        let pool = CategoryPool::loveda();
        let standards = pool
            .iter()
            .map(|c| InterpretationStandard {
                category: c.name.clone(),
                morphology: format!("{} shapes", c.name),
                spectral_spatial: "varied".into(),
                exclusivity: "none".into(),
                sub_classes: vec!["x".into()],
                source: StandardSource::Manual,
            })
            .collect();
        let rule = |a: &str, b: &str, f: &str| DiscriminationRule {
            category_a: a.into(),
            category_b: b.into(),
            rule: format!("{a} vs {b}"),
            decides_for: f.into(),
            cue: "cue".into(),
        };
        let rules = vec![
            rule("agricultural", "building", "agricultural"),
            rule("barren", "agricultural", "barren"),
            rule("water", "background", "water"),
        ];
        StandardsStore::new(pool, standards, rules, "2026-01-02T03:04:05Z".parse().unwrap()).unwrap()
    }

    #[test]
    fn standards_roundtrip() {
        let store = sample_store();
        let json = standards_to_json(&store).unwrap();
        let back = standards_from_json(&json).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.rules().len(), 3);
    }

    #[test]
    fn standards_missing_barren() {
        let json = standards_to_json(&sample_store()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["standards"]
            .as_array_mut()
            .unwrap()
            .retain(|s| s["category"] != "barren");
        assert!(matches!(
            standards_from_json(&v.to_string()),
            Err(TensorIoError::MissingStandard(n)) if n == "barren"
        ));
    }

    #[test]
    fn standards_version_and_unknown_fields() {
        let json = standards_to_json(&sample_store()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["schema_version"] = 99.into();
        assert!(matches!(
            standards_from_json(&v.to_string()),
            Err(TensorIoError::SchemaVersionMismatch { found: Some(99), .. })
        ));
        v["schema_version"] = 1.into();
        v["future_field"] = true.into();
        let err = standards_from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("future_field"), "{err}");
    }
}
