//! Vocabulary-restricted pixel-to-text alignment.
//!
//! Each pixel takes the candidate category whose text embedding scores
//! highest against the pixel feature. Candidates are the vocabulary's
//! selected categories plus any always-included ones; ties go to the lowest
//! pool index and labels are always global pool indices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AdaptiveVocabulary, DenseFeatureMap, LabelRaster, ModelError, TextEmbeddingSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Inner product of L2-normalized vectors.
    #[default]
    Cosine,
    /// Raw inner product.
    Dot,
}

/// The only tie policy: the lowest pool index wins.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    None,
    Nearest { height: usize, width: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default)]
    pub tie_break: TieBreak,
    /// Categories that are candidates regardless of the vocabulary.
    #[serde(default)]
    pub always_include: Vec<String>,
    #[serde(default)]
    pub upsample: Upsample,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("dimension mismatch: features have D={features}, embeddings have D={embeddings}")]
    DimMismatch { features: usize, embeddings: usize },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("candidate index {index} is outside a pool of {pool_size}")]
    CandidateOutOfRange { index: usize, pool_size: usize },
    #[error("category {0:?} is not in the embedding pool")]
    UnknownCategory(String),
    #[error("cannot upsample {from_h}x{from_w} to the smaller {to_h}x{to_w}")]
    ShrinkUnsupported {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pool indices of `vocab.selected ∪ config.always_include`, ascending.
pub fn candidate_indices(
    embeddings: &TextEmbeddingSet,
    vocab: &AdaptiveVocabulary,
    config: &AlignmentConfig,
) -> Result<Vec<usize>, AlignError> {
    let pool = embeddings.pool();
    let mut out = Vec::with_capacity(pool.len());
    for name in vocab.selected().iter().chain(&config.always_include) {
        let idx = pool
            .index_of(&crate::model::normalize_name(name))
            .ok_or_else(|| AlignError::UnknownCategory(name.clone()))?;
        out.push(idx);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(AlignError::EmptyCandidates);
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * y).sum()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Candidate embedding rows prepared for scoring: unit-normalized in cosine
/// mode (by division, so parallel rows come out bitwise equal), widened to
/// f64 in both modes. A zero row stays zero.
struct PreparedRows {
    indices: Vec<usize>,
    rows: Vec<Vec<f64>>,
    similarity: Similarity,
}

impl PreparedRows {
    fn new(embeddings: &TextEmbeddingSet, candidates: &[usize], similarity: Similarity) -> Result<Self, AlignError> {
        if candidates.is_empty() {
            return Err(AlignError::EmptyCandidates);
        }
        let mut rows = Vec::with_capacity(candidates.len());
        for &c in candidates {
            if c >= embeddings.len() {
                return Err(AlignError::CandidateOutOfRange {
                    index: c,
                    pool_size: embeddings.len(),
                });
            }
            let row = embeddings.row(c);
            let n = match similarity {
                Similarity::Cosine => norm(row),
                Similarity::Dot => 1.0,
            };
            if n > 0.0 {
                rows.push(row.iter().map(|&x| f64::from(x) / n).collect());
            } else {
                rows.push(vec![0.0; row.len()]);
            }
        }
        Ok(Self {
            indices: candidates.to_vec(),
            rows,
            similarity,
        })
    }

    fn scores<'a>(&'a self, feature: &'a [f32]) -> impl Iterator<Item = (usize, f64)> + 'a {
        let inv = match self.similarity {
            Similarity::Dot => 1.0,
            Similarity::Cosine => {
                let n = norm(feature);
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            }
        };
        self.indices
            .iter()
            .zip(&self.rows)
            .map(move |(&i, row)| (i, dot(feature, row) * inv))
    }

    /// Highest-scoring pool index; strict `>` over ascending indices keeps the
    /// lowest index on ties. The feature norm is shared by every candidate,
    /// so the argmax runs on the unscaled inner products: dividing by it
    /// cannot change the winner but its rounding could merge or split ties.
    fn argmax(&self, feature: &[f32]) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (&i, row) in self.indices.iter().zip(&self.rows) {
            let s = dot(feature, row);
            if best.0 == usize::MAX || s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }
}

/// Similarity of one feature vector to each candidate row, in candidate
/// order. Cosine treats a zero vector as scoring 0 against everything.
pub fn score_pixel(
    feature: &[f32],
    embeddings: &TextEmbeddingSet,
    candidates: &[usize],
    similarity: Similarity,
) -> Result<Vec<(usize, f64)>, AlignError> {
    if feature.len() != embeddings.dim() {
        return Err(AlignError::DimMismatch {
            features: feature.len(),
            embeddings: embeddings.dim(),
        });
    }
    let prepared = PreparedRows::new(embeddings, candidates, similarity)?;
    Ok(prepared.scores(feature).collect())
}

/// Restricted argmax labelling of every pixel, optionally followed by
/// nearest-neighbour upsampling. Rows are processed in parallel; the output
/// does not depend on the thread count.
pub fn segment(
    features: &DenseFeatureMap,
    embeddings: &TextEmbeddingSet,
    vocab: &AdaptiveVocabulary,
    config: &AlignmentConfig,
) -> Result<LabelRaster, AlignError> {
    let candidates = candidate_indices(embeddings, vocab, config)?;
    segment_with_candidates(features, embeddings, &candidates, config)
}

/// [`segment`] over an explicit candidate index set (any order, duplicates
/// allowed).
pub fn segment_with_candidates(
    features: &DenseFeatureMap,
    embeddings: &TextEmbeddingSet,
    candidates: &[usize],
    config: &AlignmentConfig,
) -> Result<LabelRaster, AlignError> {
    if features.dim() != embeddings.dim() {
        return Err(AlignError::DimMismatch {
            features: features.dim(),
            embeddings: embeddings.dim(),
        });
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let prepared = PreparedRows::new(embeddings, &sorted, config.similarity)?;
    let (h, w) = (features.height(), features.width());
    let mut labels = vec![0u16; h * w];
    labels.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            *out = prepared.argmax(features.pixel(y, x)) as u16;
        }
    });
    let raster = LabelRaster::new(h, w, labels)?;
    match config.upsample {
        Upsample::None => Ok(raster),
        Upsample::Nearest { height, width } => upsample_nearest(&raster, height, width),
    }
}

/// Nearest-neighbour enlargement: target `(y, x)` takes source
/// `(floor(y*h/target_h), floor(x*w/target_w))`.
pub fn upsample_nearest(raster: &LabelRaster, target_h: usize, target_w: usize) -> Result<LabelRaster, AlignError> {
    let (h, w) = (raster.height(), raster.width());
    if target_h < h || target_w < w {
        return Err(AlignError::ShrinkUnsupported {
            from_h: h,
            from_w: w,
            to_h: target_h,
            to_w: target_w,
        });
    }
    let src_x: Vec<usize> = (0..target_w).map(|x| x * w / target_w).collect();
    let mut labels = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let sy = y * h / target_h;
        labels.extend(src_x.iter().map(|&sx| raster.get(sy, sx)));
    }
    Ok(LabelRaster::new(target_h, target_w, labels)?)
}
