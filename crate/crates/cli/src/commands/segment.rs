//! `segment`: restricted argmax over precomputed features.

use std::path::{Path, PathBuf};

use geovocab_core::align::{segment, AlignError, AlignmentConfig, Similarity, Upsample};
use geovocab_core::model::{AdaptiveVocabulary, DecidedBy, DenseFeatureMap, LabelRaster, TextEmbeddingSet};
use geovocab_core::reason::ReasoningTrace;
use geovocab_core::tensor_io::{load_feature_map, load_text_embeddings, save_label_raster};
use geovocab_core::CategoryPool;

use crate::common::require_pool;
use crate::error::{at_path, CliError, CliResult};
use crate::GlobalArgs;

#[derive(Debug, Clone, clap::Args)]
#[command(group(clap::ArgGroup::new("vocab").required(true).args(["trace", "full_pool"])))]
pub struct SegmentArgs {
    /// Dense feature map, float32 npy of shape (H, W, D).
    #[arg(long)]
    pub features: PathBuf,
    /// Text embeddings, float32 npy of shape (K, D).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Row-to-category sidecar; defaults to the embeddings path with `.json`.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Trace whose vocabulary restricts the candidates.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Use every pool category as a candidate.
    #[arg(long)]
    pub full_pool: bool,
    #[arg(long, value_enum, default_value = "cosine")]
    pub similarity: SimilarityArg,
    /// Category that is always a candidate; repeatable.
    #[arg(long = "always-include", value_name = "CATEGORY")]
    pub always_include: Vec<String>,
    /// Nearest-neighbour upsampling target, e.g. `512x512`.
    #[arg(long, value_parser = parse_size, value_name = "HxW")]
    pub upsample: Option<(usize, usize)>,
    /// Output label raster (uint16 npy).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SimilarityArg {
    Cosine,
    Dot,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Cosine => Similarity::Cosine,
            SimilarityArg::Dot => Similarity::Dot,
        }
    }
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid size component {v:?}"))
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn default_sidecar(embeddings: &Path) -> PathBuf {
    embeddings.with_extension("json")
}

pub fn load_embeddings(npy: &Path, sidecar: &Path, pool: &CategoryPool) -> CliResult<TextEmbeddingSet> {
    load_text_embeddings(npy, pool, sidecar)
        .map_err(|e| CliError::data(format!("embeddings {} (sidecar {}): {e}", npy.display(), sidecar.display())))
}

pub fn load_features(path: &Path) -> CliResult<DenseFeatureMap> {
    load_feature_map(path).map_err(|e| CliError::data(format!("features {}: {e}", path.display())))
}

/// Segments one feature file, naming both tensors on a dimension mismatch.
pub fn segment_files(
    features_path: &Path,
    features: &DenseFeatureMap,
    embeddings_path: &Path,
    embeddings: &TextEmbeddingSet,
    vocab: &AdaptiveVocabulary,
    config: &AlignmentConfig,
) -> CliResult<LabelRaster> {
    segment(features, embeddings, vocab, config).map_err(|e| match e {
        AlignError::DimMismatch { features: f, embeddings: d } => CliError::data(format!(
            "dimension mismatch: features {} have D={f}, embeddings {} have D={d}",
            features_path.display(),
            embeddings_path.display()
        )),
        AlignError::UnknownCategory(_) => CliError::config(e.to_string()),
        e => CliError::data(format!("segmenting {}: {e}", features_path.display())),
    })
}

pub fn full_pool_vocabulary(pool: &CategoryPool) -> AdaptiveVocabulary {
    AdaptiveVocabulary::full_pool(pool, DecidedBy::Fallback, "full pool requested")
}

pub fn run(global: &GlobalArgs, args: &SegmentArgs) -> CliResult<()> {
    let pool = require_pool(global.pool.as_deref())?;
    let sidecar = args.sidecar.clone().unwrap_or_else(|| default_sidecar(&args.embeddings));
    let embeddings = load_embeddings(&args.embeddings, &sidecar, &pool)?;
    let features = load_features(&args.features)?;
    let vocab = match &args.trace {
        Some(path) => ReasoningTrace::load(path)
            .map_err(|e| CliError::data(e.to_string()))?
            .vocabulary,
        None => full_pool_vocabulary(&pool),
    };
    let config = AlignmentConfig {
        similarity: args.similarity.into(),
        always_include: args.always_include.clone(),
        upsample: match args.upsample {
            Some((height, width)) => Upsample::Nearest { height, width },
            None => Upsample::None,
        },
        ..AlignmentConfig::default()
    };
    let raster = segment_files(&args.features, &features, &args.embeddings, &embeddings, &vocab, &config)?;
    save_label_raster(&raster, &args.out).map_err(at_path(&args.out))?;
    log::info!(
        "wrote {}x{} raster over {} candidates to {}",
        raster.height(),
        raster.width(),
        vocab.selected().len(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("32x16"), Ok((32, 16)));
        assert_eq!(parse_size("8X8"), Ok((8, 8)));
        assert!(parse_size("0x8").is_err());
        assert!(parse_size("8").is_err());
    }
}
