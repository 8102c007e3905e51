//! `eval`: confusion-matrix metrics and category accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use geovocab_core::metrics::{category_accuracy, render_report, ConfusionMatrix, EvalReport, ImageCategorySets, ReportFormat};
use geovocab_core::model::LabelRaster;
use geovocab_core::reason::ReasoningTrace;
use geovocab_core::tensor_io::load_label_raster;
use geovocab_core::CategoryPool;
use rayon::prelude::*;

use crate::common::{list_with_extensions, npy_by_stem, require_pool, write_output};
use crate::error::{CliError, CliResult};
use crate::GlobalArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Directory of predicted label rasters.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label rasters with matching stems.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory of trace files; enables category accuracy.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FormatArg {
    Text,
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => ReportFormat::TextTable,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

/// One scored image.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub stem: String,
    pub pred: LabelRaster,
    pub gt: LabelRaster,
    /// Predicted category set for category accuracy.
    pub vocabulary: Option<Vec<String>>,
    pub fallback_used: bool,
}

/// Accumulates every item into one matrix and, when every item carries a
/// vocabulary, computes category accuracy.
pub fn evaluate(pool: &CategoryPool, items: &[EvalItem]) -> CliResult<EvalReport> {
    if items.is_empty() {
        return Err(CliError::data("no prediction/ground-truth pairs to evaluate"));
    }
    let partials = items
        .par_iter()
        .map(|item| {
            let mut cm = ConfusionMatrix::new(pool.clone());
            cm.accumulate(&item.pred, &item.gt)
                .map_err(|e| CliError::data(format!("{}: {e}", item.stem)))?;
            Ok(cm)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(pool.clone());
    for cm in &partials {
        total.merge(cm).map_err(|e| CliError::data(e.to_string()))?;
    }

    let cat_acc = if items.iter().all(|i| i.vocabulary.is_some()) {
        let sets: Vec<ImageCategorySets> = items
            .iter()
            .map(|i| ImageCategorySets {
                image: i.stem.clone(),
                predicted: i.vocabulary.iter().flatten().cloned().collect(),
                ground_truth: present_categories(pool, &i.gt),
            })
            .collect();
        Some(category_accuracy(&sets).map_err(|e| CliError::data(e.to_string()))?)
    } else {
        None
    };
    let fallbacks = items.iter().filter(|i| i.fallback_used).count();
    EvalReport::from_confusion(&total, cat_acc, items.len(), fallbacks).map_err(|e| CliError::data(e.to_string()))
}

/// Names of the categories present (non-sentinel) in a ground-truth raster.
pub fn present_categories(pool: &CategoryPool, gt: &LabelRaster) -> BTreeSet<String> {
    gt.present_labels()
        .into_iter()
        .filter_map(|l| pool.get(l as usize).map(|c| c.name.clone()))
        .collect()
}

/// Pairs files by stem, listing every stem found on one side only.
pub fn pair_by_stem(pred_dir: &Path, gt_dir: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let preds = npy_by_stem(pred_dir)?;
    let gts = npy_by_stem(gt_dir)?;
    let pred_only: Vec<&str> = preds.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
    let gt_only: Vec<&str> = gts.keys().filter(|k| !preds.contains_key(*k)).map(String::as_str).collect();
    if !pred_only.is_empty() || !gt_only.is_empty() {
        return Err(CliError::data(format!(
            "unmatched pairs: prediction only [{}]; ground truth only [{}]",
            pred_only.join(", "),
            gt_only.join(", ")
        )));
    }
    Ok(preds
        .into_iter()
        .map(|(stem, p)| {
            let g = gts[&stem].clone();
            (stem, p, g)
        })
        .collect())
}

/// Traces in `dir`, keyed by the stem of the image they describe.
pub fn traces_by_stem(dir: &Path) -> CliResult<BTreeMap<String, ReasoningTrace>> {
    let mut map = BTreeMap::new();
    for path in list_with_extensions(dir, &["json"])? {
        if !path.to_string_lossy().ends_with(".trace.json") {
            continue;
        }
        let trace = ReasoningTrace::load(&path).map_err(|e| CliError::data(e.to_string()))?;
        let stem = trace.image.stem();
        if map.insert(stem.clone(), trace).is_some() {
            return Err(CliError::data(format!(
                "{}: more than one trace for image stem {stem:?}",
                dir.display()
            )));
        }
    }
    Ok(map)
}

fn load_raster(path: &Path, pool: &CategoryPool) -> CliResult<LabelRaster> {
    load_label_raster(path, pool).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn run(global: &GlobalArgs, args: &EvalArgs) -> CliResult<()> {
    let pool = require_pool(global.pool.as_deref())?;
    let pairs = pair_by_stem(&args.pred, &args.gt)?;
    let mut traces = match &args.traces {
        Some(dir) => Some(traces_by_stem(dir)?),
        None => None,
    };
    if let Some(traces) = &traces {
        let missing: Vec<&str> = pairs
            .iter()
            .map(|(s, _, _)| s.as_str())
            .filter(|s| !traces.contains_key(*s))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::data(format!("no trace for images [{}]", missing.join(", "))));
        }
    }
    let loaded = pairs
        .par_iter()
        .map(|(stem, p, g)| Ok((stem.clone(), load_raster(p, &pool)?, load_raster(g, &pool)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let items: Vec<EvalItem> = loaded
        .into_iter()
        .map(|(stem, pred, gt)| {
            let trace = traces.as_mut().and_then(|t| t.remove(&stem));
            EvalItem {
                vocabulary: trace.as_ref().map(|t| t.vocabulary.selected().to_vec()),
                fallback_used: trace.as_ref().is_some_and(|t| t.vocabulary.fallback_used()),
                stem,
                pred,
                gt,
            }
        })
        .collect();
    if let Some(extra) = traces.filter(|t| !t.is_empty()) {
        log::warn!("ignoring traces without a raster pair: {:?}", extra.keys().collect::<Vec<_>>());
    }
    let report = evaluate(&pool, &items)?;
    let bytes = render_report(&report, args.format.into());
    match &args.out {
        Some(path) => write_output(path, &bytes),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| CliError::data(format!("writing report: {e}")))
        }
    }
}
