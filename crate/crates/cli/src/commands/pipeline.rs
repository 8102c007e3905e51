//! `pipeline`: reason, segment and evaluate a corpus in one run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use geovocab_core::digest::sha256_hex;
use geovocab_core::metrics::{render_report, EvalReport, ReportFormat};
use geovocab_core::model::{AdaptiveVocabulary, STANDARDS_SCHEMA_VERSION};
use geovocab_core::prompts::{PromptTemplates, PROMPT_SET_VERSION};
use geovocab_core::reason::{description_prompts, ReasonConfig, ReasoningTrace};
use geovocab_core::tensor_io::{label_raster_to_npy, load_label_raster};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::commands::eval::{evaluate, EvalItem};
use crate::commands::reason::reason_images;
use crate::commands::segment::{full_pool_vocabulary, load_embeddings, load_features, segment_files};
use crate::common::{build_time, collect_images, file_stem, load_pool_file, load_store, write_output, GatewayFlags, LoggedBackend};
use crate::config::{Mode, PipelineConfig};
use crate::error::{at_path, CliError, CliResult};
use crate::GlobalArgs;

#[derive(Debug, Clone, clap::Args)]
pub struct PipelineArgs {
    /// Pipeline configuration JSON.
    pub config: PathBuf,
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Present when the config names a ground-truth directory.
    pub report: Option<EvalReport>,
    /// Selected categories per image stem.
    pub vocabularies: BTreeMap<String, Vec<String>>,
    pub manifest: Value,
    /// Digest over the manifest without its timestamp.
    pub digest: String,
}

struct ImageJob {
    stem: String,
    image: PathBuf,
    features: PathBuf,
}

pub fn run(global: &GlobalArgs, args: &PipelineArgs) -> CliResult<()> {
    let outcome = run_pipeline(&args.config, &global.gateway_flags())?;
    if let Some(r) = &outcome.report {
        let cat = r.cat_acc.map_or_else(|| "n/a".to_string(), |c| format!("{:.2}", c * 100.0));
        println!(
            "{}: mIoU {:.2}  OA {:.2}  Cat. Acc. {cat}  ({} images)",
            outcome.mode.as_str(),
            r.miou * 100.0,
            r.oa * 100.0,
            r.images_evaluated
        );
    }
    println!("manifest digest {}", outcome.digest);
    Ok(())
}

pub fn run_pipeline(config_path: &Path, flags: &GatewayFlags) -> CliResult<PipelineOutcome> {
    let cfg = PipelineConfig::load(config_path)?;
    cfg.validate()?;
    let mode = cfg.mode();
    let pool = load_pool_file(&cfg.pool_path)?;
    let store = match &cfg.standards_path {
        Some(p) => Some(load_store(p, &pool)?),
        None => None,
    };
    let embeddings = load_embeddings(&cfg.embeddings_path, &cfg.sidecar_path, &pool)?;

    let images = collect_images(std::slice::from_ref(&cfg.images_dir))?;
    if images.is_empty() {
        return Err(CliError::data(format!("no images in {}", cfg.images_dir.display())));
    }
    let mut jobs = Vec::with_capacity(images.len());
    for image in images {
        let stem = file_stem(&image);
        let features = cfg.features_dir.join(format!("{stem}.npy"));
        if !features.is_file() {
            return Err(CliError::data(format!("no feature map for image {stem}: expected {}", features.display())));
        }
        if jobs.iter().any(|j: &ImageJob| j.stem == stem) {
            return Err(CliError::data(format!("two images share the stem {stem:?}")));
        }
        jobs.push(ImageJob { stem, image, features });
    }

    let mut stages = serde_json::Map::new();
    let mut outputs = BTreeMap::new();
    let prompts = PromptTemplates::builtin();

    // reason
    let traces: Option<Vec<ReasoningTrace>> = if mode == Mode::GrCot {
        let store = store.as_ref().expect("validated: gr_cot has standards");
        let backend = LoggedBackend::build(&flags.apply(cfg.gateway.clone()))?;
        let config = ReasonConfig {
            prompts: prompts.clone(),
            ..ReasonConfig::default()
        };
        let paths: Vec<PathBuf> = jobs.iter().map(|j| j.image.clone()).collect();
        let mut traces = Vec::with_capacity(paths.len());
        for result in reason_images(&paths, store, &backend, &config) {
            let trace = result.map_err(|f| CliError {
                kind: f.kind,
                message: format!("reason stage: {}: {}", f.image, f.error),
            })?;
            let path = trace.save(&cfg.output_dir.join("traces")).map_err(at_path(&cfg.output_dir))?;
            outputs.insert(relative(&cfg.output_dir, &path), sha256_hex(trace.to_json().as_bytes()));
            traces.push(trace);
        }
        let warnings: usize = traces.iter().map(|t| t.warnings.len()).sum();
        stages.insert(
            "reason".into(),
            json!({
                "status": "ok",
                "images": traces.len(),
                "fallbacks": traces.iter().filter(|t| t.vocabulary.fallback_used()).count(),
                "warnings": warnings,
            }),
        );
        Some(traces)
    } else {
        stages.insert("reason".into(), json!({ "status": "skipped" }));
        None
    };
    let full = full_pool_vocabulary(&pool);
    let vocab_of = |i: usize| -> &AdaptiveVocabulary {
        match &traces {
            Some(t) => &t[i].vocabulary,
            None => &full,
        }
    };

    // segment
    let alignment = cfg.raw.alignment.clone();
    let rasters = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let features = load_features(&job.features)?;
            segment_files(&job.features, &features, &cfg.embeddings_path, &embeddings, vocab_of(i), &alignment)
                .map_err(|e| e.context("segment stage"))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (job, raster) in jobs.iter().zip(&rasters) {
        let path = cfg.output_dir.join("predictions").join(format!("{}.npy", job.stem));
        let bytes = label_raster_to_npy(raster).map_err(at_path(&path))?;
        write_output(&path, &bytes)?;
        outputs.insert(relative(&cfg.output_dir, &path), sha256_hex(&bytes));
    }
    stages.insert("segment".into(), json!({ "status": "ok", "rasters": rasters.len() }));

    // eval
    let mut gt_hashes = BTreeMap::new();
    let report = match &cfg.gt_dir {
        Some(gt_dir) => {
            let mut items = Vec::with_capacity(jobs.len());
            for (i, (job, pred)) in jobs.iter().zip(rasters).enumerate() {
                let gt_path = gt_dir.join(format!("{}.npy", job.stem));
                if !gt_path.is_file() {
                    return Err(CliError::data(format!(
                        "eval stage: no ground truth for image {}: expected {}",
                        job.stem,
                        gt_path.display()
                    )));
                }
                gt_hashes.insert(job.stem.clone(), hash_file(&gt_path)?);
                let gt = load_label_raster(&gt_path, &pool)
                    .map_err(|e| CliError::data(format!("eval stage: {}: {e}", gt_path.display())))?;
                items.push(EvalItem {
                    stem: job.stem.clone(),
                    pred,
                    gt,
                    vocabulary: Some(vocab_of(i).selected().to_vec()),
                    fallback_used: traces.is_some() && vocab_of(i).fallback_used(),
                });
            }
            let report = evaluate(&pool, &items).map_err(|e| e.context("eval stage"))?;
            for (name, format) in [("report.json", ReportFormat::Json), ("report.txt", ReportFormat::TextTable)] {
                let bytes = render_report(&report, format);
                write_output(&cfg.output_dir.join(name), &bytes)?;
                outputs.insert(name.to_string(), sha256_hex(&bytes));
            }
            stages.insert(
                "eval".into(),
                json!({
                    "status": "ok",
                    "images": report.images_evaluated,
                    "miou": report.miou,
                    "oa": report.oa,
                    "cat_acc": report.cat_acc,
                }),
            );
            Some(report)
        }
        None => {
            stages.insert("eval".into(), json!({ "status": "skipped" }));
            None
        }
    };

    // manifest
    let mut image_hashes = BTreeMap::new();
    let mut feature_hashes = BTreeMap::new();
    let mut per_image = Vec::with_capacity(jobs.len());
    let mut vocabularies = BTreeMap::new();
    for (i, job) in jobs.iter().enumerate() {
        let image_hash = hash_file(&job.image)?;
        feature_hashes.insert(job.stem.clone(), hash_file(&job.features)?);
        let vocab = vocab_of(i);
        per_image.push(json!({
            "stem": job.stem,
            "content_hash": image_hash,
            "vocabulary": vocab.selected(),
            "fallback_used": traces.is_some() && vocab.fallback_used(),
            "trace": traces.as_ref().map(|t| format!("traces/{}", t[i].file_name())),
        }));
        image_hashes.insert(job.stem.clone(), image_hash);
        vocabularies.insert(job.stem.clone(), vocab.selected().to_vec());
    }
    let mut inputs = json!({
        "pool": hash_file(&cfg.pool_path)?,
        "embeddings": hash_file(&cfg.embeddings_path)?,
        "sidecar": hash_file(&cfg.sidecar_path)?,
        "images": image_hashes,
        "features": feature_hashes,
        "ground_truth": gt_hashes,
    });
    if let Some(p) = &cfg.standards_path {
        inputs["standards"] = json!(hash_file(p)?);
    }
    let mut manifest = json!({
        "tool": "geovocab",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "prompt_set_version": PROMPT_SET_VERSION,
        "prompt_digest": prompts.digest(),
        "standards_schema_version": STANDARDS_SCHEMA_VERSION,
        "mode": mode.as_str(),
        "config_digest": cfg.digest,
        "inputs": inputs,
        "stages": stages,
        "images": per_image,
        "outputs": outputs,
    });
    if mode == Mode::MllmDescriptionsOnly {
        let store = store.as_ref().expect("validated: mode has standards");
        manifest["description_prompts"] = json!(description_prompts(store));
    }
    let digest = sha256_hex(&serde_json::to_vec(&manifest).expect("manifest serializes"));
    manifest["digest"] = json!(digest);
    // Wall-clock values stay outside the digest.
    manifest["created_at"] = json!(build_time()?.to_rfc3339());
    if let Some(traces) = &traces {
        let timings: BTreeMap<&str, _> = jobs
            .iter()
            .zip(traces)
            .map(|(job, t)| (job.stem.as_str(), &t.stage_timings_ms))
            .collect();
        manifest["reason_timings_ms"] = json!(timings);
    }
    let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    body.push('\n');
    write_output(&cfg.output_dir.join("manifest.json"), body.as_bytes())?;
    log::info!("{} run finished; manifest digest {digest}", mode.as_str());

    Ok(PipelineOutcome {
        mode,
        output_dir: cfg.output_dir.clone(),
        report,
        vocabularies,
        manifest,
        digest,
    })
}

fn hash_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(at_path(path))?))
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}
