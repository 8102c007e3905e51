//! Online per-image reasoning: scene anchoring, attribute decoupling and
//! vocabulary synthesis, strictly in that order.
//!
//! Verdicts come from the model; categories the model leaves out are decided
//! by [`rule_fallback_verify`], a deterministic token-overlap engine over the
//! standards store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::model::{
    normalize_name, AdaptiveVocabulary, AttributeKind, CategoryVerdict, DecidedBy, DiscriminationRule, ImageRef,
    ModelError, SceneContext, StandardsStore, VisualAttribute, VisualAttributeSet, SEED_SCENE_LABELS,
};
use crate::prompts::{PromptError, PromptKind, PromptTemplates};
use crate::structured::{ask_structured, optional_str, required_str, AskError, StageOutput};

pub const ANCHOR_SCHEMA_ID: &str = "scene_anchor";
pub const DECOUPLE_SCHEMA_ID: &str = "decouple";
pub const VERIFY_SCHEMA_ID: &str = "verify_vocabulary";

const ANCHOR_SCHEMA: &str = r#"{"scene": string, "confidence": number in [0, 1], "rationale": string}"#;
const DECOUPLE_SCHEMA: &str =
    r#"{"attributes": [{"description": string, "kind": "geometry"|"texture"|"spectral"|"object", "region_hint": string?}]} with at least one attribute"#;
const VERIFY_SCHEMA: &str =
    r#"{"verdicts": [{"category": string, "present": boolean, "justification": string}]}"#;

const NO_ATTRIBUTES: &str = "attribute list is empty";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReasonStage {
    Anchor,
    Decouple,
    Synthesize,
}

impl ReasonStage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Anchor => "anchor",
            Self::Decouple => "decouple",
            Self::Synthesize => "synthesize",
        }
    }
}

impl fmt::Display for ReasonStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ReasonError {
    #[error("{stage} stage: {source}")]
    Gateway {
        stage: ReasonStage,
        #[source]
        source: GatewayError,
    },
    #[error("anchor stage: malformed scene: {0}")]
    MalformedScene(String),
    #[error("decouple stage: malformed attributes: {0}")]
    MalformedAttributes(String),
    #[error("decouple stage: the model returned no visual attributes")]
    EmptyAttributeSet,
    #[error("synthesize stage: malformed verdicts: {0}")]
    MalformedVerdicts(String),
    #[error("missing interpretation standard for {0:?}")]
    MissingStandard(String),
    #[error("anchor stage: image {0} has no payload")]
    MissingImagePayload(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ReasonError {
    pub fn stage(&self) -> Option<ReasonStage> {
        match self {
            Self::Gateway { stage, .. } => Some(*stage),
            Self::MalformedScene(_) | Self::MissingImagePayload(_) => Some(ReasonStage::Anchor),
            Self::MalformedAttributes(_) | Self::EmptyAttributeSet => Some(ReasonStage::Decouple),
            Self::MalformedVerdicts(_) | Self::MissingStandard(_) => Some(ReasonStage::Synthesize),
            Self::Prompt(_) | Self::Model(_) => None,
        }
    }

    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            Self::Gateway { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReasonConfig {
    pub prompts: PromptTemplates,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Scene labels suggested to the model; the set stays open.
    pub scene_labels: Vec<String>,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        Self {
            prompts: PromptTemplates::builtin(),
            temperature: 0.0,
            max_tokens: 1024,
            scene_labels: SEED_SCENE_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ReasonConfig {
    fn request(&self, schema_id: &str, user_text: String) -> ChatRequest {
        ChatRequest::new(schema_id, self.prompts.get(PromptKind::System))
            .text(user_text)
            .temperature(self.temperature)
            .max_tokens(self.max_tokens)
    }
}

fn gateway_err(stage: ReasonStage) -> impl FnOnce(GatewayError) -> ReasonError {
    move |source| ReasonError::Gateway { stage, source }
}

// ---- anchoring ----

pub fn anchor_request(image: &ImageRef, config: &ReasonConfig) -> Result<ChatRequest, ReasonError> {
    let labels = config.scene_labels.join(", ");
    let text = config.prompts.render(PromptKind::Anchor, &[("scene_labels", &labels)])?;
    Ok(config.request(ANCHOR_SCHEMA_ID, text).image(image.clone()))
}

fn parse_scene(v: &Value, warnings: &mut Vec<String>) -> Result<SceneContext, String> {
    let label = match v.get("scene") {
        Some(_) => required_str(v, "scene")?,
        None => required_str(v, "label").map_err(|_| "missing field \"scene\"".to_string())?,
    };
    let confidence = match v.get("confidence") {
        Some(Value::Number(n)) => n.as_f64().ok_or("confidence is not a finite number")?,
        Some(Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("confidence {s:?} is not a number"))?,
        Some(_) => return Err("confidence is not a number".into()),
        None => return Err("missing field \"confidence\"".into()),
    };
    if !confidence.is_finite() {
        return Err("confidence is not a finite number".into());
    }
    let clamped = confidence.clamp(0.0, 1.0);
    if clamped != confidence {
        warnings.push(format!("scene confidence {confidence} clamped to {clamped}"));
    }
    SceneContext::new(label, clamped, optional_str(v, "rationale")?).map_err(|e| e.to_string())
}

/// Global geographic context of the image.
pub fn anchor_scene(
    image: &ImageRef,
    gateway: &dyn ChatBackend,
    config: &ReasonConfig,
) -> Result<StageOutput<SceneContext>, ReasonError> {
    if image.bytes.is_none() {
        return Err(ReasonError::MissingImagePayload(image.uri.clone()));
    }
    let request = anchor_request(image, config)?;
    ask_structured(gateway, request, ANCHOR_SCHEMA, parse_scene).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(ReasonStage::Anchor)(source),
        AskError::Malformed(reason) => ReasonError::MalformedScene(reason),
    })
}

// ---- decoupling ----

pub fn decouple_request(
    image: &ImageRef,
    scene: &SceneContext,
    config: &ReasonConfig,
) -> Result<ChatRequest, ReasonError> {
    let rationale = if scene.rationale.trim().is_empty() {
        "no rationale given"
    } else {
        scene.rationale.trim()
    };
    let text = config.prompts.render(
        PromptKind::Decouple,
        &[("scene", &scene.label), ("scene_rationale", rationale)],
    )?;
    Ok(config.request(DECOUPLE_SCHEMA_ID, text).image(image.clone()))
}

fn parse_attributes(v: &Value, warnings: &mut Vec<String>) -> Result<Vec<VisualAttribute>, String> {
    let items = match v {
        Value::Array(items) => items,
        _ => v
            .get("attributes")
            .and_then(Value::as_array)
            .ok_or("missing list field \"attributes\"")?,
    };
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let (description, kind_text, hint) = match item {
            Value::String(s) => (s.trim(), "", ""),
            Value::Object(_) => (
                optional_str(item, "description")?,
                optional_str(item, "kind")?,
                optional_str(item, "region_hint")?,
            ),
            _ => return Err(format!("attribute {i} is neither an object nor a string")),
        };
        if description.is_empty() {
            warnings.push(format!("dropped attribute {i}: empty description"));
            continue;
        }
        let kind = AttributeKind::parse(kind_text).unwrap_or_else(|| {
            warnings.push(format!("attribute {i}: unknown kind {kind_text:?} mapped to object"));
            AttributeKind::Object
        });
        let mut attr = VisualAttribute::new(description, kind).map_err(|e| e.to_string())?;
        if !hint.is_empty() {
            attr = attr.with_region_hint(hint);
        }
        out.push(attr);
    }
    if out.is_empty() {
        return Err(NO_ATTRIBUTES.into());
    }
    Ok(out)
}

/// Discrete visual attributes of the image, conditioned on its scene.
pub fn decouple_attributes(
    image: &ImageRef,
    scene: &SceneContext,
    gateway: &dyn ChatBackend,
    config: &ReasonConfig,
) -> Result<StageOutput<VisualAttributeSet>, ReasonError> {
    let request = decouple_request(image, scene, config)?;
    let out = ask_structured(gateway, request, DECOUPLE_SCHEMA, parse_attributes).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(ReasonStage::Decouple)(source),
        AskError::Malformed(reason) if reason == NO_ATTRIBUTES => ReasonError::EmptyAttributeSet,
        AskError::Malformed(reason) => ReasonError::MalformedAttributes(reason),
    })?;
    Ok(out.map(|attributes| VisualAttributeSet {
        attributes,
        scene: scene.clone(),
    }))
}

// ---- vocabulary synthesis ----

fn render_attributes(attributes: &VisualAttributeSet) -> String {
    attributes
        .attributes
        .iter()
        .map(|a| {
            let kind = serde_json::to_value(a.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            match &a.region_hint {
                Some(h) => format!("- [{kind}] {} (region: {h})", a.description),
                None => format!("- [{kind}] {}", a.description),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_standards(store: &StandardsStore) -> String {
    store
        .standards()
        .iter()
        .map(|s| {
            let subs = if s.sub_classes.is_empty() {
                "none listed".to_string()
            } else {
                s.sub_classes.join(", ")
            };
            format!(
                "- {}\n  morphology: {}\n  spectral-spatial: {}\n  exclusivity: {}\n  sub-classes: {subs}",
                s.category, s.morphology, s.spectral_spatial, s.exclusivity
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_rules(rules: &[DiscriminationRule]) -> String {
    if rules.is_empty() {
        return "(none)".into();
    }
    rules
        .iter()
        .map(|r| format!("- {} vs {}: {} (decides for {})", r.category_a, r.category_b, r.rule, r.decides_for))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The verification prompt: scene, every attribute, and the serialized
/// standards and rules for the store's pool.
pub fn synthesize_request(
    scene: &SceneContext,
    attributes: &VisualAttributeSet,
    store: &StandardsStore,
    config: &ReasonConfig,
) -> Result<ChatRequest, ReasonError> {
    let pool = store.pool().names().collect::<Vec<_>>().join(", ");
    let text = config.prompts.render(
        PromptKind::SynthesizeVocabulary,
        &[
            ("scene", &scene.label),
            ("scene_confidence", &format!("{:.2}", scene.confidence)),
            ("attributes", &render_attributes(attributes)),
            ("standards", &render_standards(store)),
            ("rules", &render_rules(store.rules())),
            ("pool", &pool),
        ],
    )?;
    Ok(config.request(VERIFY_SCHEMA_ID, text))
}

struct RawVerdict {
    category: String,
    present: bool,
    justification: String,
}

fn parse_verdicts(v: &Value) -> Result<Vec<RawVerdict>, String> {
    let items = match v {
        Value::Array(items) => items,
        _ => v
            .get("verdicts")
            .and_then(Value::as_array)
            .ok_or("missing list field \"verdicts\"")?,
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let category = required_str(item, "category").map_err(|e| format!("verdict {i}: {e}"))?;
            let present = match item.get("present") {
                Some(Value::Bool(b)) => *b,
                Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => true,
                Some(Value::String(s)) if s.eq_ignore_ascii_case("false") => false,
                _ => return Err(format!("verdict {i}: \"present\" must be a boolean")),
            };
            Ok(RawVerdict {
                category: normalize_name(category),
                present,
                justification: optional_str(item, "justification")?.to_string(),
            })
        })
        .collect()
}

/// One verdict per pool category. Model verdicts for unknown categories are
/// dropped with a warning; categories the model omits are decided by the rule
/// engine. When nothing ends up present, the vocabulary falls back to the
/// full pool with `fallback_used` set.
pub fn synthesize_vocabulary(
    scene: &SceneContext,
    attributes: &VisualAttributeSet,
    store: &StandardsStore,
    gateway: &dyn ChatBackend,
    config: &ReasonConfig,
) -> Result<StageOutput<AdaptiveVocabulary>, ReasonError> {
    let request = synthesize_request(scene, attributes, store, config)?;
    let out = ask_structured(gateway, request, VERIFY_SCHEMA, |v, _| parse_verdicts(v)).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(ReasonStage::Synthesize)(source),
        AskError::Malformed(reason) => ReasonError::MalformedVerdicts(reason),
    })?;
    let pool = store.pool();
    let mut warnings = out.warnings.clone();
    let mut by_name: BTreeMap<String, CategoryVerdict> = BTreeMap::new();
    for raw in &out.value {
        if !pool.contains(&raw.category) {
            warnings.push(format!("dropped verdict for unknown category {:?}", raw.category));
            continue;
        }
        if by_name.contains_key(&raw.category) {
            warnings.push(format!("ignored repeated verdict for {:?}", raw.category));
            continue;
        }
        let justification = if raw.justification.is_empty() {
            if raw.present {
                warnings.push(format!("verdict for {:?} has no justification", raw.category));
            }
            "no justification given by the model".to_string()
        } else {
            raw.justification.clone()
        };
        by_name.insert(
            raw.category.clone(),
            CategoryVerdict {
                category: raw.category.clone(),
                present: raw.present,
                justification,
                decided_by: DecidedBy::Mllm,
            },
        );
    }
    let mut verdicts = Vec::with_capacity(pool.len());
    for c in pool.iter() {
        match by_name.remove(&c.name) {
            Some(v) => verdicts.push(v),
            None => {
                warnings.push(format!("model omitted {:?}; decided by the rule engine", c.name));
                verdicts.push(rule_fallback_verify(&c.name, scene, attributes, store)?);
            }
        }
    }
    let vocabulary = if verdicts.iter().any(|v| v.present) {
        AdaptiveVocabulary::from_verdicts(pool, verdicts, false)?
    } else {
        warnings.push("no category verified present; using the full pool".into());
        AdaptiveVocabulary::full_pool(
            pool,
            DecidedBy::Fallback,
            "no category was verified present; full pool retained",
        )
    };
    Ok(StageOutput {
        value: vocabulary,
        prompt: out.prompt,
        raw_response: out.raw_response,
        warnings,
        reprompted: out.reprompted,
    })
}

// ---- rule engine ----

const STOP_WORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "being", "both", "but", "by",
    "can", "each", "etc", "for", "from", "has", "have", "in", "into", "is", "it", "its", "like", "may", "more",
    "most", "no", "not", "of", "often", "on", "or", "other", "over", "rather", "such", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "to", "typically", "under", "usually",
    "very", "was", "were", "which", "while", "with", "within",
];

fn stem(word: &str) -> String {
    if word.len() > 4 && word.ends_with("ies") {
        format!("{}y", &word[..word.len() - 3])
    } else if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

/// Lowercased alphanumeric words minus stop-words, with plural endings
/// folded ("greenhouses" and "greenhouse" match).
pub fn keyword_tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !STOP_WORDS.contains(w))
        .map(stem)
        .collect()
}

/// Words that fire a rule: its text and cue, minus the names of the two
/// categories it separates.
fn rule_trigger_tokens(rule: &DiscriminationRule) -> BTreeSet<String> {
    let mut tokens = keyword_tokens(&format!("{} {}", rule.rule, rule.cue));
    for name in [&rule.category_a, &rule.category_b] {
        for t in keyword_tokens(name) {
            tokens.remove(&t);
        }
    }
    tokens
}

/// Deterministic stand-in for model verification of one category.
///
/// Present iff some attribute shares a keyword with the category's standard
/// (morphology, spectral-spatial text and sub-classes) and that same
/// attribute does not trigger a discrimination rule deciding against the
/// category.
pub fn rule_fallback_verify(
    category: &str,
    scene: &SceneContext,
    attributes: &VisualAttributeSet,
    store: &StandardsStore,
) -> Result<CategoryVerdict, ReasonError> {
    let standard = store
        .standard(category)
        .ok_or_else(|| ReasonError::MissingStandard(category.to_string()))?;
    let mut standard_tokens = keyword_tokens(&standard.morphology);
    standard_tokens.extend(keyword_tokens(&standard.spectral_spatial));
    for sub in &standard.sub_classes {
        standard_tokens.extend(keyword_tokens(sub));
    }
    let against: Vec<(&DiscriminationRule, BTreeSet<String>)> = store
        .rules()
        .iter()
        .filter(|r| r.decides_against() == category)
        .map(|r| (r, rule_trigger_tokens(r)))
        .collect();

    let mut overruled: Option<(String, &DiscriminationRule)> = None;
    for attr in &attributes.attributes {
        let attr_tokens = keyword_tokens(&attr.description);
        let shared: Vec<&str> = attr_tokens
            .intersection(&standard_tokens)
            .map(String::as_str)
            .collect();
        if shared.is_empty() {
            continue;
        }
        match against.iter().find(|(_, t)| !t.is_disjoint(&attr_tokens)) {
            Some((rule, _)) => {
                overruled.get_or_insert((attr.description.clone(), rule));
            }
            None => {
                return Ok(CategoryVerdict {
                    category: category.to_string(),
                    present: true,
                    justification: format!(
                        "attribute \"{}\" matches the {category} standard on: {} (scene {})",
                        attr.description,
                        shared.join(", "),
                        scene.label
                    ),
                    decided_by: DecidedBy::RuleEngine,
                });
            }
        }
    }
    let justification = match overruled {
        Some((desc, rule)) => format!(
            "attribute \"{desc}\" matches the {category} standard but the {} vs {} rule assigns it to {}",
            rule.category_a, rule.category_b, rule.decides_for
        ),
        None => format!("no attribute matches the {category} standard"),
    };
    Ok(CategoryVerdict {
        category: category.to_string(),
        present: false,
        justification,
        decided_by: DecidedBy::RuleEngine,
    })
}

// ---- chain ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub image: ImageRef,
    pub scene: SceneContext,
    pub attributes: VisualAttributeSet,
    pub vocabulary: AdaptiveVocabulary,
    /// Wall-clock per stage. Not written to trace files so reruns stay
    /// byte-identical.
    #[serde(skip_serializing, default)]
    pub stage_timings_ms: BTreeMap<String, u64>,
    pub raw_responses: BTreeMap<String, String>,
    /// User prompt text sent at each stage.
    pub prompts: BTreeMap<String, String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ReasoningTrace {
    pub fn file_name(&self) -> String {
        trace_file_name(&self.image.content_hash)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    /// Writes `{image_hash}.trace.json` under `dir` atomically.
    pub fn save(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(self.file_name());
        crate::fsio::write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, TraceLoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| TraceLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TraceLoadError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn trace_file_name(content_hash: &str) -> String {
    format!("{content_hash}.trace.json")
}

#[derive(Debug, Error)]
pub enum TraceLoadError {
    #[error("reading trace {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing trace {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Runs anchor, decouple and synthesize in order for one image.
pub fn run_chain(
    image: &ImageRef,
    store: &StandardsStore,
    gateway: &dyn ChatBackend,
    config: &ReasonConfig,
) -> Result<ReasoningTrace, ReasonError> {
    let mut timings = BTreeMap::new();
    let mut raw = BTreeMap::new();
    let mut prompts = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut record = |stage: ReasonStage, started: Instant, prompt: String, response: String, w: Vec<String>| {
        timings.insert(stage.as_str().to_string(), started.elapsed().as_millis() as u64);
        prompts.insert(stage.as_str().to_string(), prompt);
        raw.insert(stage.as_str().to_string(), response);
        warnings.extend(w.into_iter().map(|w| format!("{stage}: {w}")));
    };

    let t = Instant::now();
    let scene = anchor_scene(image, gateway, config)?;
    record(ReasonStage::Anchor, t, scene.prompt, scene.raw_response, scene.warnings);
    let scene = scene.value;

    let t = Instant::now();
    let attributes = decouple_attributes(image, &scene, gateway, config)?;
    record(ReasonStage::Decouple, t, attributes.prompt, attributes.raw_response, attributes.warnings);
    let attributes = attributes.value;

    let t = Instant::now();
    let vocabulary = synthesize_vocabulary(&scene, &attributes, store, gateway, config)?;
    record(ReasonStage::Synthesize, t, vocabulary.prompt, vocabulary.raw_response, vocabulary.warnings);

    Ok(ReasoningTrace {
        image: image.clone(),
        scene,
        attributes,
        vocabulary: vocabulary.value,
        stage_timings_ms: timings,
        raw_responses: raw,
        prompts,
        warnings,
    })
}

/// Per-category text prompts enriched with the distilled standards, as used
/// when the standards feed the text encoder but no per-image reasoning runs.
pub fn description_prompts(store: &StandardsStore) -> BTreeMap<String, String> {
    store
        .pool()
        .iter()
        .zip(store.standards())
        .map(|(c, s)| {
            (
                c.name.clone(),
                format!(
                    "a remote sensing image of {}: {} {}",
                    c.display.to_lowercase(),
                    s.morphology.trim(),
                    s.spectral_spatial.trim()
                ),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendKind, ChatResponse};
    use crate::model::{CategoryPool, InterpretationStandard, StandardSource};
    use chrono::TimeZone;
    use proptest::prelude::*;
    use serde_json::json;

    struct FnBackend<F>(F);

    impl<F: Fn(&ChatRequest) -> Option<String> + Send + Sync> ChatBackend for FnBackend<F> {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            match (self.0)(request) {
                Some(text) => Ok(ChatResponse {
                    text,
                    backend: BackendKind::Mock,
                    latency_ms: 0,
                    attempt: 1,
                }),
                None => Err(GatewayError::FixtureMissing {
                    key: crate::gateway::fixture_key(request),
                    path: String::new(),
                }),
            }
        }
    }

    fn standard(category: &str, morphology: &str, sub_classes: &[&str]) -> InterpretationStandard {
        InterpretationStandard {
            category: category.into(),
            morphology: morphology.into(),
            spectral_spatial: "reflectance".into(),
            exclusivity: "distinct".into(),
            sub_classes: sub_classes.iter().map(|s| s.to_string()).collect(),
            source: StandardSource::Manual,
        }
    }

    fn store() -> StandardsStore {
        let pool = CategoryPool::loveda();
        let standards = vec![
            standard("agricultural", "regular field parcels", &["greenhouses", "plastic mulch", "paddy"]),
            standard("background", "unclassified cover", &[]),
            standard("barren", "bare soil with messy texture", &["bare land"]),
            standard("building", "rectangular roofs and translucent structures", &["houses", "factories"]),
            standard("forest", "dense tree canopy", &["woodland"]),
            standard("road", "long narrow paved lines", &["highway"]),
            standard("water", "water body with smooth dark surface", &["lake", "river"]),
        ];
        let rules = vec![DiscriminationRule {
            category_a: "agricultural".into(),
            category_b: "building".into(),
            rule: "steel-framed greenhouses and plastic mulch belong to agricultural land".into(),
            decides_for: "agricultural".into(),
            cue: "regular geometric shapes".into(),
        }];
        StandardsStore::new(pool, standards, rules, chrono::Utc.timestamp_opt(0, 0).unwrap()).unwrap()
    }

    fn scene(label: &str) -> SceneContext {
        SceneContext::new(label, 0.9, "r").unwrap()
    }

    fn attrs(descs: &[&str]) -> VisualAttributeSet {
        VisualAttributeSet {
            attributes: descs
                .iter()
                .map(|d| VisualAttribute::new(*d, AttributeKind::Object).unwrap())
                .collect(),
            scene: scene("rural"),
        }
    }

    #[test]
    fn tokens_fold_plurals_and_drop_stop_words() {
        let t = keyword_tokens("The Greenhouses, and rows of bodies; grass");
        let expected: BTreeSet<String> = ["greenhouse", "row", "body", "grass"].iter().map(|s| s.to_string()).collect();
        assert_eq!(t, expected);
    }

    #[test]
    fn fallback_direct_overlap() {
        let v = rule_fallback_verify(
            "water",
            &scene("rural"),
            &attrs(&["large water body with smooth dark surface"]),
            &store(),
        )
        .unwrap();
        assert!(v.present);
        assert_eq!(v.decided_by, DecidedBy::RuleEngine);
        let v = rule_fallback_verify("road", &scene("rural"), &attrs(&["large water body"]), &store()).unwrap();
        assert!(!v.present);
    }

    #[test]
    fn fallback_rule_blocks_the_losing_category() {
        // Hand enumeration: "translucent greenhouse rows" -> {translucent, greenhouse, row}.
        // agricultural standard tokens include "greenhouse" (sub-class "greenhouses").
        // building standard tokens include "translucent"; the rule's trigger
        // tokens include "greenhouse", and the rule decides against building.
        let a = attrs(&["translucent greenhouse rows"]);
        let s = store();
        let building = rule_fallback_verify("building", &scene("rural"), &a, &s).unwrap();
        let agri = rule_fallback_verify("agricultural", &scene("rural"), &a, &s).unwrap();
        assert!(!building.present, "{}", building.justification);
        assert!(building.justification.contains("assigns it to agricultural"));
        assert!(agri.present);
    }

    #[test]
    fn fallback_missing_standard() {
        assert!(matches!(
            rule_fallback_verify("lava", &scene("rural"), &attrs(&["x"]), &store()),
            Err(ReasonError::MissingStandard(_))
        ));
    }

    fn image() -> ImageRef {
        ImageRef::from_bytes("tile.png", vec![1, 2, 3, 4], "image/png")
    }

    fn chain_backend(request: &ChatRequest) -> Option<String> {
        let v = match request.response_schema_id.as_str() {
            ANCHOR_SCHEMA_ID => json!({"scene": "Rural", "confidence": 1.3, "rationale": "fields"}),
            DECOUPLE_SCHEMA_ID => json!({"attributes": [
                {"description": "translucent greenhouse rows", "kind": "geometric"},
                {"description": "winding river", "kind": "shimmer"}
            ]}),
            VERIFY_SCHEMA_ID => json!({"verdicts": [
                {"category": "agricultural", "present": true, "justification": "greenhouses in a rural scene"},
                {"category": "building", "present": false, "justification": "greenhouses are farmland"},
                {"category": "lava", "present": true, "justification": "?"}
            ]}),
            _ => return None,
        };
        Some(v.to_string())
    }

    #[test]
    fn chain_records_every_stage() {
        let trace = run_chain(&image(), &store(), &FnBackend(chain_backend), &ReasonConfig::default()).unwrap();
        assert_eq!(trace.scene.label, "rural");
        assert_eq!(trace.scene.confidence, 1.0);
        assert_eq!(trace.attributes.attributes[0].kind, AttributeKind::Geometry);
        assert_eq!(trace.attributes.attributes[1].kind, AttributeKind::Object);
        let keys: Vec<&str> = trace.raw_responses.keys().map(String::as_str).collect();
        assert_eq!(keys, ["anchor", "decouple", "synthesize"]);
        let prompt = &trace.prompts["synthesize"];
        assert!(prompt.contains("rural") && prompt.contains("translucent greenhouse rows") && prompt.contains("winding river"));
        // water decided by the rule engine via "river"; lava dropped.
        assert_eq!(trace.vocabulary.selected(), ["agricultural", "water"]);
        assert!(trace.warnings.iter().any(|w| w.contains("clamped")));
        assert!(trace.warnings.iter().any(|w| w.contains("lava")));
        assert!(trace.warnings.iter().any(|w| w.contains("shimmer")));
        let again = run_chain(&image(), &store(), &FnBackend(chain_backend), &ReasonConfig::default()).unwrap();
        assert_eq!(trace.to_json(), again.to_json());
    }

    #[test]
    fn all_absent_falls_back_to_full_pool() {
        let backend = FnBackend(|r: &ChatRequest| {
            if r.response_schema_id == VERIFY_SCHEMA_ID {
                let verdicts: Vec<_> = CategoryPool::loveda()
                    .names()
                    .map(|n| json!({"category": n, "present": false, "justification": "no"}))
                    .collect();
                Some(json!({ "verdicts": verdicts }).to_string())
            } else {
                chain_backend(r)
            }
        });
        let trace = run_chain(&image(), &store(), &backend, &ReasonConfig::default()).unwrap();
        assert!(trace.vocabulary.fallback_used());
        assert_eq!(trace.vocabulary.selected().len(), 7);
    }

    #[test]
    fn missing_stage_response_names_the_stage() {
        let backend = FnBackend(|r: &ChatRequest| {
            if r.response_schema_id == DECOUPLE_SCHEMA_ID {
                None
            } else {
                chain_backend(r)
            }
        });
        let err = run_chain(&image(), &store(), &backend, &ReasonConfig::default()).unwrap_err();
        assert_eq!(err.stage(), Some(ReasonStage::Decouple));
        assert!(err.to_string().starts_with("decouple stage"));
    }

    #[test]
    fn empty_attribute_list_twice() {
        let backend = FnBackend(|r: &ChatRequest| {
            if r.response_schema_id == DECOUPLE_SCHEMA_ID {
                Some(r#"{"attributes": []}"#.into())
            } else {
                chain_backend(r)
            }
        });
        let err = decouple_attributes(&image(), &scene("rural"), &backend, &ReasonConfig::default()).unwrap_err();
        assert!(matches!(err, ReasonError::EmptyAttributeSet));
    }

    #[test]
    fn image_without_payload_is_rejected() {
        let mut img = image();
        img.bytes = None;
        assert!(matches!(
            anchor_scene(&img, &FnBackend(chain_backend), &ReasonConfig::default()),
            Err(ReasonError::MissingImagePayload(_))
        ));
    }

    #[test]
    fn trace_json_roundtrip_omits_timings() {
        let trace = run_chain(&image(), &store(), &FnBackend(chain_backend), &ReasonConfig::default()).unwrap();
        let json = trace.to_json();
        assert!(!json.contains("stage_timings_ms"));
        let back: ReasoningTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.vocabulary, trace.vocabulary);
        assert_eq!(back.raw_responses, trace.raw_responses);
        assert_eq!(trace.file_name(), format!("{}.trace.json", image().content_hash));
    }

    proptest! {
        #[test]
        fn fallback_is_pure(
            descs in prop::collection::vec("[a-z ]{1,30}", 1..5),
            morph in "[a-z ]{1,40}",
        ) {
            let pool = CategoryPool::from_names(None, ["a", "b"]).unwrap();
            let store = StandardsStore::new(
                pool,
                vec![standard("a", &format!("x {morph}"), &[]), standard("b", "y", &[])],
                vec![],
                chrono::Utc.timestamp_opt(0, 0).unwrap(),
            ).unwrap();
            let descs: Vec<String> = descs.into_iter().map(|d| format!("d {d}")).collect();
            let refs: Vec<&str> = descs.iter().map(String::as_str).collect();
            let a = attrs(&refs);
            let first = rule_fallback_verify("a", &scene("urban"), &a, &store).unwrap();
            let second = rule_fallback_verify("a", &scene("urban"), &a, &store).unwrap();
            prop_assert_eq!(&first, &second);
            let expected = descs.iter().any(|d| !keyword_tokens(d).is_disjoint(&keyword_tokens(&format!("x {morph} reflectance"))));
            prop_assert_eq!(first.present, expected);
        }
    }
}
