//! Offline distillation of per-category interpretation standards.
//!
//! Four model stages: category enhancement, ambiguous-pair proposal,
//! pairwise discrimination and standard synthesis. Per-category and per-pair
//! calls run on the rayon pool; synthesis starts only after every
//! discrimination result is in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::model::{
    normalize_name, Category, CategoryPool, DiscriminationRule, InterpretationStandard, ModelError,
    StandardSource, StandardsStore,
};
use crate::prompts::{PromptError, PromptKind, PromptTemplates};
use crate::structured::{ask_structured, optional_str, required_str, string_list, AskError, StageOutput};

pub const ENHANCE_SCHEMA_ID: &str = "enhance";
pub const PAIRS_SCHEMA_ID: &str = "propose_pairs";
pub const DISCRIMINATE_SCHEMA_ID: &str = "discriminate";
pub const SYNTHESIZE_STANDARD_SCHEMA_ID: &str = "synthesize_standard";

const ENHANCE_SCHEMA: &str =
    r#"{"geometry": string, "boundaries": string, "sub_classes": [string], "spectra": string}"#;
const PAIRS_SCHEMA: &str = r#"{"pairs": [[string, string]]}"#;
const DISCRIMINATE_SCHEMA: &str = r#"{"rule": string, "decides_for": string, "cue": string}"#;
const SYNTHESIZE_SCHEMA: &str =
    r#"{"morphology": string, "spectral_spatial": string, "exclusivity": string, "sub_classes": [string]}"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistillStage {
    Enhance,
    Pairs,
    Discriminate,
    Synthesize,
}

impl fmt::Display for DistillStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Enhance => "enhance",
            Self::Pairs => "pairs",
            Self::Discriminate => "discriminate",
            Self::Synthesize => "synthesize",
        })
    }
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("{stage} stage failed for {subject}: {source}")]
    Gateway {
        stage: DistillStage,
        subject: String,
        #[source]
        source: GatewayError,
    },
    #[error("enhance stage failed for {category}: malformed enhancement: {reason}")]
    MalformedEnhancement { category: String, reason: String },
    #[error("pairs stage failed: malformed pair proposal: {reason}")]
    MalformedPairs { reason: String },
    #[error("discriminate stage failed for pair ({a}, {b}): malformed rule: {reason}")]
    MalformedRule { a: String, b: String, reason: String },
    #[error("synthesize stage failed for {category}: malformed standard: {reason}")]
    MalformedStandard { category: String, reason: String },
    #[error("{stage} stage precondition violated: {message}")]
    Precondition { stage: DistillStage, message: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("assembling the standards store: {0}")]
    Store(#[from] ModelError),
}

impl DistillError {
    pub fn stage(&self) -> Option<DistillStage> {
        match self {
            Self::Gateway { stage, .. } | Self::Precondition { stage, .. } => Some(*stage),
            Self::MalformedEnhancement { .. } => Some(DistillStage::Enhance),
            Self::MalformedPairs { .. } => Some(DistillStage::Pairs),
            Self::MalformedRule { .. } => Some(DistillStage::Discriminate),
            Self::MalformedStandard { .. } => Some(DistillStage::Synthesize),
            Self::Prompt(_) | Self::Store(_) => None,
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
pub struct DistillConfig {
    pub prompts: PromptTemplates,
    /// Explicit ambiguous pairs; when set, no pair-proposal call is made.
    pub override_pairs: Option<Vec<(String, String)>>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Recorded on every synthesized standard.
    pub source: StandardSource,
    /// Store timestamp; the current time when unset.
    pub created_at: Option<DateTime<Utc>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            prompts: PromptTemplates::builtin(),
            override_pairs: None,
            temperature: 0.0,
            max_tokens: 1024,
            source: StandardSource::Mllm,
            created_at: None,
        }
    }
}

impl DistillConfig {
    fn request(&self, schema_id: &str, user_text: String) -> ChatRequest {
        ChatRequest::new(schema_id, self.prompts.get(PromptKind::System))
            .text(user_text)
            .temperature(self.temperature)
            .max_tokens(self.max_tokens)
    }
}

/// Priors fed into standard synthesis.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistillContext {
    enhanced_descriptions: BTreeMap<String, String>,
    discrimination_rules: Vec<DiscriminationRule>,
    ambiguous_pairs: Vec<(String, String)>,
}

impl DistillContext {
    /// Fails when a rule's pair is not among `ambiguous_pairs` (in either order).
    pub fn new(
        enhanced_descriptions: BTreeMap<String, String>,
        discrimination_rules: Vec<DiscriminationRule>,
        ambiguous_pairs: Vec<(String, String)>,
    ) -> Result<Self, DistillError> {
        for r in &discrimination_rules {
            let listed = ambiguous_pairs.iter().any(|(a, b)| {
                (a == &r.category_a && b == &r.category_b) || (a == &r.category_b && b == &r.category_a)
            });
            if !listed {
                return Err(DistillError::Precondition {
                    stage: DistillStage::Synthesize,
                    message: format!(
                        "rule for ({}, {}) has no matching ambiguous pair",
                        r.category_a, r.category_b
                    ),
                });
            }
        }
        Ok(Self {
            enhanced_descriptions,
            discrimination_rules,
            ambiguous_pairs,
        })
    }

    pub fn enhanced_descriptions(&self) -> &BTreeMap<String, String> {
        &self.enhanced_descriptions
    }

    pub fn discrimination_rules(&self) -> &[DiscriminationRule] {
        &self.discrimination_rules
    }

    pub fn ambiguous_pairs(&self) -> &[(String, String)] {
        &self.ambiguous_pairs
    }

    pub fn rules_involving<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a DiscriminationRule> {
        self.discrimination_rules.iter().filter(move |r| r.involves(name))
    }
}

fn pool_list(pool: &CategoryPool) -> String {
    pool.names().collect::<Vec<_>>().join(", ")
}

fn gateway_err(stage: DistillStage, subject: String) -> impl FnOnce(GatewayError) -> DistillError {
    move |source| DistillError::Gateway {
        stage,
        subject,
        source,
    }
}

// ---- enhancement ----

pub fn enhance_request(category: &Category, config: &DistillConfig) -> Result<ChatRequest, DistillError> {
    let text = config.prompts.render(
        PromptKind::Enhance,
        &[("category", &category.name), ("display", &category.display)],
    )?;
    Ok(config.request(ENHANCE_SCHEMA_ID, text))
}

fn parse_enhancement(v: &Value, _: &mut Vec<String>) -> Result<String, String> {
    let geometry = required_str(v, "geometry")?;
    let boundaries = required_str(v, "boundaries")?;
    let spectra = required_str(v, "spectra")?;
    if v.get("sub_classes").is_none() {
        return Err("missing field \"sub_classes\"".into());
    }
    let sub_classes = string_list(v, "sub_classes")?;
    Ok(format!(
        "Geometry: {geometry}\nBoundaries: {boundaries}\nSub-classes: {}\nSpectra: {spectra}",
        if sub_classes.is_empty() {
            "none listed".to_string()
        } else {
            sub_classes.join(", ")
        }
    ))
}

/// Asks the model for geometry, boundaries, sub-classes and spectra of one
/// category and renders them as a description block.
pub fn enhance_category(
    category: &Category,
    gateway: &dyn ChatBackend,
    config: &DistillConfig,
) -> Result<StageOutput<String>, DistillError> {
    let request = enhance_request(category, config)?;
    ask_structured(gateway, request, ENHANCE_SCHEMA, parse_enhancement).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(DistillStage::Enhance, category.name.clone())(source),
        AskError::Malformed(reason) => DistillError::MalformedEnhancement {
            category: category.name.clone(),
            reason,
        },
    })
}

// ---- pair proposal ----

pub fn pairs_request(pool: &CategoryPool, config: &DistillConfig) -> Result<ChatRequest, DistillError> {
    let text = config.prompts.render(PromptKind::Pairs, &[("pool", &pool_list(pool))])?;
    Ok(config.request(PAIRS_SCHEMA_ID, text))
}

/// Orders a pair by pool index. `None` when either name is outside the pool
/// or both names are the same.
fn canonical_pair(pool: &CategoryPool, a: &str, b: &str) -> Option<(String, String)> {
    let (a, b) = (normalize_name(a), normalize_name(b));
    let (ia, ib) = (pool.index_of(&a)?, pool.index_of(&b)?);
    match ia.cmp(&ib) {
        std::cmp::Ordering::Less => Some((a, b)),
        std::cmp::Ordering::Greater => Some((b, a)),
        std::cmp::Ordering::Equal => None,
    }
}

fn pair_item(item: &Value) -> Option<(String, String)> {
    match item {
        Value::Array(v) if v.len() == 2 => Some((v[0].as_str()?.to_string(), v[1].as_str()?.to_string())),
        Value::Object(_) => {
            let a = item.get("category_a").or_else(|| item.get("a"))?.as_str()?;
            let b = item.get("category_b").or_else(|| item.get("b"))?.as_str()?;
            Some((a.to_string(), b.to_string()))
        }
        _ => None,
    }
}

fn parse_pairs(pool: &CategoryPool, v: &Value, warnings: &mut Vec<String>) -> Result<Vec<(String, String)>, String> {
    let items = match v {
        Value::Array(items) => items,
        _ => v
            .get("pairs")
            .and_then(Value::as_array)
            .ok_or("missing list field \"pairs\"")?,
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in items {
        let Some((a, b)) = pair_item(item) else {
            warnings.push(format!("dropped unreadable pair entry {item}"));
            continue;
        };
        match canonical_pair(pool, &a, &b) {
            Some(pair) => {
                if seen.insert(pair.clone()) {
                    out.push(pair);
                }
            }
            None => warnings.push(format!("dropped pair ({a}, {b}): not two distinct pool categories")),
        }
    }
    Ok(out)
}

/// Unordered unique pairs of easily confused categories, each ordered by
/// pool index. Model pairs outside the pool are dropped with a warning. An
/// override list in `config` bypasses the model entirely.
pub fn propose_ambiguous_pairs(
    pool: &CategoryPool,
    gateway: &dyn ChatBackend,
    config: &DistillConfig,
) -> Result<StageOutput<Vec<(String, String)>>, DistillError> {
    if pool.len() < 2 {
        return Err(DistillError::Precondition {
            stage: DistillStage::Pairs,
            message: format!("pair proposal needs at least 2 categories, pool has {}", pool.len()),
        });
    }
    if let Some(pairs) = &config.override_pairs {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (a, b) in pairs {
            let pair = canonical_pair(pool, a, b).ok_or_else(|| DistillError::Precondition {
                stage: DistillStage::Pairs,
                message: format!("override pair ({a}, {b}) is not two distinct pool categories"),
            })?;
            if seen.insert(pair.clone()) {
                out.push(pair);
            }
        }
        return Ok(StageOutput {
            value: out,
            prompt: String::new(),
            raw_response: String::new(),
            warnings: Vec::new(),
            reprompted: false,
        });
    }
    let request = pairs_request(pool, config)?;
    ask_structured(gateway, request, PAIRS_SCHEMA, |v, w| parse_pairs(pool, v, w)).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(DistillStage::Pairs, "the category pool".into())(source),
        AskError::Malformed(reason) => DistillError::MalformedPairs { reason },
    })
}

// ---- discrimination ----

fn description<'a>(
    enhanced: &'a BTreeMap<String, String>,
    name: &str,
    stage: DistillStage,
) -> Result<&'a str, DistillError> {
    match enhanced.get(name).map(|s| s.trim()) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(DistillError::Precondition {
            stage,
            message: format!("no enhanced description for {name}"),
        }),
    }
}

pub fn discriminate_request(
    pair: (&str, &str),
    enhanced: &BTreeMap<String, String>,
    config: &DistillConfig,
) -> Result<ChatRequest, DistillError> {
    let (a, b) = pair;
    let da = description(enhanced, a, DistillStage::Discriminate)?;
    let db = description(enhanced, b, DistillStage::Discriminate)?;
    let text = config.prompts.render(
        PromptKind::Discriminate,
        &[("category_a", a), ("category_b", b), ("description_a", da), ("description_b", db)],
    )?;
    Ok(config.request(DISCRIMINATE_SCHEMA_ID, text))
}

fn parse_rule(a: &str, b: &str, v: &Value) -> Result<DiscriminationRule, String> {
    let rule = required_str(v, "rule")?;
    let decides_for = normalize_name(required_str(v, "decides_for")?);
    if decides_for != a && decides_for != b {
        return Err(format!("decides_for {decides_for:?} is neither {a:?} nor {b:?}"));
    }
    Ok(DiscriminationRule {
        category_a: a.to_string(),
        category_b: b.to_string(),
        rule: rule.to_string(),
        decides_for,
        cue: optional_str(v, "cue")?.to_string(),
    })
}

/// One rule deciding between the two categories of `pair`.
pub fn discriminate_pair(
    pair: (&str, &str),
    enhanced: &BTreeMap<String, String>,
    gateway: &dyn ChatBackend,
    config: &DistillConfig,
) -> Result<StageOutput<DiscriminationRule>, DistillError> {
    let (a, b) = pair;
    let request = discriminate_request(pair, enhanced, config)?;
    ask_structured(gateway, request, DISCRIMINATE_SCHEMA, |v, _| parse_rule(a, b, v)).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(DistillStage::Discriminate, format!("pair ({a}, {b})"))(source),
        AskError::Malformed(reason) => DistillError::MalformedRule {
            a: a.to_string(),
            b: b.to_string(),
            reason,
        },
    })
}

// ---- synthesis ----

fn render_rules<'a>(rules: impl Iterator<Item = &'a DiscriminationRule>) -> String {
    let lines: Vec<String> = rules
        .map(|r| {
            let cue = if r.cue.is_empty() {
                String::new()
            } else {
                format!("; cue: {}", r.cue)
            };
            format!(
                "- {} vs {}: {} (decides for {}{cue})",
                r.category_a, r.category_b, r.rule, r.decides_for
            )
        })
        .collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

pub fn synthesize_request(
    category: &Category,
    context: &DistillContext,
    config: &DistillConfig,
) -> Result<ChatRequest, DistillError> {
    let desc = description(&context.enhanced_descriptions, &category.name, DistillStage::Synthesize)?;
    let rules = render_rules(context.rules_involving(&category.name));
    let text = config.prompts.render(
        PromptKind::SynthesizeStandard,
        &[("category", &category.name), ("description", desc), ("rules", &rules)],
    )?;
    Ok(config.request(SYNTHESIZE_STANDARD_SCHEMA_ID, text))
}

/// One sentence per rule, stating which category the contested structures
/// belong to.
fn rule_summary(category: &str, rule: &DiscriminationRule) -> String {
    let other = if rule.category_a == category {
        &rule.category_b
    } else {
        &rule.category_a
    };
    let (winner, loser) = if rule.decides_for == category {
        (category, other.as_str())
    } else {
        (other.as_str(), category)
    };
    let subject = if rule.cue.trim().is_empty() {
        format!("Structures contested between {category} and {other}")
    } else {
        format!("Structures showing {}", rule.cue.trim())
    };
    format!("{subject} belong to {winner}, not {loser}: {}", rule.rule.trim())
}

fn compose_exclusivity(category: &str, model_text: &str, context: &DistillContext) -> String {
    let mut parts: Vec<String> = Vec::new();
    if !model_text.is_empty() {
        parts.push(model_text.to_string());
    }
    parts.extend(context.rules_involving(category).map(|r| rule_summary(category, r)));
    if parts.is_empty() {
        let others: Vec<&str> = context
            .enhanced_descriptions
            .keys()
            .map(String::as_str)
            .filter(|n| *n != category)
            .collect();
        if others.is_empty() {
            return format!("{category} is the only category in the pool.");
        }
        return format!(
            "{category} is kept apart from {} by the morphology and spectral-spatial attributes above.",
            others.join(", ")
        );
    }
    parts
        .iter()
        .map(|p| {
            let p = p.trim();
            if p.ends_with(['.', '!', '?']) {
                p.to_string()
            } else {
                format!("{p}.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Interpretation standard for one category. Every discrimination rule in
/// `context` that touches the category is summarized into its exclusivity.
pub fn synthesize_standard(
    category: &Category,
    context: &DistillContext,
    gateway: &dyn ChatBackend,
    config: &DistillConfig,
) -> Result<StageOutput<InterpretationStandard>, DistillError> {
    let request = synthesize_request(category, context, config)?;
    let name = category.name.as_str();
    let parse = |v: &Value, _: &mut Vec<String>| -> Result<InterpretationStandard, String> {
        let morphology = required_str(v, "morphology")?;
        let spectral_spatial = required_str(v, "spectral_spatial")?;
        let exclusivity = compose_exclusivity(name, optional_str(v, "exclusivity")?, context);
        Ok(InterpretationStandard {
            category: name.to_string(),
            morphology: morphology.to_string(),
            spectral_spatial: spectral_spatial.to_string(),
            exclusivity,
            sub_classes: string_list(v, "sub_classes")?,
            source: config.source,
        })
    };
    ask_structured(gateway, request, SYNTHESIZE_SCHEMA, parse).map_err(|e| match e {
        AskError::Gateway(source) => gateway_err(DistillStage::Synthesize, name.to_string())(source),
        AskError::Malformed(reason) => DistillError::MalformedStandard {
            category: name.to_string(),
            reason,
        },
    })
}

// ---- orchestration ----

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub store: StandardsStore,
    pub context: DistillContext,
    pub warnings: Vec<String>,
    /// Model calls that needed the repair re-prompt.
    pub reprompts: usize,
    /// Whether pairs came from an override list.
    pub pairs_overridden: bool,
}

/// Runs the whole offline stream. Work inside a stage is parallel; results
/// are gathered in pool (or pair) order so the first error reported and the
/// resulting store are deterministic.
pub fn build_standards(
    pool: &CategoryPool,
    gateway: &dyn ChatBackend,
    config: &DistillConfig,
) -> Result<DistillOutcome, DistillError> {
    let violations = crate::model::validate_pool(pool);
    if !violations.is_empty() {
        return Err(ModelError::InvalidPool(violations).into());
    }
    let mut warnings = Vec::new();
    let mut reprompts = 0;
    let mut note = |stage: DistillStage, subject: &str, warns: Vec<String>, reprompted: bool| {
        reprompts += usize::from(reprompted);
        warnings.extend(warns.into_iter().map(|w| format!("{stage} {subject}: {w}")));
    };

    let enhanced: Vec<_> = pool
        .categories()
        .par_iter()
        .map(|c| enhance_category(c, gateway, config))
        .collect();
    let mut descriptions = BTreeMap::new();
    for (c, out) in pool.iter().zip(enhanced) {
        let out = out?;
        note(DistillStage::Enhance, &c.name, out.warnings, out.reprompted);
        descriptions.insert(c.name.clone(), out.value);
    }

    let pairs = if pool.len() < 2 {
        Vec::new()
    } else {
        let out = propose_ambiguous_pairs(pool, gateway, config)?;
        note(DistillStage::Pairs, "pool", out.warnings, out.reprompted);
        out.value
    };

    let discriminated: Vec<_> = pairs
        .par_iter()
        .map(|(a, b)| discriminate_pair((a, b), &descriptions, gateway, config))
        .collect();
    let mut rules = Vec::with_capacity(pairs.len());
    for ((a, b), out) in pairs.iter().zip(discriminated) {
        let out = out?;
        note(DistillStage::Discriminate, &format!("({a}, {b})"), out.warnings, out.reprompted);
        rules.push(out.value);
    }
    let context = DistillContext::new(descriptions, rules, pairs)?;

    let synthesized: Vec<_> = pool
        .categories()
        .par_iter()
        .map(|c| synthesize_standard(c, &context, gateway, config))
        .collect();
    let mut standards = Vec::with_capacity(pool.len());
    for (c, out) in pool.iter().zip(synthesized) {
        let out = out?;
        note(DistillStage::Synthesize, &c.name, out.warnings, out.reprompted);
        standards.push(out.value);
    }

    let store = StandardsStore::new(
        pool.clone(),
        standards,
        context.discrimination_rules.clone(),
        config.created_at.unwrap_or_else(Utc::now),
    )?;
    Ok(DistillOutcome {
        store,
        context,
        warnings,
        reprompts,
        pairs_overridden: config.override_pairs.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendKind, ChatResponse};
    use serde_json::json;

    /// Answers by schema id and the category names appearing in the prompt.
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

    fn quoted_category(request: &ChatRequest) -> String {
        let text = request.user_text();
        let start = text.find('"').unwrap() + 1;
        let end = start + text[start..].find('"').unwrap();
        text[start..end].to_string()
    }

    fn happy(request: &ChatRequest) -> Option<String> {
        let reply = match request.response_schema_id.as_str() {
            ENHANCE_SCHEMA_ID => json!({
                "geometry": format!("{} shapes", quoted_category(request)),
                "boundaries": "sharp",
                "sub_classes": ["greenhouses", "paddies"],
                "spectra": "green",
            }),
            PAIRS_SCHEMA_ID => json!({"pairs": [["building", "agricultural"], ["water", "lava"], ["agricultural", "building"]]}),
            DISCRIMINATE_SCHEMA_ID => json!({
                "rule": "steel-framed greenhouses and plastic mulch are agricultural",
                "decides_for": "agricultural",
                "cue": "regular geometric shapes",
            }),
            SYNTHESIZE_STANDARD_SCHEMA_ID => json!({
                "morphology": "m",
                "spectral_spatial": "s",
                "exclusivity": "",
                "sub_classes": ["x"],
            }),
            _ => return None,
        };
        Some(format!("Here it is:\n```json\n{reply}\n```"))
    }

    #[test]
    fn enhancement_renders_all_fields() {
        let pool = CategoryPool::loveda();
        let water = &pool.categories()[6];
        let out = enhance_category(water, &FnBackend(happy), &DistillConfig::default()).unwrap();
        assert!(out.value.contains("Geometry: water shapes"));
        assert!(out.value.contains("Sub-classes: greenhouses, paddies"));
        assert!(!out.reprompted);
    }

    #[test]
    fn enhancement_missing_geometry_twice_is_malformed() {
        let backend = FnBackend(|_: &ChatRequest| {
            Some(json!({"boundaries": "b", "sub_classes": [], "spectra": "s"}).to_string())
        });
        let pool = CategoryPool::loveda();
        let err = enhance_category(&pool.categories()[6], &backend, &DistillConfig::default()).unwrap_err();
        assert!(matches!(err, DistillError::MalformedEnhancement { ref category, .. } if category == "water"));
    }

    #[test]
    fn out_of_pool_pairs_are_dropped_with_warning() {
        let pool = CategoryPool::loveda();
        let out = propose_ambiguous_pairs(&pool, &FnBackend(happy), &DistillConfig::default()).unwrap();
        assert_eq!(out.value, vec![("agricultural".to_string(), "building".to_string())]);
        assert!(out.warnings.iter().any(|w| w.contains("(water, lava)")));
    }

    #[test]
    fn single_category_pool_rejects_pair_proposal() {
        let pool = CategoryPool::from_names(None, ["water"]).unwrap();
        assert!(matches!(
            propose_ambiguous_pairs(&pool, &FnBackend(happy), &DistillConfig::default()),
            Err(DistillError::Precondition { stage: DistillStage::Pairs, .. })
        ));
    }

    #[test]
    fn override_pairs_bypass_the_model() {
        let pool = CategoryPool::loveda();
        let config = DistillConfig {
            override_pairs: Some(vec![("barren".into(), "agricultural".into())]),
            ..DistillConfig::default()
        };
        let never = FnBackend(|_: &ChatRequest| -> Option<String> { panic!("model called") });
        let out = propose_ambiguous_pairs(&pool, &never, &config).unwrap();
        assert_eq!(out.value, vec![("agricultural".to_string(), "barren".to_string())]);
    }

    #[test]
    fn decides_for_outside_pair_is_malformed() {
        let backend = FnBackend(|_: &ChatRequest| {
            Some(json!({"rule": "r", "decides_for": "road", "cue": "c"}).to_string())
        });
        let enhanced: BTreeMap<_, _> = [("water".to_string(), "w".to_string()), ("forest".to_string(), "f".to_string())]
            .into_iter()
            .collect();
        let err = discriminate_pair(("water", "forest"), &enhanced, &backend, &DistillConfig::default()).unwrap_err();
        assert!(matches!(err, DistillError::MalformedRule { .. }));
        assert!(err.to_string().contains("(water, forest)"));
    }

    fn context_with_rule() -> DistillContext {
        let enhanced = CategoryPool::loveda().names().map(|n| (n.to_string(), format!("{n} text"))).collect();
        let rule = DiscriminationRule {
            category_a: "agricultural".into(),
            category_b: "building".into(),
            rule: "greenhouses are farmland".into(),
            decides_for: "agricultural".into(),
            cue: "regular geometric shapes".into(),
        };
        DistillContext::new(enhanced, vec![rule], vec![("agricultural".into(), "building".into())]).unwrap()
    }

    #[test]
    fn synthesized_exclusivity_summarizes_rules() {
        let pool = CategoryPool::loveda();
        let ctx = context_with_rule();
        let agri = synthesize_standard(&pool.categories()[0], &ctx, &FnBackend(happy), &DistillConfig::default())
            .unwrap()
            .value;
        assert!(agri.exclusivity.contains("not building"), "{}", agri.exclusivity);
        let water = synthesize_standard(&pool.categories()[6], &ctx, &FnBackend(happy), &DistillConfig::default())
            .unwrap()
            .value;
        assert!(!water.exclusivity.trim().is_empty());
        assert!(water.exclusivity.contains("kept apart from"));
    }

    #[test]
    fn synthesis_requires_description() {
        let pool = CategoryPool::loveda();
        let mut enhanced: BTreeMap<String, String> = BTreeMap::new();
        enhanced.insert("water".into(), "  ".into());
        let ctx = DistillContext::new(enhanced, vec![], vec![]).unwrap();
        assert!(matches!(
            synthesize_standard(&pool.categories()[6], &ctx, &FnBackend(happy), &DistillConfig::default()),
            Err(DistillError::Precondition { stage: DistillStage::Synthesize, .. })
        ));
    }

    #[test]
    fn context_rejects_rule_without_pair() {
        let rule = DiscriminationRule {
            category_a: "a".into(),
            category_b: "b".into(),
            rule: "r".into(),
            decides_for: "a".into(),
            cue: String::new(),
        };
        assert!(DistillContext::new(BTreeMap::new(), vec![rule], vec![]).is_err());
    }

    #[test]
    fn build_is_complete_and_deterministic() {
        let pool = CategoryPool::loveda();
        let config = DistillConfig::default();
        let a = build_standards(&pool, &FnBackend(happy), &config).unwrap();
        let b = build_standards(&pool, &FnBackend(happy), &config).unwrap();
        assert_eq!(a.store.standards().len(), 7);
        assert_eq!(a.store.rules().len(), 1);
        assert!(a.store.same_content(&b.store));
        assert!(a.warnings.iter().any(|w| w.contains("lava")));
    }

    #[test]
    fn missing_discrimination_names_the_pair() {
        let backend = FnBackend(|r: &ChatRequest| {
            if r.response_schema_id == DISCRIMINATE_SCHEMA_ID {
                None
            } else {
                happy(r)
            }
        });
        let err = build_standards(&CategoryPool::loveda(), &backend, &DistillConfig::default()).unwrap_err();
        assert_eq!(err.stage(), Some(DistillStage::Discriminate));
        assert!(err.to_string().contains("pair (agricultural, building)"), "{err}");
    }
}
