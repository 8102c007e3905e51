//! Domain types shared by the offline and online streams, plus embedding-space
//! utilities.
//!
//! Category names are the join key everywhere (files, prompts, verdicts);
//! indices are derived from position in a [`CategoryPool`] and never stored
//! in standards files.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

/// Label value marking pixels excluded from evaluation.
pub const IGNORE_LABEL: u16 = 65535;

/// Current on-disk version of the standards store.
pub const STANDARDS_SCHEMA_VERSION: u32 = 1;

/// Suggested macro-scenario labels. The set is open; models may return others.
pub const SEED_SCENE_LABELS: &[&str] =
    &["urban", "rural", "industrial", "forest", "water-dominated", "mixed"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid category pool: {}", join_violations(.0))]
    InvalidPool(Vec<PoolViolation>),
    #[error("row {0} has (near-)zero L2 norm and cannot be normalized")]
    ZeroVectorRow(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("label {value} at position {position} is out of range for a pool of {pool_size}")]
    LabelOutOfRange {
        value: u16,
        position: usize,
        pool_size: usize,
    },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("missing interpretation standard for {0:?}")]
    MissingStandard(String),
    #[error("duplicate interpretation standard for {0:?}")]
    DuplicateStandard(String),
    #[error("invalid standard for {category:?}: {reason}")]
    InvalidStandard { category: String, reason: String },
    #[error("invalid discrimination rule {a:?}/{b:?}: {reason}")]
    InvalidRule { a: String, b: String, reason: String },
    #[error("invalid scene context: {0}")]
    InvalidScene(String),
    #[error("invalid visual attribute: {0}")]
    InvalidAttribute(String),
    #[error("invalid verdicts: {0}")]
    InvalidVerdicts(String),
}

fn join_violations(v: &[PoolViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub display: String,
    pub index: usize,
}

/// One broken [`CategoryPool`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolViolation {
    EmptyPool,
    EmptyName { position: usize },
    DuplicateName { name: String, first: usize, second: usize },
    IndexMismatch { name: String, index: usize, position: usize },
    NotLowercase { name: String },
    TooManyCategories { count: usize },
}

impl fmt::Display for PoolViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyPool => write!(f, "pool has no categories"),
            Self::EmptyName { position } => write!(f, "category at position {position} has an empty name"),
            Self::DuplicateName { name, first, second } => {
                write!(f, "category {name:?} appears at positions {first} and {second}")
            }
            Self::IndexMismatch { name, index, position } => {
                write!(f, "category {name:?} has index {index} but sits at position {position}")
            }
            Self::NotLowercase { name } => write!(f, "category {name:?} is not lowercase"),
            Self::TooManyCategories { count } => {
                write!(f, "{count} categories collide with the ignore sentinel")
            }
        }
    }
}

/// Ordered global category set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PoolDocument", into = "PoolDocument")]
pub struct CategoryPool {
    dataset_tag: Option<String>,
    categories: Vec<Category>,
}

/// Wire form of a pool: index is implied by position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_tag: Option<String>,
    pub categories: Vec<PoolEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub name: String,
    #[serde(default)]
    pub display: Option<String>,
}

impl TryFrom<PoolDocument> for CategoryPool {
    type Error = ModelError;

    fn try_from(doc: PoolDocument) -> Result<Self, Self::Error> {
        let entries: Vec<(String, String)> = doc
            .categories
            .into_iter()
            .map(|e| {
                let display = e.display.unwrap_or_else(|| e.name.trim().to_string());
                (e.name, display)
            })
            .collect();
        CategoryPool::new(doc.dataset_tag, entries)
    }
}

impl From<CategoryPool> for PoolDocument {
    fn from(pool: CategoryPool) -> Self {
        PoolDocument {
            dataset_tag: pool.dataset_tag,
            categories: pool
                .categories
                .into_iter()
                .map(|c| PoolEntry {
                    name: c.name,
                    display: Some(c.display),
                })
                .collect(),
        }
    }
}

impl CategoryPool {
    /// Builds a pool without checking its invariants. Names are normalized to
    /// lowercase and indices assigned by position; use [`validate_pool`] or
    /// [`CategoryPool::new`] to reject duplicates and empty pools.
    pub fn from_entries_unchecked<N, D>(
        dataset_tag: Option<String>,
        entries: impl IntoIterator<Item = (N, D)>,
    ) -> Self
    where
        N: AsRef<str>,
        D: Into<String>,
    {
        let categories = entries
            .into_iter()
            .enumerate()
            .map(|(index, (name, display))| Category {
                name: normalize_name(name.as_ref()),
                display: display.into(),
                index,
            })
            .collect();
        Self {
            dataset_tag,
            categories,
        }
    }

    pub fn new<N, D>(
        dataset_tag: Option<String>,
        entries: impl IntoIterator<Item = (N, D)>,
    ) -> Result<Self, ModelError>
    where
        N: AsRef<str>,
        D: Into<String>,
    {
        let pool = Self::from_entries_unchecked(dataset_tag, entries);
        let violations = validate_pool(&pool);
        if violations.is_empty() {
            Ok(pool)
        } else {
            Err(ModelError::InvalidPool(violations))
        }
    }

    /// Pool of names only, display label equal to the name.
    pub fn from_names<S: AsRef<str>>(
        dataset_tag: Option<String>,
        names: impl IntoIterator<Item = S>,
    ) -> Result<Self, ModelError> {
        Self::new(
            dataset_tag,
            names.into_iter().map(|n| {
                let d = n.as_ref().to_string();
                (d.clone(), d)
            }),
        )
    }

    /// The seven LoveDA classes.
    pub fn loveda() -> Self {
        Self::new(
            Some("loveda".into()),
            [
                ("agricultural", "Agricultural"),
                ("background", "Background"),
                ("barren", "Barren"),
                ("building", "Building"),
                ("forest", "Forest"),
                ("road", "Road"),
                ("water", "Water"),
            ],
        )
        .expect("built-in pool is valid")
    }

    /// The six GID5 classes (five land-cover types plus background).
    pub fn gid5() -> Self {
        Self::new(
            Some("gid5".into()),
            [
                ("background", "Background"),
                ("built-up", "Built-up"),
                ("farmland", "Farmland"),
                ("forest", "Forest"),
                ("meadow", "Meadow"),
                ("water", "Water"),
            ],
        )
        .expect("built-in pool is valid")
    }

    /// Looks up a built-in pool by dataset tag.
    pub fn builtin(tag: &str) -> Option<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "loveda" => Some(Self::loveda()),
            "gid5" => Some(Self::gid5()),
            _ => None,
        }
    }

    pub fn dataset_tag(&self) -> Option<&str> {
        self.dataset_tag.as_deref()
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Category> {
        self.categories.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn get(&self, index: usize) -> Option<&Category> {
        self.categories.get(index)
    }

    /// Index of a category by (case-insensitive) name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = normalize_name(name);
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn require(&self, name: &str) -> Result<usize, ModelError> {
        self.index_of(name)
            .ok_or_else(|| ModelError::UnknownCategory(name.to_string()))
    }
}

impl<'a> IntoIterator for &'a CategoryPool {
    type Item = &'a Category;
    type IntoIter = std::slice::Iter<'a, Category>;

    fn into_iter(self) -> Self::IntoIter {
        self.categories.iter()
    }
}

/// Lists every broken pool invariant. An empty list means the pool is valid.
pub fn validate_pool(pool: &CategoryPool) -> Vec<PoolViolation> {
    let mut out = Vec::new();
    if pool.categories.is_empty() {
        out.push(PoolViolation::EmptyPool);
        return out;
    }
    if pool.categories.len() >= IGNORE_LABEL as usize {
        out.push(PoolViolation::TooManyCategories {
            count: pool.categories.len(),
        });
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (position, c) in pool.categories.iter().enumerate() {
        if c.name.is_empty() {
            out.push(PoolViolation::EmptyName { position });
            continue;
        }
        if c.name != c.name.to_lowercase() {
            out.push(PoolViolation::NotLowercase {
                name: c.name.clone(),
            });
        }
        if c.index != position {
            out.push(PoolViolation::IndexMismatch {
                name: c.name.clone(),
                index: c.index,
                position,
            });
        }
        if let Some(&first) = seen.get(c.name.as_str()) {
            out.push(PoolViolation::DuplicateName {
                name: c.name.clone(),
                first,
                second: position,
            });
        } else {
            seen.insert(&c.name, position);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardSource {
    Mllm,
    Fixture,
    Manual,
}

/// Multi-dimensional interpretation standard for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretationStandard {
    pub category: String,
    pub morphology: String,
    pub spectral_spatial: String,
    pub exclusivity: String,
    #[serde(default)]
    pub sub_classes: Vec<String>,
    pub source: StandardSource,
}

impl InterpretationStandard {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidStandard {
            category: self.category.clone(),
            reason: reason.to_string(),
        };
        if self.morphology.trim().is_empty() {
            return Err(bad("morphology is empty"));
        }
        if self.spectral_spatial.trim().is_empty() {
            return Err(bad("spectral_spatial is empty"));
        }
        if self.exclusivity.trim().is_empty() {
            return Err(bad("exclusivity is empty"));
        }
        Ok(())
    }
}

/// Pairwise criterion separating two easily confused categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminationRule {
    pub category_a: String,
    pub category_b: String,
    pub rule: String,
    pub decides_for: String,
    /// Short visual cue that triggers the rule.
    #[serde(default)]
    pub cue: String,
}

impl DiscriminationRule {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidRule {
            a: self.category_a.clone(),
            b: self.category_b.clone(),
            reason: reason.to_string(),
        };
        if self.category_a == self.category_b {
            return Err(bad("a rule needs two distinct categories"));
        }
        if self.decides_for != self.category_a && self.decides_for != self.category_b {
            return Err(bad("decides_for must name one of the pair"));
        }
        if self.rule.trim().is_empty() {
            return Err(bad("rule text is empty"));
        }
        Ok(())
    }

    pub fn involves(&self, name: &str) -> bool {
        self.category_a == name || self.category_b == name
    }

    /// The member of the pair this rule decides against.
    pub fn decides_against(&self) -> &str {
        if self.decides_for == self.category_a {
            &self.category_b
        } else {
            &self.category_a
        }
    }
}

/// The finalized set of interpretation standards for a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardsStore {
    pool: CategoryPool,
    // In pool index order.
    standards: Vec<InterpretationStandard>,
    rules: Vec<DiscriminationRule>,
    created_at: DateTime<Utc>,
    schema_version: u32,
}

impl StandardsStore {
    /// Checks that every pool category has exactly one standard and every rule
    /// references pool members, then orders standards by pool index.
    pub fn new(
        pool: CategoryPool,
        standards: Vec<InterpretationStandard>,
        rules: Vec<DiscriminationRule>,
        created_at: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let mut slots: Vec<Option<InterpretationStandard>> = vec![None; pool.len()];
        for mut s in standards {
            s.category = normalize_name(&s.category);
            let idx = pool.require(&s.category)?;
            s.validate()?;
            if slots[idx].is_some() {
                return Err(ModelError::DuplicateStandard(s.category));
            }
            slots[idx] = Some(s);
        }
        let standards = slots
            .into_iter()
            .zip(pool.iter())
            .map(|(s, c)| s.ok_or_else(|| ModelError::MissingStandard(c.name.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        for r in &rules {
            pool.require(&r.category_a)?;
            pool.require(&r.category_b)?;
            r.validate()?;
        }
        Ok(Self {
            pool,
            standards,
            rules,
            created_at,
            schema_version: STANDARDS_SCHEMA_VERSION,
        })
    }

    pub fn pool(&self) -> &CategoryPool {
        &self.pool
    }

    pub fn standards(&self) -> &[InterpretationStandard] {
        &self.standards
    }

    pub fn standard(&self, name: &str) -> Option<&InterpretationStandard> {
        self.pool.index_of(name).map(|i| &self.standards[i])
    }

    pub fn rules(&self) -> &[DiscriminationRule] {
        &self.rules
    }

    pub fn rules_involving<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a DiscriminationRule> {
        self.rules.iter().filter(move |r| r.involves(name))
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    /// Equality that ignores the creation timestamp.
    pub fn same_content(&self, other: &Self) -> bool {
        self.pool == other.pool
            && self.standards == other.standards
            && self.rules == other.rules
            && self.schema_version == other.schema_version
    }
}

/// Macro-scenario context of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    pub label: String,
    pub confidence: f64,
    pub rationale: String,
}

impl SceneContext {
    pub fn new(label: &str, confidence: f64, rationale: impl Into<String>) -> Result<Self, ModelError> {
        let label = normalize_name(label);
        if label.is_empty() {
            return Err(ModelError::InvalidScene("label is empty".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ModelError::InvalidScene(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            label,
            confidence,
            rationale: rationale.into(),
        })
    }

    pub fn is_seed_label(&self) -> bool {
        SEED_SCENE_LABELS.contains(&self.label.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Geometry,
    Texture,
    Spectral,
    Object,
}

impl AttributeKind {
    /// Maps a free-form kind onto the four-way enum; `None` for unknown kinds.
    pub fn parse(kind: &str) -> Option<Self> {
        match normalize_name(kind).as_str() {
            "geometry" | "geometric" | "shape" | "morphology" => Some(Self::Geometry),
            "texture" | "textural" => Some(Self::Texture),
            "spectral" | "spectrum" | "color" | "colour" | "reflectance" => Some(Self::Spectral),
            "object" | "objects" | "category" | "fine-grained" => Some(Self::Object),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualAttribute {
    pub description: String,
    pub kind: AttributeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_hint: Option<String>,
}

impl VisualAttribute {
    pub fn new(description: impl Into<String>, kind: AttributeKind) -> Result<Self, ModelError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(ModelError::InvalidAttribute("description is empty".into()));
        }
        Ok(Self {
            description,
            kind,
            region_hint: None,
        })
    }

    pub fn with_region_hint(mut self, hint: impl Into<String>) -> Self {
        self.region_hint = Some(hint.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualAttributeSet {
    pub attributes: Vec<VisualAttribute>,
    pub scene: SceneContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Mllm,
    RuleEngine,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVerdict {
    pub category: String,
    pub present: bool,
    pub justification: String,
    pub decided_by: DecidedBy,
}

/// Per-image subset of the pool that passed verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyDocument")]
pub struct AdaptiveVocabulary {
    verdicts: Vec<CategoryVerdict>,
    selected: Vec<String>,
    fallback_used: bool,
}

#[derive(Deserialize)]
struct VocabularyDocument {
    verdicts: Vec<CategoryVerdict>,
    selected: Vec<String>,
    fallback_used: bool,
}

impl TryFrom<VocabularyDocument> for AdaptiveVocabulary {
    type Error = ModelError;

    fn try_from(doc: VocabularyDocument) -> Result<Self, Self::Error> {
        let expected: Vec<String> = doc
            .verdicts
            .iter()
            .filter(|v| v.present)
            .map(|v| v.category.clone())
            .collect();
        if expected != doc.selected {
            return Err(ModelError::InvalidVerdicts(
                "selected does not match the present verdicts".into(),
            ));
        }
        if doc.selected.is_empty() {
            return Err(ModelError::InvalidVerdicts("empty vocabulary".into()));
        }
        Ok(Self {
            verdicts: doc.verdicts,
            selected: doc.selected,
            fallback_used: doc.fallback_used,
        })
    }
}

impl AdaptiveVocabulary {
    /// Orders verdicts by pool index and derives `selected`. Requires exactly
    /// one verdict per pool category and at least one present verdict.
    pub fn from_verdicts(
        pool: &CategoryPool,
        verdicts: Vec<CategoryVerdict>,
        fallback_used: bool,
    ) -> Result<Self, ModelError> {
        let mut slots: Vec<Option<CategoryVerdict>> = vec![None; pool.len()];
        for v in verdicts {
            let idx = pool.require(&v.category)?;
            if slots[idx].is_some() {
                return Err(ModelError::InvalidVerdicts(format!(
                    "duplicate verdict for {:?}",
                    v.category
                )));
            }
            if v.present && v.justification.trim().is_empty() {
                return Err(ModelError::InvalidVerdicts(format!(
                    "present verdict for {:?} has no justification",
                    v.category
                )));
            }
            slots[idx] = Some(v);
        }
        let verdicts = slots
            .into_iter()
            .zip(pool.iter())
            .map(|(v, c)| {
                v.ok_or_else(|| ModelError::InvalidVerdicts(format!("no verdict for {:?}", c.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let selected: Vec<String> = verdicts
            .iter()
            .filter(|v| v.present)
            .map(|v| v.category.clone())
            .collect();
        if selected.is_empty() {
            return Err(ModelError::InvalidVerdicts("empty vocabulary".into()));
        }
        Ok(Self {
            verdicts,
            selected,
            fallback_used,
        })
    }

    /// Every pool category selected, e.g. for the full-pool baseline.
    pub fn full_pool(pool: &CategoryPool, decided_by: DecidedBy, justification: &str) -> Self {
        let verdicts = pool
            .iter()
            .map(|c| CategoryVerdict {
                category: c.name.clone(),
                present: true,
                justification: justification.to_string(),
                decided_by,
            })
            .collect::<Vec<_>>();
        let selected = pool.names().map(str::to_string).collect();
        Self {
            verdicts,
            selected,
            fallback_used: decided_by == DecidedBy::Fallback,
        }
    }

    pub fn verdicts(&self) -> &[CategoryVerdict] {
        &self.verdicts
    }

    pub fn selected(&self) -> &[String] {
        &self.selected
    }

    pub fn fallback_used(&self) -> bool {
        self.fallback_used
    }

    pub fn contains(&self, name: &str) -> bool {
        self.selected.iter().any(|s| s == name)
    }
}

/// Dense per-pixel visual features, row-major (H, W, D).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "feature map dims must be positive, got ({height}, {width}, {dim})"
            )));
        }
        if data.len() != height * width * dim {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} values for ({height}, {width}, {dim}), got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteValue(i));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self, ModelError> {
        Self::new(
            self.height,
            self.width,
            self.dim,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Text embeddings, one row per pool category in pool index order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    pool: CategoryPool,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl TextEmbeddingSet {
    pub fn new(pool: CategoryPool, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ShapeMismatch("embedding dim must be positive".into()));
        }
        if data.len() != pool.len() * dim {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} x {dim} embedding values, got {}",
                pool.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteValue(i));
        }
        let set = Self {
            pool,
            dim,
            data,
            normalized,
        };
        if normalized {
            for r in 0..set.len() {
                let norm = l2_norm(set.row(r));
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(ModelError::ShapeMismatch(format!(
                        "row {r} is flagged normalized but has norm {norm}"
                    )));
                }
            }
        }
        Ok(set)
    }

    pub fn pool(&self) -> &CategoryPool {
        &self.pool
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize_rows(embeddings: &TextEmbeddingSet) -> Result<TextEmbeddingSet, ModelError> {
    let mut data = Vec::with_capacity(embeddings.data.len());
    for r in 0..embeddings.len() {
        let row = embeddings.row(r);
        let norm = l2_norm(row);
        if norm < 1e-12 {
            return Err(ModelError::ZeroVectorRow(r));
        }
        data.extend(row.iter().map(|&x| (f64::from(x) / norm) as f32));
    }
    TextEmbeddingSet::new(embeddings.pool.clone(), embeddings.dim, data, true)
}

/// Per-pixel label raster holding pool indices or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self, ModelError> {
        if labels.len() != height * width {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} labels for {height}x{width}, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    /// Fails on the first label that is neither a pool index nor the sentinel.
    pub fn check_pool(&self, pool_size: usize) -> Result<(), ModelError> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE_LABEL && usize::from(l) >= pool_size)
        {
            Some(position) => Err(ModelError::LabelOutOfRange {
                value: self.labels[position],
                position,
                pool_size,
            }),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Distinct non-sentinel labels, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l != IGNORE_LABEL)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }
}

/// Reference to an input image, forwarded opaquely to the MLLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    #[serde(skip)]
    pub bytes: Option<Vec<u8>>,
    pub mime: String,
    pub content_hash: String,
}

impl ImageRef {
    pub fn from_bytes(uri: impl Into<String>, bytes: Vec<u8>, mime: impl Into<String>) -> Self {
        let content_hash = sha256_hex(&bytes);
        Self {
            uri: uri.into(),
            bytes: Some(bytes),
            mime: mime.into(),
            content_hash,
        }
    }

    pub fn from_path(path: &std::path::Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let mime = mime_for_path(path);
        Ok(Self::from_bytes(path.to_string_lossy().into_owned(), bytes, mime))
    }

    /// File stem of the uri, used to pair images with feature and label files.
    pub fn stem(&self) -> String {
        std::path::Path::new(&self.uri)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.content_hash.clone())
    }
}

pub fn mime_for_path(path: &std::path::Path) -> &'static str {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "tif" | "tiff" => "image/tiff",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        _ => "application/octet-stream",
    }
}
