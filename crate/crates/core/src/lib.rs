//! Image-adaptive vocabularies for open-vocabulary remote sensing
//! segmentation.
//!
//! Offline, [`distill`] turns a category pool into interpretation standards
//! with a multimodal model. Online, [`reason`] anchors each image's scene,
//! decouples its visual attributes and verifies every category against the
//! standards. [`align`] then labels pixels by argmax over the surviving
//! categories only, and [`metrics`] scores the result.

pub mod align;
pub mod digest;
pub mod distill;
pub mod fsio;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod reason;
mod structured;
pub mod tensor_io;
#[cfg(feature = "test-support")]
pub mod testkit;

pub use align::{segment, AlignError, AlignmentConfig, Similarity, Upsample};
pub use distill::{build_standards, DistillConfig, DistillError, DistillOutcome};
pub use gateway::{ChatBackend, ChatRequest, ChatResponse, Gateway, GatewayConfig, GatewayError};
pub use metrics::{category_accuracy, render_report, ConfusionMatrix, EvalReport, MetricsError, ReportFormat};
pub use model::{
    AdaptiveVocabulary, Category, CategoryPool, CategoryVerdict, DecidedBy, DenseFeatureMap, DiscriminationRule,
    ImageRef, InterpretationStandard, LabelRaster, ModelError, SceneContext, StandardsStore, TextEmbeddingSet,
    VisualAttribute, VisualAttributeSet, IGNORE_LABEL,
};
pub use reason::{run_chain, ReasonConfig, ReasonError, ReasoningTrace};
pub use structured::StageOutput;
