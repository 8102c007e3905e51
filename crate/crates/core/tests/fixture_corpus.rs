//! Distillation and the reasoning chain driven by the hand-authored mock
//! replies of the synthetic corpus.

use std::collections::BTreeSet;

use geovocab_core::distill::{build_standards, DistillStage};
use geovocab_core::gateway::MockBackend;
use geovocab_core::model::{CategoryPool, DecidedBy, ImageRef};
use geovocab_core::reason::{run_chain, ReasonConfig, ReasonError, ReasonStage};
use geovocab_core::tensor_io::load_standards;
use geovocab_core::testkit::{corpus_distill_config, write_corpus, write_distill_fixtures, Corpus};

fn corpus() -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path()).unwrap();
    (dir, corpus)
}

#[test]
fn loveda_store_has_seven_standards_and_the_conflict_rules() {
    let (_dir, c) = corpus();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    let out = build_standards(&c.pool, &mock, &corpus_distill_config()).unwrap();
    assert_eq!(out.store.standards().len(), 7);
    let pairs = out.context.ambiguous_pairs();
    assert!(pairs.contains(&("agricultural".into(), "building".into())));
    assert!(pairs.contains(&("agricultural".into(), "barren".into())));

    let greenhouse = out.store.rules().iter().find(|r| r.category_b == "building").unwrap();
    assert_eq!(greenhouse.decides_for, "agricultural");
    assert!(greenhouse.rule.contains("greenhouse") && greenhouse.rule.contains("mulch"));
    assert_eq!(greenhouse.cue, "regular geometric shapes");
    let bare = out.store.rules().iter().find(|r| r.category_b == "barren").unwrap();
    assert_eq!(bare.decides_for, "barren");
    assert!(bare.rule.contains("messy surface textures"));

    let agri = &out.context.enhanced_descriptions()["agricultural"];
    assert!(agri.contains("greenhouses"), "{agri}");
    let stored = load_standards(&c.standards_path).unwrap();
    assert!(stored.same_content(&out.store));
}

#[test]
fn gid5_store_has_six_standards() {
    let (_dir, c) = corpus();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    let out = build_standards(&CategoryPool::gid5(), &mock, &corpus_distill_config()).unwrap();
    assert_eq!(out.store.standards().len(), 6);
    assert_eq!(out.store.rules().len(), 2);
}

#[test]
fn distillation_is_deterministic() {
    let (_dir, c) = corpus();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    let a = build_standards(&c.pool, &mock, &corpus_distill_config()).unwrap();
    let b = build_standards(&c.pool, &mock, &corpus_distill_config()).unwrap();
    assert!(a.store.same_content(&b.store));
    assert_eq!(a.warnings, b.warnings);
}

#[test]
fn missing_discrimination_reply_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let pool = CategoryPool::loveda();
    let config = corpus_distill_config();
    write_distill_fixtures(&pool, dir.path(), &config).unwrap();
    let mut removed = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        if path.file_name().unwrap().to_string_lossy().starts_with("discriminate__") && text.contains("shadows") {
            std::fs::remove_file(&path).unwrap();
            removed += 1;
        }
    }
    assert_eq!(removed, 1);
    let err = build_standards(&pool, &MockBackend::new(dir.path()).unwrap(), &config).unwrap_err();
    assert_eq!(err.stage(), Some(DistillStage::Discriminate));
    assert!(err.to_string().contains("(building, water)"), "{err}");
}

#[test]
fn every_tile_yields_its_expected_vocabulary() {
    let (_dir, c) = corpus();
    let store = load_standards(&c.standards_path).unwrap();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    for img in &c.images {
        let image = ImageRef::from_path(&img.image_path).unwrap();
        let trace = run_chain(&image, &store, &mock, &ReasonConfig::default()).unwrap();
        let selected: BTreeSet<String> = trace.vocabulary.selected().iter().cloned().collect();
        assert_eq!(selected, img.expected_vocabulary, "{}", img.stem);
        assert_eq!(trace.vocabulary.fallback_used(), img.expect_fallback, "{}", img.stem);
        assert_eq!(trace.vocabulary.verdicts().len(), 7);
        assert!(!trace.attributes.attributes.is_empty());
    }
}

fn trace_for(stem: &str) -> geovocab_core::reason::ReasoningTrace {
    let (_dir, c) = corpus();
    let store = load_standards(&c.standards_path).unwrap();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    let img = c.images.iter().find(|i| i.stem == stem).unwrap();
    run_chain(&ImageRef::from_path(&img.image_path).unwrap(), &store, &mock, &ReasonConfig::default()).unwrap()
}

#[test]
fn greenhouse_rows_are_resolved_by_the_rule_engine() {
    let trace = trace_for("tile_01_greenhouse");
    assert_eq!(trace.scene.label, "rural");
    let verdict = |name: &str| trace.vocabulary.verdicts().iter().find(|v| v.category == name).unwrap().clone();
    let building = verdict("building");
    assert_eq!(building.decided_by, DecidedBy::RuleEngine);
    assert!(!building.present);
    assert!(building.justification.contains("assigns it to agricultural"), "{}", building.justification);
    let agri = verdict("agricultural");
    assert_eq!(agri.decided_by, DecidedBy::RuleEngine);
    assert!(agri.present);
    let greenhouse = &trace.attributes.attributes[0];
    assert_eq!(greenhouse.kind, geovocab_core::model::AttributeKind::Geometry);
    assert!(greenhouse.description.contains("regular geometric"));
}

#[test]
fn mountain_tile_anchors_a_forest_scene_and_prunes_building() {
    let trace = trace_for("tile_02_mountain");
    assert_eq!(trace.scene.label, "forest");
    assert!(trace.scene.rationale.contains("forest-dominated prior"));
    assert!(!trace.vocabulary.contains("building"));
}

#[test]
fn shadows_are_kept_apart_from_water() {
    let trace = trace_for("tile_03_urban");
    assert!(trace
        .attributes
        .attributes
        .iter()
        .any(|a| a.description.contains("fragmented dark shadows") && a.description.contains("not water")));
    assert!(!trace.vocabulary.contains("water"));
}

#[test]
fn hazy_tile_clamps_confidence_and_falls_back() {
    let trace = trace_for("tile_05_haze");
    assert_eq!(trace.scene.confidence, 1.0);
    assert!(trace.warnings.iter().any(|w| w.contains("clamped")));
    assert!(trace.vocabulary.fallback_used());
    assert!(trace.vocabulary.verdicts().iter().all(|v| v.decided_by == DecidedBy::Fallback));
}

#[test]
fn unknown_category_verdict_is_dropped_with_warning() {
    let trace = trace_for("tile_06_river");
    assert!(trace.warnings.iter().any(|w| w.contains("\"lava\"")), "{:?}", trace.warnings);
}

#[test]
fn traces_are_byte_identical_across_runs() {
    let (_dir, c) = corpus();
    let store = load_standards(&c.standards_path).unwrap();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    let image = ImageRef::from_path(&c.images[0].image_path).unwrap();
    let a = run_chain(&image, &store, &mock, &ReasonConfig::default()).unwrap();
    let b = run_chain(&image, &store, &mock, &ReasonConfig::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn missing_decouple_reply_names_the_stage() {
    let (_dir, c) = corpus();
    let img = &c.images[1];
    std::fs::remove_file(c.fixtures_dir.join(format!("decouple__{}.json", img.content_hash))).unwrap();
    let store = load_standards(&c.standards_path).unwrap();
    let mock = MockBackend::new(&c.fixtures_dir).unwrap();
    let err = run_chain(&ImageRef::from_path(&img.image_path).unwrap(), &store, &mock, &ReasonConfig::default())
        .unwrap_err();
    assert!(matches!(err, ReasonError::Gateway { stage: ReasonStage::Decouple, .. }));
    assert!(err.to_string().starts_with("decouple"), "{err}");
}
