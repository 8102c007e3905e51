//! Hermetic corpus and hand-authored mock model replies.
//!
//! Everything here is deterministic: fixture keys are derived from the same
//! request builders the pipeline uses, so the files line up with whatever
//! the distill and reason stages will ask.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use crate::distill::{self, DistillConfig, DistillContext};
use crate::gateway::{fixture_key, ChatRequest, MockBackend};
use crate::model::{
    CategoryPool, DenseFeatureMap, ImageRef, LabelRaster, StandardSource, StandardsStore, TextEmbeddingSet,
    IGNORE_LABEL,
};
use crate::reason::{self, ReasonConfig};
use crate::tensor_io;

pub type KitResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// Embedding width of the synthetic corpus (one spare axis beyond the pool).
pub const CORPUS_DIM: usize = 8;
pub const CORPUS_SIZE: usize = 16;

/// Writes `{fixture_key(request)}.json` holding `body`. An existing file with
/// different content is a key collision and fails.
pub fn put_fixture(dir: &Path, request: &ChatRequest, body: &str) -> KitResult<PathBuf> {
    let path = dir.join(format!("{}.json", fixture_key(request)));
    match std::fs::read_to_string(&path) {
        Ok(existing) if existing != body => {
            return Err(format!("fixture key collision at {}", path.display()).into())
        }
        _ => std::fs::write(&path, body)?,
    }
    Ok(path)
}

fn fenced(v: &Value) -> String {
    format!(
        "Here is the structured answer.\n```json\n{}\n```\n",
        serde_json::to_string_pretty(v).expect("json")
    )
}

struct CategoryText {
    name: &'static str,
    geometry: &'static str,
    boundaries: &'static str,
    spectra: &'static str,
    enhance_subs: &'static [&'static str],
    morphology: &'static str,
    spectral_spatial: &'static str,
    exclusivity: &'static str,
    sub_classes: &'static [&'static str],
}

struct RuleText {
    a: &'static str,
    b: &'static str,
    rule: &'static str,
    decides_for: &'static str,
    cue: &'static str,
}

struct PoolText {
    categories: &'static [CategoryText],
    pairs: &'static [(&'static str, &'static str)],
    rules: &'static [RuleText],
}

const LOVEDA_TEXT: PoolText = PoolText {
    categories: &[
        CategoryText {
            name: "agricultural",
            geometry: "large regular parcels and long rows",
            boundaries: "straight field margins and ridges",
            spectra: "green crops, brown tilled soil, bright plastic film",
            enhance_subs: &["paddy fields", "dry farmland", "steel-framed greenhouses", "plastic mulch"],
            morphology: "regular parcels of cultivated fields, paddies and greenhouse rows",
            spectral_spatial: "green crops or brown tilled soil with plastic mulch glare",
            exclusivity: "Cultivation patterns decide farmland even where film covers the soil.",
            sub_classes: &["paddy fields", "dry farmland", "greenhouses", "plastic mulch"],
        },
        CategoryText {
            name: "background",
            geometry: "irregular leftover areas without a dominant pattern",
            boundaries: "diffuse",
            spectra: "mixed low-contrast tones",
            enhance_subs: &["unlabelled ground", "clouds"],
            morphology: "amorphous leftover ground between labelled objects",
            spectral_spatial: "mixed low contrast tones without a repeating pattern",
            exclusivity: "",
            sub_classes: &["unused land", "clouds"],
        },
        CategoryText {
            name: "barren",
            geometry: "isolated open patches",
            boundaries: "ragged",
            spectra: "bright bare soil or rock",
            enhance_subs: &["bare land", "quarries", "sand"],
            morphology: "isolated bare patches with ragged outlines",
            spectral_spatial: "bright exposed soil or rock with messy surface textures",
            exclusivity: "",
            sub_classes: &["bare land", "quarries", "sand"],
        },
        CategoryText {
            name: "building",
            geometry: "compact blocks with right angles",
            boundaries: "sharp straight edges",
            spectra: "bright roofs with dark shadows",
            enhance_subs: &["residential houses", "factories", "warehouses"],
            morphology: "compact blocks with regular geometric footprints and straight right-angled edges",
            spectral_spatial: "bright grey, white or red roofs beside dark cast shadows",
            exclusivity: "",
            sub_classes: &["residential houses", "factories", "warehouses"],
        },
        CategoryText {
            name: "forest",
            geometry: "continuous canopy",
            boundaries: "soft irregular",
            spectra: "dark green with strong near-infrared",
            enhance_subs: &["woodland", "plantations"],
            morphology: "continuous tree canopy with rounded crowns",
            spectral_spatial: "dark green canopy with coarse crown texture on slopes",
            exclusivity: "",
            sub_classes: &["woodland", "plantations", "orchards"],
        },
        CategoryText {
            name: "road",
            geometry: "thin elongated strips",
            boundaries: "parallel edges",
            spectra: "grey asphalt or brown earth",
            enhance_subs: &["paved roads", "dirt tracks"],
            morphology: "thin elongated strips forming networks",
            spectral_spatial: "grey asphalt or brown earth with parallel margins",
            exclusivity: "",
            sub_classes: &["paved roads", "dirt tracks", "highways"],
        },
        CategoryText {
            name: "water",
            geometry: "smooth bodies and winding channels",
            boundaries: "smooth shorelines",
            spectra: "dark blue or black, low reflectance",
            enhance_subs: &["rivers", "ponds", "reservoirs"],
            morphology: "smooth contiguous bodies and winding channels",
            spectral_spatial: "uniform dark blue surface with low reflectance",
            exclusivity: "",
            sub_classes: &["rivers", "ponds", "reservoirs"],
        },
    ],
    pairs: &[("agricultural", "building"), ("barren", "agricultural"), ("building", "water")],
    rules: &[
        RuleText {
            a: "agricultural",
            b: "building",
            rule: "steel-framed greenhouses and plastic mulch are agricultural even though they look like built structures",
            decides_for: "agricultural",
            cue: "regular geometric shapes",
        },
        RuleText {
            a: "agricultural",
            b: "barren",
            rule: "isolated bare land with messy surface textures belongs to barren",
            decides_for: "barren",
            cue: "messy surface textures",
        },
        RuleText {
            a: "building",
            b: "water",
            rule: "fragmented dark patches adjacent to buildings are cast shadows, not water bodies",
            decides_for: "building",
            cue: "fragmented shadows beside tall structures",
        },
    ],
};

const GID5_TEXT: PoolText = PoolText {
    categories: &[
        CategoryText {
            name: "built-up",
            geometry: "dense blocks",
            boundaries: "sharp",
            spectra: "bright roofs",
            enhance_subs: &["towns", "villages", "industrial estates"],
            morphology: "dense blocks of roofs and paved yards",
            spectral_spatial: "bright heterogeneous roofs with shadows",
            exclusivity: "",
            sub_classes: &["towns", "villages", "industrial estates"],
        },
        CategoryText {
            name: "farmland",
            geometry: "regular parcels",
            boundaries: "straight",
            spectra: "green or brown",
            enhance_subs: &["paddy fields", "greenhouses"],
            morphology: "regular cultivated parcels and greenhouse rows",
            spectral_spatial: "green crops or brown soil in striped patterns",
            exclusivity: "",
            sub_classes: &["paddy fields", "irrigated land", "greenhouses"],
        },
        CategoryText {
            name: "meadow",
            geometry: "open grassy expanses",
            boundaries: "gradual",
            spectra: "light green, fine texture",
            enhance_subs: &["grassland", "pasture"],
            morphology: "open grassland without tree crowns",
            spectral_spatial: "light green fine smooth texture",
            exclusivity: "",
            sub_classes: &["grassland", "pasture"],
        },
    ],
    pairs: &[("built-up", "farmland"), ("meadow", "forest")],
    rules: &[
        RuleText {
            a: "built-up",
            b: "farmland",
            rule: "greenhouse rows inside cultivated parcels are farmland",
            decides_for: "farmland",
            cue: "regular geometric shapes",
        },
        RuleText {
            a: "forest",
            b: "meadow",
            rule: "a continuous canopy with coarse crown texture is forest",
            decides_for: "forest",
            cue: "crown texture",
        },
    ],
};

fn pool_text(pool: &CategoryPool) -> KitResult<&'static PoolText> {
    match pool.dataset_tag() {
        Some("loveda") => Ok(&LOVEDA_TEXT),
        Some("gid5") => Ok(&GID5_TEXT),
        other => Err(format!("no authored fixtures for pool tag {other:?}").into()),
    }
}

/// Writes every distill reply for the built-in LoveDA or GID5 pool into
/// `dir`. Replies are keyed against `config`'s prompt templates.
pub fn write_distill_fixtures(pool: &CategoryPool, dir: &Path, config: &DistillConfig) -> KitResult<()> {
    let text = pool_text(pool)?;
    std::fs::create_dir_all(dir)?;
    // Categories shared with LoveDA reuse its text: identical prompts map to
    // identical fixture keys.
    let by_name: BTreeMap<&str, &CategoryText> = LOVEDA_TEXT
        .categories
        .iter()
        .chain(text.categories)
        .map(|c| (c.name, c))
        .collect();

    for c in pool.iter() {
        let t = by_name[c.name.as_str()];
        let body = json!({
            "geometry": t.geometry,
            "boundaries": t.boundaries,
            "sub_classes": t.enhance_subs,
            "spectra": t.spectra,
        });
        put_fixture(dir, &distill::enhance_request(c, config)?, &fenced(&body))?;
    }
    let pairs: Vec<[&str; 2]> = text.pairs.iter().map(|&(a, b)| [a, b]).collect();
    put_fixture(
        dir,
        &distill::pairs_request(pool, config)?,
        &json!({ "pairs": pairs }).to_string(),
    )?;

    let mock = MockBackend::new(dir)?;
    let mut enhanced = BTreeMap::new();
    for c in pool.iter() {
        enhanced.insert(c.name.clone(), distill::enhance_category(c, &mock, config)?.value);
    }
    let proposed = distill::propose_ambiguous_pairs(pool, &mock, config)?.value;
    let mut rules = Vec::new();
    for (a, b) in &proposed {
        let r = text
            .rules
            .iter()
            .find(|r| r.a == a && r.b == b)
            .ok_or_else(|| format!("no authored rule for ({a}, {b})"))?;
        let body = json!({"rule": r.rule, "decides_for": r.decides_for, "cue": r.cue});
        put_fixture(dir, &distill::discriminate_request((a, b), &enhanced, config)?, &body.to_string())?;
        rules.push(distill::discriminate_pair((a, b), &enhanced, &mock, config)?.value);
    }
    let context = DistillContext::new(enhanced, rules, proposed)?;
    for c in pool.iter() {
        let t = by_name[c.name.as_str()];
        let body = json!({
            "morphology": t.morphology,
            "spectral_spatial": t.spectral_spatial,
            "exclusivity": t.exclusivity,
            "sub_classes": t.sub_classes,
        });
        put_fixture(dir, &distill::synthesize_request(c, &context, config)?, &fenced(&body))?;
    }
    Ok(())
}

/// Distill configuration used for the corpus: fixture provenance and a fixed
/// timestamp.
pub fn corpus_distill_config() -> DistillConfig {
    DistillConfig {
        source: StandardSource::Fixture,
        created_at: Some(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()),
        ..DistillConfig::default()
    }
}

/// Rectangle `[y0, y1) x [x0, x1)` of one ground-truth label. When
/// `confuser` is set the pixels' features lean toward that class, so an
/// unrestricted argmax mislabels them.
#[derive(Debug, Clone, Copy)]
struct Region {
    y: (usize, usize),
    x: (usize, usize),
    label: &'static str,
    confuser: Option<&'static str>,
}

const fn region(y: (usize, usize), x: (usize, usize), label: &'static str) -> Region {
    Region {
        y,
        x,
        label,
        confuser: None,
    }
}

const fn confused(y: (usize, usize), x: (usize, usize), label: &'static str, confuser: &'static str) -> Region {
    Region {
        y,
        x,
        label,
        confuser: Some(confuser),
    }
}

struct ImageSpec {
    stem: &'static str,
    regions: &'static [Region],
    /// Rows of the ground truth set to the ignore sentinel.
    ignore_rows: (usize, usize),
    scene: (&'static str, f64, &'static str),
    attributes: &'static [(&'static str, &'static str, &'static str)],
    /// Model verdicts; categories left out are decided by the rule engine.
    verdicts: &'static [(&'static str, bool, &'static str)],
    /// Hand-derived vocabulary; `None` when the chain falls back to the pool.
    expected: Option<&'static [&'static str]>,
}

const IMAGES: &[ImageSpec] = &[
    ImageSpec {
        stem: "tile_01_greenhouse",
        regions: &[
            region((0, 16), (0, 16), "agricultural"),
            confused((2, 8), (2, 8), "agricultural", "building"),
            region((0, 16), (10, 12), "road"),
            region((12, 16), (0, 10), "background"),
        ],
        ignore_rows: (0, 0),
        scene: ("rural", 0.9, "farmland parcels, greenhouse rows and a dirt track"),
        attributes: &[
            ("rows of translucent greenhouses with regular geometric shapes", "geometry", "upper left"),
            ("patchwork of cultivated fields in green and brown tones", "texture", ""),
            ("narrow unpaved track crossing the fields", "object", "right of centre"),
            ("idle open ground near the southern border", "object", "bottom"),
        ],
        verdicts: &[
            ("background", true, "idle open ground near the southern border"),
            ("barren", false, "no exposed soil or rock"),
            ("forest", false, "no tree canopy"),
            ("road", true, "a narrow unpaved track crosses the fields"),
            ("water", false, "no water surface"),
        ],
        expected: Some(&["agricultural", "background", "road"]),
    },
    ImageSpec {
        stem: "tile_02_mountain",
        regions: &[
            region((0, 16), (0, 16), "forest"),
            region((0, 16), (6, 9), "water"),
            confused((10, 15), (0, 5), "forest", "building"),
        ],
        ignore_rows: (0, 0),
        scene: ("forest", 0.85, "forest-dominated prior: hills covered by continuous canopy"),
        attributes: &[
            ("continuous dark green canopy on steep slopes", "texture", ""),
            ("winding river channel through the valley", "geometry", "centre"),
        ],
        verdicts: &[
            ("agricultural", false, "no cultivated parcels"),
            ("background", false, "canopy and river cover the tile"),
            ("barren", false, "no bare patches"),
            ("building", false, "no built structures in a forested mountain scene"),
            ("forest", true, "continuous canopy"),
            ("road", false, "no linear strips"),
            ("water", true, "winding river channel"),
        ],
        expected: Some(&["forest", "water"]),
    },
    ImageSpec {
        stem: "tile_03_urban",
        regions: &[
            region((0, 16), (0, 16), "background"),
            region((1, 7), (1, 7), "building"),
            region((9, 15), (1, 7), "building"),
            region((1, 15), (9, 14), "building"),
            confused((5, 7), (1, 7), "building", "water"),
            confused((13, 15), (9, 14), "building", "water"),
            region((7, 9), (0, 16), "road"),
        ],
        ignore_rows: (0, 1),
        scene: ("urban", 0.8, "dense rooftops along a paved street grid"),
        attributes: &[
            ("dense rectangular rooftops", "geometry", ""),
            ("fragmented dark shadows cast by tall buildings, not water bodies", "spectral", "north of blocks"),
            ("paved street grid", "object", "middle row"),
        ],
        verdicts: &[
            ("agricultural", false, "no fields"),
            ("background", true, "open lots between blocks"),
            ("barren", false, "no bare soil"),
            ("building", true, "dense rectangular rooftops"),
            ("forest", false, "no canopy"),
            ("road", true, "paved street grid"),
            ("water", false, "dark patches are fragmented shadows rather than water bodies"),
        ],
        expected: Some(&["background", "building", "road"]),
    },
    ImageSpec {
        stem: "tile_04_pond",
        regions: &[
            region((0, 16), (0, 16), "agricultural"),
            confused((0, 6), (0, 6), "agricultural", "forest"),
            region((8, 16), (0, 6), "building"),
            region((0, 16), (7, 8), "road"),
            region((9, 14), (9, 14), "water"),
        ],
        ignore_rows: (0, 0),
        scene: ("mixed", 0.6, "village edge with fields and a pond"),
        attributes: &[
            ("small houses clustered at the field edge", "object", "lower left"),
            ("round pond with a smooth dark surface", "spectral", "lower right"),
            ("straight lane between parcels", "geometry", ""),
            ("pale disturbed ground", "texture", ""),
        ],
        verdicts: &[
            ("agricultural", true, "parcels of crops"),
            ("background", false, "no leftover ground"),
            ("barren", true, "pale disturbed ground could be bare land"),
            ("building", true, "small houses"),
            ("forest", false, "no canopy"),
            ("road", true, "straight lane"),
            ("water", true, "round pond"),
        ],
        expected: Some(&["agricultural", "barren", "building", "road", "water"]),
    },
    ImageSpec {
        stem: "tile_05_haze",
        regions: &[
            region((0, 16), (0, 16), "barren"),
            region((0, 5), (0, 16), "water"),
            confused((10, 14), (2, 6), "barren", "agricultural"),
        ],
        ignore_rows: (15, 16),
        scene: ("mixed", 1.3, "haze hides most of the surface"),
        attributes: &[("uniform haze over the whole tile", "spectral", "")],
        verdicts: &[
            ("agricultural", false, "obscured"),
            ("background", false, "obscured"),
            ("barren", false, "obscured"),
            ("building", false, "obscured"),
            ("forest", false, "obscured"),
            ("road", false, "obscured"),
            ("water", false, "obscured"),
        ],
        expected: None,
    },
    ImageSpec {
        stem: "tile_06_river",
        regions: &[
            region((0, 16), (0, 16), "agricultural"),
            region((0, 16), (11, 16), "forest"),
            region((6, 10), (0, 16), "water"),
            confused((6, 10), (0, 4), "water", "background"),
        ],
        ignore_rows: (0, 0),
        scene: ("rural", 0.75, "river between farmland and woodland"),
        attributes: &[
            ("broad river with smooth dark water", "spectral", "middle band"),
            ("cultivated parcels north and south of the river", "texture", ""),
            ("woodland canopy on the eastern side", "texture", "right"),
        ],
        verdicts: &[
            ("agricultural", true, "cultivated parcels"),
            ("background", false, "no leftover ground"),
            ("barren", false, "no bare land"),
            ("building", false, "no structures"),
            ("forest", true, "woodland canopy"),
            ("road", false, "no roads"),
            ("water", true, "broad river"),
            ("lava", false, "not a land-cover class here"),
        ],
        expected: Some(&["agricultural", "forest", "water"]),
    },
];

/// One synthetic tile of the corpus.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub stem: String,
    pub image_path: PathBuf,
    pub content_hash: String,
    /// Categories present in the ground truth (sentinel pixels excluded).
    pub gt_present: BTreeSet<String>,
    /// Vocabulary the reasoning chain produces from the authored replies.
    pub expected_vocabulary: BTreeSet<String>,
    pub expect_fallback: bool,
}

/// Layout of a written corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub pool: CategoryPool,
    pub pool_path: PathBuf,
    pub fixtures_dir: PathBuf,
    pub standards_path: PathBuf,
    pub images_dir: PathBuf,
    pub features_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub embeddings_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub images: Vec<CorpusImage>,
}

/// LoveDA-style palette, one colour per pool index.
const PALETTE: [[u8; 3]; 7] = [
    [255, 195, 128],
    [255, 255, 255],
    [159, 129, 183],
    [255, 0, 0],
    [0, 255, 0],
    [255, 255, 0],
    [0, 0, 255],
];

/// Uncompressed 24-bit BMP, bottom-up rows.
pub fn encode_bmp(width: usize, height: usize, rgb: impl Fn(usize, usize) -> [u8; 3]) -> Vec<u8> {
    let row_bytes = (width * 3).div_ceil(4) * 4;
    let size = 54 + row_bytes * height;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&54u32.to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&((row_bytes * height) as u32).to_le_bytes());
    out.extend_from_slice(&[0; 16]);
    for y in (0..height).rev() {
        let start = out.len();
        for x in 0..width {
            let [r, g, b] = rgb(y, x);
            out.extend_from_slice(&[b, g, r]);
        }
        out.resize(start + row_bytes, 0);
    }
    out
}

/// Identity rows padded to [`CORPUS_DIM`]: pairwise orthogonal unit vectors.
pub fn orthonormal_embeddings(pool: &CategoryPool, dim: usize) -> TextEmbeddingSet {
    let n = pool.len();
    assert!(dim >= n, "need dim >= pool size");
    let mut data = vec![0.0f32; n * dim];
    for i in 0..n {
        data[i * dim + i] = 1.0;
    }
    TextEmbeddingSet::new(pool.clone(), dim, data, true).expect("valid embeddings")
}

fn render_spec(spec: &ImageSpec, pool: &CategoryPool, seed: u64) -> (LabelRaster, DenseFeatureMap) {
    let (s, d) = (CORPUS_SIZE, CORPUS_DIM);
    let mut labels = vec![0u16; s * s];
    let mut confusers: Vec<Option<usize>> = vec![None; s * s];
    for r in spec.regions {
        let idx = pool.index_of(r.label).expect("authored label in pool") as u16;
        let conf = r.confuser.map(|c| pool.index_of(c).expect("authored confuser in pool"));
        for y in r.y.0..r.y.1 {
            for x in r.x.0..r.x.1 {
                labels[y * s + x] = idx;
                confusers[y * s + x] = conf;
            }
        }
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(s * s * d);
    for (&g, conf) in labels.iter().zip(&confusers) {
        let mut f: Vec<f32> = (0..d).map(|_| rng.random_range(-0.05f32..0.05)).collect();
        match conf {
            Some(c) => {
                f[usize::from(g)] += 0.6;
                f[*c] += 0.8;
            }
            None => f[usize::from(g)] += 1.0,
        }
        features.extend(f);
    }
    for y in spec.ignore_rows.0..spec.ignore_rows.1 {
        labels[y * s..(y + 1) * s].fill(IGNORE_LABEL);
    }
    (
        LabelRaster::new(s, s, labels).expect("raster"),
        DenseFeatureMap::new(s, s, d, features).expect("features"),
    )
}

/// Writes the six-tile LoveDA corpus under `root`: pool, distill and reason
/// fixtures, a distilled standards file, orthonormal embeddings, per-tile
/// feature maps, ground-truth rasters and BMP images.
pub fn write_corpus(root: &Path) -> KitResult<Corpus> {
    let pool = CategoryPool::loveda();
    let corpus = Corpus {
        root: root.to_path_buf(),
        pool: pool.clone(),
        pool_path: root.join("pool.json"),
        fixtures_dir: root.join("fixtures"),
        standards_path: root.join("standards.json"),
        images_dir: root.join("images"),
        features_dir: root.join("features"),
        gt_dir: root.join("gt"),
        embeddings_path: root.join("embeddings.npy"),
        sidecar_path: root.join("embeddings.json"),
        images: Vec::new(),
    };
    for dir in [&corpus.fixtures_dir, &corpus.images_dir, &corpus.features_dir, &corpus.gt_dir] {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&corpus.pool_path, serde_json::to_string_pretty(&pool)?)?;

    let distill_config = corpus_distill_config();
    write_distill_fixtures(&pool, &corpus.fixtures_dir, &distill_config)?;
    write_distill_fixtures(&CategoryPool::gid5(), &corpus.fixtures_dir, &distill_config)?;
    let mock = MockBackend::new(&corpus.fixtures_dir)?;
    let store = distill::build_standards(&pool, &mock, &distill_config)?.store;
    tensor_io::save_standards(&store, &corpus.standards_path)?;
    tensor_io::save_text_embeddings(
        &orthonormal_embeddings(&pool, CORPUS_DIM),
        &corpus.embeddings_path,
        &corpus.sidecar_path,
    )?;

    let reason_config = ReasonConfig::default();
    let mut images = Vec::with_capacity(IMAGES.len());
    for (i, spec) in IMAGES.iter().enumerate() {
        let (gt, features) = render_spec(spec, &pool, 1000 + i as u64);
        tensor_io::save_label_raster(&gt, &corpus.gt_dir.join(format!("{}.npy", spec.stem)))?;
        tensor_io::save_feature_map(&features, &corpus.features_dir.join(format!("{}.npy", spec.stem)))?;
        let bmp = encode_bmp(CORPUS_SIZE, CORPUS_SIZE, |y, x| match gt.get(y, x) {
            IGNORE_LABEL => [0, 0, 0],
            l => PALETTE[usize::from(l)],
        });
        let image_path = corpus.images_dir.join(format!("{}.bmp", spec.stem));
        std::fs::write(&image_path, &bmp)?;
        let image = ImageRef::from_path(&image_path)?;
        write_reason_fixtures(spec, &image, &store, &mock, &reason_config)?;

        let gt_present = gt
            .present_labels()
            .into_iter()
            .map(|l| pool.get(usize::from(l)).expect("label in pool").name.clone())
            .collect();
        images.push(CorpusImage {
            stem: spec.stem.to_string(),
            image_path,
            content_hash: image.content_hash.clone(),
            gt_present,
            expect_fallback: spec.expected.is_none(),
            expected_vocabulary: match spec.expected {
                Some(names) => names.iter().map(|s| s.to_string()).collect(),
                None => pool.names().map(str::to_string).collect(),
            },
        });
    }
    Ok(Corpus { images, ..corpus })
}

/// Writes the three chain replies for one tile. The synthesize reply is keyed
/// on the scene and attributes as parsed back through the mock.
fn write_reason_fixtures(
    spec: &ImageSpec,
    image: &ImageRef,
    store: &StandardsStore,
    mock: &MockBackend,
    config: &ReasonConfig,
) -> KitResult<()> {
    let dir = mock.dir();
    let (label, confidence, rationale) = spec.scene;
    put_fixture(
        dir,
        &reason::anchor_request(image, config)?,
        &fenced(&json!({"scene": label, "confidence": confidence, "rationale": rationale})),
    )?;
    let scene = reason::anchor_scene(image, mock, config)?.value;

    let attrs: Vec<Value> = spec
        .attributes
        .iter()
        .map(|&(description, kind, hint)| {
            let mut v = json!({"description": description, "kind": kind});
            if !hint.is_empty() {
                v["region_hint"] = json!(hint);
            }
            v
        })
        .collect();
    put_fixture(
        dir,
        &reason::decouple_request(image, &scene, config)?,
        &format!(
            "The tile shows these attributes: {}",
            serde_json::to_string(&json!({ "attributes": attrs }))?
        ),
    )?;
    let attributes = reason::decouple_attributes(image, &scene, mock, config)?.value;

    let verdicts: Vec<Value> = spec
        .verdicts
        .iter()
        .map(|&(category, present, justification)| {
            json!({"category": category, "present": present, "justification": justification})
        })
        .collect();
    put_fixture(
        dir,
        &reason::synthesize_request(&scene, &attributes, store, config)?,
        &fenced(&json!({ "verdicts": verdicts })),
    )?;

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bmp_header_and_size() {
        let bmp = encode_bmp(3, 2, |_, _| [1, 2, 3]);
        assert_eq!(&bmp[..2], b"BM");
        assert_eq!(bmp.len(), 54 + 12 * 2);
        assert_eq!(&bmp[54..57], &[3, 2, 1]);
    }

    #[test]
    fn corpus_regions_stay_inside_the_tile() {
        let pool = CategoryPool::loveda();
        for spec in IMAGES {
            for r in spec.regions {
                assert!(r.y.1 <= CORPUS_SIZE && r.x.1 <= CORPUS_SIZE, "{}", spec.stem);
                assert!(pool.contains(r.label));
            }
        }
    }
}
