//! Segmentation and vocabulary metrics: confusion matrix, per-class IoU and
//! accuracy, mIoU, overall accuracy and category accuracy.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CategoryPool, LabelRaster, IGNORE_LABEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: prediction is {pred_h}x{pred_w}, ground truth is {gt_h}x{gt_w}")]
    DimMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("prediction contains the ignore sentinel at position {position}")]
    SentinelInPrediction { position: usize },
    #[error("{which} label {value} at position {position} is outside a pool of {pool_size}")]
    LabelOutOfRange {
        which: &'static str,
        value: u16,
        position: usize,
        pool_size: usize,
    },
    #[error("cannot merge confusion matrices over different pools")]
    PoolMismatch,
    #[error("no class has a defined IoU")]
    NoDefinedClasses,
    #[error("image {0:?} has an empty ground-truth category set")]
    EmptyGroundTruthSet(String),
    #[error("no images to score")]
    NoImages,
}

/// `counts[g][p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pool: CategoryPool,
    counts: Vec<u64>,
    ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(pool: CategoryPool) -> Self {
        let n = pool.len();
        Self {
            pool,
            counts: vec![0; n * n],
            ignored_pixels: 0,
        }
    }

    /// Builds a matrix from explicit row-major counts.
    pub fn from_counts(pool: CategoryPool, counts: Vec<u64>) -> Option<Self> {
        (counts.len() == pool.len() * pool.len()).then_some(Self {
            pool,
            counts,
            ignored_pixels: 0,
        })
    }

    pub fn pool(&self) -> &CategoryPool {
        &self.pool
    }

    pub fn n(&self) -> usize {
        self.pool.len()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n() + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.ignored_pixels
    }

    /// Pixels counted in the matrix (ignored pixels excluded).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair. Ground-truth sentinel pixels
    /// are counted as ignored; a sentinel in the prediction is an error. The
    /// matrix is unchanged on error.
    pub fn accumulate(&mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<(), MetricsError> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(MetricsError::DimMismatch {
                pred_h: pred.height(),
                pred_w: pred.width(),
                gt_h: gt.height(),
                gt_w: gt.width(),
            });
        }
        let n = self.n();
        for (position, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if p == IGNORE_LABEL {
                return Err(MetricsError::SentinelInPrediction { position });
            }
            if usize::from(p) >= n {
                return Err(MetricsError::LabelOutOfRange {
                    which: "prediction",
                    value: p,
                    position,
                    pool_size: n,
                });
            }
            if g != IGNORE_LABEL && usize::from(g) >= n {
                return Err(MetricsError::LabelOutOfRange {
                    which: "ground-truth",
                    value: g,
                    position,
                    pool_size: n,
                });
            }
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                self.ignored_pixels += 1;
            } else {
                self.counts[usize::from(g) * n + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum; associative and commutative.
    pub fn merge(&mut self, other: &Self) -> Result<(), MetricsError> {
        if self.pool != other.pool {
            return Err(MetricsError::PoolMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored_pixels += other.ignored_pixels;
        Ok(())
    }

    fn tp_fp_fn(&self, k: usize) -> (u64, u64, u64) {
        let n = self.n();
        let tp = self.count(k, k);
        let col: u64 = (0..n).map(|g| self.count(g, k)).sum();
        let row: u64 = (0..n).map(|p| self.count(k, p)).sum();
        (tp, col - tp, row - tp)
    }
}

/// Functional form of [`ConfusionMatrix::accumulate`].
pub fn accumulate(
    mut cm: ConfusionMatrix,
    pred: &LabelRaster,
    gt: &LabelRaster,
) -> Result<ConfusionMatrix, MetricsError> {
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Per-class value; `None` when the denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassValue {
    pub category: String,
    pub value: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// TP / (TP + FP + FN) per class.
pub fn per_class_iou(cm: &ConfusionMatrix) -> Vec<ClassValue> {
    cm.pool
        .iter()
        .map(|c| {
            let (tp, fp, fn_) = cm.tp_fp_fn(c.index);
            ClassValue {
                category: c.name.clone(),
                value: ratio(tp, tp + fp + fn_),
            }
        })
        .collect()
}

/// TP / (TP + FN) per class: recall against the ground truth.
pub fn per_class_acc(cm: &ConfusionMatrix) -> Vec<ClassValue> {
    cm.pool
        .iter()
        .map(|c| {
            let (tp, _, fn_) = cm.tp_fp_fn(c.index);
            ClassValue {
                category: c.name.clone(),
                value: ratio(tp, tp + fn_),
            }
        })
        .collect()
}

/// `(miou, oa)`: mean IoU over classes with a defined IoU, and the diagonal
/// share of all counted pixels.
pub fn overall(cm: &ConfusionMatrix) -> Result<(f64, f64), MetricsError> {
    let defined: Vec<f64> = per_class_iou(cm).into_iter().filter_map(|c| c.value).collect();
    if defined.is_empty() {
        return Err(MetricsError::NoDefinedClasses);
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    let diag: u64 = (0..cm.n()).map(|k| cm.count(k, k)).sum();
    let oa = diag as f64 / cm.total() as f64;
    Ok((miou, oa))
}

/// Predicted and ground-truth category sets of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCategorySets {
    pub image: String,
    pub predicted: BTreeSet<String>,
    pub ground_truth: BTreeSet<String>,
}

/// |predicted ∩ truth| / |predicted ∪ truth|.
pub fn jaccard(predicted: &BTreeSet<String>, truth: &BTreeSet<String>) -> f64 {
    let inter = predicted.intersection(truth).count();
    let union = predicted.union(truth).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean per-image Jaccard between predicted vocabulary and ground-truth
/// present set.
pub fn category_accuracy(per_image: &[ImageCategorySets]) -> Result<f64, MetricsError> {
    if per_image.is_empty() {
        return Err(MetricsError::NoImages);
    }
    let mut sum = 0.0;
    for img in per_image {
        if img.ground_truth.is_empty() {
            return Err(MetricsError::EmptyGroundTruthSet(img.image.clone()));
        }
        sum += jaccard(&img.predicted, &img.ground_truth);
    }
    Ok(sum / per_image.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub category: String,
    pub display: String,
    pub iou: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    pub miou: f64,
    pub oa: f64,
    pub cat_acc: Option<f64>,
    pub images_evaluated: usize,
    pub fallback_count: usize,
    /// Classes with undefined IoU, left out of `miou`.
    pub excluded_from_miou: Vec<String>,
    pub ignored_pixels: u64,
}

impl EvalReport {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        cat_acc: Option<f64>,
        images_evaluated: usize,
        fallback_count: usize,
    ) -> Result<Self, MetricsError> {
        let (miou, oa) = overall(cm)?;
        let ious = per_class_iou(cm);
        let accs = per_class_acc(cm);
        let per_class: Vec<ClassReport> = cm
            .pool
            .iter()
            .zip(ious.into_iter().zip(accs))
            .map(|(c, (iou, acc))| ClassReport {
                category: c.name.clone(),
                display: c.display.clone(),
                iou: iou.value,
                acc: acc.value,
            })
            .collect();
        let excluded_from_miou = per_class
            .iter()
            .filter(|c| c.iou.is_none())
            .map(|c| c.category.clone())
            .collect();
        Ok(Self {
            per_class,
            miou,
            oa,
            cat_acc,
            images_evaluated,
            fallback_count,
            excluded_from_miou,
            ignored_pixels: cm.ignored_pixels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TextTable,
    Json,
    Csv,
}

const UNDEFINED_CELL: &str = "—";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED_CELL.to_string(), |x| format!("{:.2}", x * 100.0))
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn pad(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{s}{}", " ".repeat(width.saturating_sub(len)))
}

fn render_text(report: &EvalReport) -> String {
    // One column group per class (IoU, Acc), then Overall (mIoU, OA); values in percent.
    let mut groups: Vec<(String, [String; 2], [String; 2])> = report
        .per_class
        .iter()
        .map(|c| (c.display.clone(), ["IoU".into(), "Acc".into()], [pct(c.iou), pct(c.acc)]))
        .collect();
    groups.push((
        "Overall".into(),
        ["mIoU".into(), "OA".into()],
        [pct(Some(report.miou)), pct(Some(report.oa))],
    ));
    let mut top = String::new();
    let mut mid = String::new();
    let mut bottom = String::new();
    for (name, heads, values) in &groups {
        let cell = heads
            .iter()
            .chain(values.iter())
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(0)
            .max(6);
        let width = (2 * cell + 1).max(name.chars().count());
        let cell = cell.max((width - 1).div_ceil(2));
        let width = 2 * cell + 1;
        top.push_str(&format!("| {} ", pad(name, width)));
        mid.push_str(&format!("| {} {} ", pad(&heads[0], cell), pad(&heads[1], cell)));
        bottom.push_str(&format!("| {} {} ", pad(&values[0], cell), pad(&values[1], cell)));
    }
    let mut out = String::new();
    for line in [top, mid, bottom] {
        let _ = writeln!(out, "{}|", line);
    }
    if let Some(c) = report.cat_acc {
        let _ = writeln!(out, "Cat. Acc.: {}", pct(Some(c)));
    }
    let _ = writeln!(
        out,
        "Images: {}  Fallback vocabularies: {}  Ignored pixels: {}",
        report.images_evaluated, report.fallback_count, report.ignored_pixels
    );
    if report.per_class.iter().any(|c| c.iou.is_none() || c.acc.is_none()) {
        let _ = writeln!(
            out,
            "{UNDEFINED_CELL} undefined (zero denominator); excluded from mIoU: {}",
            if report.excluded_from_miou.is_empty() {
                "none".to_string()
            } else {
                report.excluded_from_miou.join(", ")
            }
        );
    }
    out
}

fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("category,iou,acc\n");
    for c in &report.per_class {
        let _ = writeln!(out, "{},{},{}", csv_field(&c.category), csv_cell(c.iou), csv_cell(c.acc));
    }
    let _ = writeln!(out, "overall,{},{}", report.miou, report.oa);
    if let Some(c) = report.cat_acc {
        let _ = writeln!(out, "cat_acc,{c},");
    }
    out
}

/// Renders a report. The text table uses percentages with two decimals and
/// "—" for undefined cells; JSON and CSV carry full-precision values.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::TextTable => render_text(report).into_bytes(),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Csv => render_csv(report).into_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(n: usize) -> CategoryPool {
        CategoryPool::from_names(None, (0..n).map(|i| format!("c{i}"))).unwrap()
    }

    fn worked() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(pool(2), vec![3, 1, 2, 4]).unwrap()
    }

    #[test]
    fn worked_matrix() {
        let cm = worked();
        let iou: Vec<_> = per_class_iou(&cm).into_iter().map(|c| c.value.unwrap()).collect();
        assert_eq!(iou, vec![0.5, 4.0 / 7.0]);
        let acc: Vec<_> = per_class_acc(&cm).into_iter().map(|c| c.value.unwrap()).collect();
        assert_eq!(acc, vec![0.75, 4.0 / 6.0]);
        let (miou, oa) = overall(&cm).unwrap();
        assert_eq!(oa, 0.7);
        assert!((miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn accumulate_tallies_per_pixel() {
        let pred = LabelRaster::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let gt = LabelRaster::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let cm = accumulate(ConfusionMatrix::new(pool(2)), &pred, &gt).unwrap();
        assert_eq!(cm.counts(), [1, 1, 1, 1]);
    }

    #[test]
    fn sentinels() {
        let mut cm = ConfusionMatrix::new(pool(3));
        let pred = LabelRaster::filled(4, 4, 1);
        cm.accumulate(&pred, &LabelRaster::filled(4, 4, IGNORE_LABEL)).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored_pixels(), 16);
        let bad = LabelRaster::new(1, 2, vec![0, IGNORE_LABEL]).unwrap();
        assert_eq!(
            cm.accumulate(&bad, &LabelRaster::filled(1, 2, 0)),
            Err(MetricsError::SentinelInPrediction { position: 1 })
        );
        assert!(matches!(
            cm.accumulate(&pred, &LabelRaster::filled(2, 2, 0)),
            Err(MetricsError::DimMismatch { .. })
        ));
    }

    #[test]
    fn undefined_classes_are_excluded() {
        let cm = ConfusionMatrix::from_counts(pool(3), vec![2, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(per_class_iou(&cm)[1].value, None);
        assert_eq!(per_class_acc(&cm)[2].value, None);
        assert_eq!(overall(&cm).unwrap(), (1.0, 1.0));
        let off = ConfusionMatrix::from_counts(pool(2), vec![0, 3, 2, 0]).unwrap();
        assert_eq!(overall(&off).unwrap().1, 0.0);
        assert_eq!(overall(&ConfusionMatrix::new(pool(2))), Err(MetricsError::NoDefinedClasses));
    }

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn category_accuracy_cases() {
        let one = |p: &[&str], g: &[&str]| ImageCategorySets {
            image: "i".into(),
            predicted: set(p),
            ground_truth: set(g),
        };
        assert_eq!(category_accuracy(&[one(&["agricultural", "water"], &["agricultural", "water"])]).unwrap(), 1.0);
        assert_eq!(category_accuracy(&[one(&["a", "b", "c"], &["a", "b"])]).unwrap(), 2.0 / 3.0);
        let full = ["agricultural", "background", "barren", "building", "forest", "road", "water"];
        assert_eq!(category_accuracy(&[one(&full, &["water"])]).unwrap(), 1.0 / 7.0);
        assert_eq!(
            category_accuracy(&[one(&["a"], &[])]),
            Err(MetricsError::EmptyGroundTruthSet("i".into()))
        );
    }

    fn report() -> EvalReport {
        EvalReport {
            per_class: vec![
                ClassReport {
                    category: "water".into(),
                    display: "Water".into(),
                    iou: Some(0.4768),
                    acc: Some(0.9206),
                },
                ClassReport {
                    category: "meadow".into(),
                    display: "Meadow".into(),
                    iou: None,
                    acc: None,
                },
            ],
            miou: 0.4534,
            oa: 0.6334,
            cat_acc: Some(0.6485),
            images_evaluated: 3,
            fallback_count: 1,
            excluded_from_miou: vec!["meadow".into()],
            ignored_pixels: 0,
        }
    }

    #[test]
    fn text_table_cells() {
        let text = String::from_utf8(render_report(&report(), ReportFormat::TextTable)).unwrap();
        assert!(text.contains("45.34") && text.contains("63.34"), "{text}");
        assert!(text.contains("47.68") && text.contains("92.06"));
        assert!(text.contains("— undefined"));
        assert!(text.contains("Cat. Acc.: 64.85"));
        let lines: Vec<&str> = text.lines().take(3).collect();
        assert!(lines.iter().all(|l| l.chars().count() == lines[0].chars().count()));
    }

    #[test]
    fn json_and_csv_are_lossless() {
        let r = report();
        let back: EvalReport = serde_json::from_slice(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
        let csv = String::from_utf8(render_report(&r, ReportFormat::Csv)).unwrap();
        assert_eq!(csv, "category,iou,acc\nwater,0.4768,0.9206\nmeadow,,\noverall,0.4534,0.6334\ncat_acc,0.6485,\n");
    }

    fn arb_pair() -> impl Strategy<Value = (usize, Vec<u16>, Vec<u16>, Vec<u16>, Vec<u16>)> {
        (1usize..6, 1usize..10).prop_flat_map(|(n, len)| {
            let lbl = 0..n as u16;
            (
                Just(n),
                prop::collection::vec(lbl.clone(), len),
                prop::collection::vec(lbl.clone(), len),
                prop::collection::vec(lbl.clone(), len),
                prop::collection::vec(lbl, len),
            )
        })
    }

    proptest! {
        #[test]
        fn merge_is_associative_and_commutative((n, p1, g1, p2, g2) in arb_pair()) {
            let len = p1.len();
            let mk = |p: &[u16], g: &[u16]| {
                accumulate(
                    ConfusionMatrix::new(pool(n)),
                    &LabelRaster::new(1, len, p.to_vec()).unwrap(),
                    &LabelRaster::new(1, len, g.to_vec()).unwrap(),
                ).unwrap()
            };
            let (a, b, c) = (mk(&p1, &g1), mk(&p2, &g2), mk(&g1, &p2));
            let mut ab = a.clone(); ab.merge(&b).unwrap();
            let mut ba = b.clone(); ba.merge(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let mut ab_c = ab.clone(); ab_c.merge(&c).unwrap();
            let mut bc = b.clone(); bc.merge(&c).unwrap();
            let mut a_bc = a.clone(); a_bc.merge(&bc).unwrap();
            prop_assert_eq!(ab_c, a_bc);
        }

        #[test]
        fn jaccard_bounds(p in prop::collection::btree_set("[a-e]", 0..5), g in prop::collection::btree_set("[a-e]", 1..5)) {
            let j = jaccard(&p, &g);
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j == 1.0, p == g);
        }
    }
}
