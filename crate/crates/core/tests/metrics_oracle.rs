//! Confusion-matrix metrics against direct per-pixel counting.

use geovocab_core::metrics::{overall, per_class_acc, per_class_iou, ConfusionMatrix};
use geovocab_core::model::{CategoryPool, LabelRaster, IGNORE_LABEL};
use proptest::prelude::*;

fn pool(n: usize) -> CategoryPool {
    CategoryPool::from_names(None, (0..n).map(|i| format!("k{i}"))).unwrap()
}

fn rasters() -> impl Strategy<Value = (usize, usize, usize, Vec<u16>, Vec<u16>)> {
    (1usize..9, 1usize..65, 1usize..65).prop_flat_map(|(n, h, w)| {
        let gt_label = prop_oneof![9 => 0..n as u16, 1 => Just(IGNORE_LABEL)];
        (
            Just(n),
            Just(h),
            Just(w),
            prop::collection::vec(0..n as u16, h * w),
            prop::collection::vec(gt_label, h * w),
        )
    })
}

/// IoU and accuracy per class by scanning pixels, plus pixel accuracy.
fn direct(n: usize, pred: &[u16], gt: &[u16]) -> (Vec<Option<f64>>, Vec<Option<f64>>, f64) {
    let mut iou = Vec::new();
    let mut acc = Vec::new();
    for k in 0..n as u16 {
        let (mut inter, mut union, mut gt_k) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            inter += u64::from(p == k && g == k);
            union += u64::from(p == k || g == k);
            gt_k += u64::from(g == k);
        }
        iou.push((union > 0).then(|| inter as f64 / union as f64));
        acc.push((gt_k > 0).then(|| inter as f64 / gt_k as f64));
    }
    let valid: Vec<_> = pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE_LABEL).collect();
    let correct = valid.iter().filter(|(p, g)| p == g).count();
    (iou, acc, correct as f64 / valid.len() as f64)
}

fn matrix(n: usize, h: usize, w: usize, pred: &[u16], gt: &[u16]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(pool(n));
    cm.accumulate(
        &LabelRaster::new(h, w, pred.to_vec()).unwrap(),
        &LabelRaster::new(h, w, gt.to_vec()).unwrap(),
    )
    .unwrap();
    cm
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn matrix_metrics_equal_direct_counts((n, h, w, pred, gt) in rasters()) {
        prop_assume!(gt.iter().any(|&g| g != IGNORE_LABEL));
        let cm = matrix(n, h, w, &pred, &gt);
        let (iou, acc, oa) = direct(n, &pred, &gt);
        for (ours, theirs) in per_class_iou(&cm).iter().zip(&iou) {
            prop_assert!(close(ours.value, *theirs));
        }
        for (ours, theirs) in per_class_acc(&cm).iter().zip(&acc) {
            prop_assert!(close(ours.value, *theirs));
        }
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        let (m, o) = overall(&cm).unwrap();
        prop_assert!((m - miou).abs() <= 1e-12);
        prop_assert!((o - oa).abs() <= 1e-12);
    }

    #[test]
    fn relabeling_permutes_per_class_and_keeps_overall(
        (n, h, w, pred, gt) in rasters(),
        seed in any::<u64>(),
    ) {
        prop_assume!(gt.iter().any(|&g| g != IGNORE_LABEL));
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<u16> = (0..n as u16).collect();
        perm.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
        let map = |l: u16| if l == IGNORE_LABEL { l } else { perm[usize::from(l)] };
        let pred2: Vec<u16> = pred.iter().map(|&l| map(l)).collect();
        let gt2: Vec<u16> = gt.iter().map(|&l| map(l)).collect();
        let (a, b) = (matrix(n, h, w, &pred, &gt), matrix(n, h, w, &pred2, &gt2));
        let (ia, ib) = (per_class_iou(&a), per_class_iou(&b));
        for k in 0..n {
            prop_assert_eq!(ia[k].value, ib[usize::from(perm[k])].value);
        }
        let (ma, oa) = overall(&a).unwrap();
        let (mb, ob) = overall(&b).unwrap();
        prop_assert!((ma - mb).abs() <= 1e-12);
        prop_assert_eq!(oa, ob);
    }
}
