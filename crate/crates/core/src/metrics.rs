//! Segmentation scoring and the cross-domain degradation measure.
//!
//! Scores come from one confusion matrix aggregated over a whole split,
//! never from per-image averages, so a result is reproducible from the
//! matrix alone. Classes absent from the ground truth are excluded from
//! the means. All percentages are on a 0..=100 scale.

use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

/// C×C pixel counts, rows are ground truth, columns are prediction.
/// Ignored pixels never enter the matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 || classes >= IGNORE_LABEL as usize {
            return Err(Error::invalid(format!(
                "class count must be in 1..{}, got {classes}",
                IGNORE_LABEL
            )));
        }
        Ok(ConfusionMatrix { classes, counts: vec![0; classes * classes] })
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(rows.len())?;
        for (t, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::invalid("confusion matrix must be square"));
            }
            for (p, &n) in row.iter().enumerate() {
                cm.counts[t * cm.classes + p] = n;
            }
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::invalid(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            if (t as usize) >= self.classes {
                return Err(Error::invalid(format!(
                    "truth label {t} out of range for {} classes",
                    self.classes
                )));
            }
            if (p as usize) >= self.classes {
                return Err(Error::invalid(format!(
                    "predicted label {p} out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds another matrix in; shard-and-sum is exact on integers.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(format!(
                "cannot merge {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<SegScores> {
        if self.total() == 0 {
            return Err(Error::invalid("confusion matrix holds no scored pixels"));
        }
        let c = self.classes;
        let mut row = vec![0u64; c];
        let mut col = vec![0u64; c];
        for t in 0..c {
            for p in 0..c {
                let n = self.count(t, p);
                row[t] += n;
                col[p] += n;
            }
        }
        let mut class_acc = Vec::with_capacity(c);
        let mut class_iou = Vec::with_capacity(c);
        let mut acc_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut present = 0usize;
        for i in 0..c {
            if row[i] == 0 {
                class_acc.push(None);
                class_iou.push(None);
                continue;
            }
            let tp = self.count(i, i) as f64;
            let acc = 100.0 * tp / row[i] as f64;
            let union = (row[i] + col[i]) as f64 - tp;
            let iou = 100.0 * tp / union;
            class_acc.push(Some(acc));
            class_iou.push(Some(iou));
            acc_sum += acc;
            iou_sum += iou;
            present += 1;
        }
        Ok(SegScores {
            mean_class_acc: acc_sum / present as f64,
            miou: iou_sum / present as f64,
            class_acc,
            class_iou,
        })
    }
}

/// Split-level scores. Per-class entries are `None` for classes with no
/// ground-truth pixels; those classes do not enter the means.
#[derive(Debug, Clone, PartialEq)]
pub struct SegScores {
    pub mean_class_acc: f64,
    pub miou: f64,
    pub class_acc: Vec<Option<f64>>,
    pub class_iou: Vec<Option<f64>>,
}

impl SegScores {
    pub fn csv_header(classes: usize) -> String {
        let mut s = String::from("run_id,split,acc,miou");
        for i in 0..classes {
            s.push_str(&format!(",acc_c{i}"));
        }
        for i in 0..classes {
            s.push_str(&format!(",iou_c{i}"));
        }
        s
    }

    pub fn csv_row(&self, run_id: &str, split: &str) -> String {
        let cell = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.2}"),
            None => String::new(),
        };
        let mut s = format!("{run_id},{split},{:.2},{:.2}", self.mean_class_acc, self.miou);
        for v in &self.class_acc {
            s.push(',');
            s.push_str(&cell(v));
        }
        for v in &self.class_iou {
            s.push(',');
            s.push_str(&cell(v));
        }
        s
    }

    pub fn reference(&self) -> ReferenceScore {
        ReferenceScore { acc: self.mean_class_acc, miou: self.miou }
    }
}

/// The (acc, mIoU) pair the degradation measure compares against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScore {
    pub acc: f64,
    pub miou: f64,
}

impl ReferenceScore {
    pub fn new(acc: f64, miou: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&acc) || !(0.0..=100.0).contains(&miou) {
            return Err(Error::invalid(format!(
                "scores must lie in 0..=100, got acc {acc}, miou {miou}"
            )));
        }
        Ok(ReferenceScore { acc, miou })
    }
}

/// Normalized degradation between a network's scores on its own domain and
/// on the shifted one, in percent: the mean of the two relative drops.
pub fn dataset_distance(reference: &ReferenceScore, on_shifted: &ReferenceScore) -> Result<f64> {
    if reference.acc <= 0.0 || reference.miou <= 0.0 {
        return Err(Error::invalid(format!(
            "reference scores must be positive, got acc {}, miou {}",
            reference.acc, reference.miou
        )));
    }
    Ok(100.0
        * 0.5
        * ((reference.acc - on_shifted.acc).abs() / reference.acc
            + (reference.miou - on_shifted.miou).abs() / reference.miou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_scores_100() {
        let cm = ConfusionMatrix::from_rows(&[&[5, 0, 0], &[0, 9, 0], &[0, 0, 2]]).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(s.mean_class_acc, 100.0);
        assert_eq!(s.miou, 100.0);
    }

    #[test]
    fn two_class_hand_arithmetic() {
        let cm = ConfusionMatrix::from_rows(&[&[3, 1], &[2, 4]]).unwrap();
        let s = cm.scores().unwrap();
        assert!((s.class_iou[0].unwrap() - 100.0 * 3.0 / 6.0).abs() < 1e-12);
        assert!((s.class_iou[1].unwrap() - 100.0 * 4.0 / 7.0).abs() < 1e-12);
        assert!((s.miou - 53.57).abs() < 0.01, "miou {}", s.miou);
        let want_acc = 100.0 * (3.0 / 4.0 + 4.0 / 6.0) / 2.0;
        assert!((s.mean_class_acc - want_acc).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_collapses_to_100_over_c() {
        for c in [5usize, 21] {
            let mut cm = ConfusionMatrix::new(c).unwrap();
            // Every class present in truth, predictor always says 0.
            for t in 0..c {
                let truth = vec![t as u8; 3 + t];
                let pred = vec![0u8; 3 + t];
                cm.accumulate(&pred, &truth).unwrap();
            }
            let s = cm.scores().unwrap();
            assert!(
                (s.mean_class_acc - 100.0 / c as f64).abs() < 1e-9,
                "C={c}: acc {}",
                s.mean_class_acc
            );
        }
        // C = 21 prints as the familiar collapse value.
        assert_eq!(format!("{:.2}", 100.0 / 21.0), "4.76");
    }

    #[test]
    fn accumulate_counts_and_ignores() {
        let mut cm = ConfusionMatrix::new(4).unwrap();
        cm.accumulate(&[2; 10], &[2; 10]).unwrap();
        assert_eq!(cm.count(2, 2), 10);
        assert_eq!(cm.total(), 10);

        let before = cm.clone();
        cm.accumulate(&[1, 0, 3], &[IGNORE_LABEL; 3]).unwrap();
        assert_eq!(cm, before);

        cm.accumulate(&[1, 1, 0, 2], &[1, 0, 0, 2]).unwrap();
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(2, 2), 11);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        assert!(cm.accumulate(&[3], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[7]).is_err());
        assert!(cm.accumulate(&[0, 1], &[0]).is_err());
        // 255 in truth is ignore, not out of range.
        assert!(cm.accumulate(&[0], &[IGNORE_LABEL]).is_ok());
    }

    #[test]
    fn empty_matrix_has_no_scores() {
        let cm = ConfusionMatrix::new(3).unwrap();
        assert!(cm.scores().is_err());
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        let cm = ConfusionMatrix::from_rows(&[&[4, 0, 0], &[0, 0, 0], &[1, 0, 3]]).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(s.class_acc[1], None);
        assert_eq!(s.class_iou[1], None);
        let acc0 = 100.0;
        let acc2 = 75.0;
        assert!((s.mean_class_acc - (acc0 + acc2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sharded_accumulation_is_exact() {
        let pred: Vec<u8> = (0..997).map(|i| (i * 7 % 5) as u8).collect();
        let truth: Vec<u8> = (0..997)
            .map(|i| if i % 11 == 0 { IGNORE_LABEL } else { (i * 3 % 5) as u8 })
            .collect();
        let mut whole = ConfusionMatrix::new(5).unwrap();
        whole.accumulate(&pred, &truth).unwrap();
        let mut a = ConfusionMatrix::new(5).unwrap();
        let mut b = ConfusionMatrix::new(5).unwrap();
        a.accumulate(&pred[..400], &truth[..400]).unwrap();
        b.accumulate(&pred[400..], &truth[400..]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn degradation_measure_matches_published_values() {
        let reference = ReferenceScore::new(79.92, 69.22).unwrap();
        let cases = [((54.73, 46.07), 32.48), ((31.76, 24.28), 62.59), ((5.18, 3.78), 94.03)];
        for ((acc, miou), want) in cases {
            let d = dataset_distance(&reference, &ReferenceScore::new(acc, miou).unwrap()).unwrap();
            assert!((d - want).abs() <= 0.01, "({acc},{miou}): got {d}, want {want}");
        }
        assert_eq!(dataset_distance(&reference, &reference).unwrap(), 0.0);
    }

    #[test]
    fn degradation_measure_rejects_zero_reference() {
        let zero = ReferenceScore { acc: 0.0, miou: 50.0 };
        assert!(dataset_distance(&zero, &zero).is_err());
    }

    #[test]
    fn csv_row_shape() {
        let cm = ConfusionMatrix::from_rows(&[&[3, 1], &[2, 4]]).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(SegScores::csv_header(2), "run_id,split,acc,miou,acc_c0,acc_c1,iou_c0,iou_c1");
        let row = s.csv_row("t3", "val");
        assert_eq!(row.split(',').count(), 8);
        assert!(row.starts_with("t3,val,70.83,53.57"), "{row}");
    }

    fn arb_matrix() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6)
            .prop_flat_map(|c| {
                proptest::collection::vec(0u64..50, c * c).prop_map(move |counts| {
                    ConfusionMatrix { classes: c, counts }
                })
            })
            .prop_filter("needs scored pixels on some diagonal row", |cm| {
                (0..cm.classes).any(|i| (0..cm.classes).map(|p| cm.count(i, p)).sum::<u64>() > 0)
            })
    }

    proptest! {
        #[test]
        fn per_class_iou_never_exceeds_per_class_acc(cm in arb_matrix()) {
            let s = cm.scores().unwrap();
            for i in 0..cm.classes() {
                if let (Some(acc), Some(iou)) = (s.class_acc[i], s.class_iou[i]) {
                    prop_assert!(iou <= acc + 1e-9);
                }
            }
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s.mean_class_acc));
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s.miou));
        }

        #[test]
        fn scores_are_permutation_equivariant(cm in arb_matrix(), shift in 1usize..5) {
            let c = cm.classes();
            let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
            let mut permuted = ConfusionMatrix::new(c).unwrap();
            for t in 0..c {
                for p in 0..c {
                    permuted.counts[perm[t] * c + perm[p]] = cm.count(t, p);
                }
            }
            let a = cm.scores().unwrap();
            let b = permuted.scores().unwrap();
            prop_assert!((a.mean_class_acc - b.mean_class_acc).abs() < 1e-9);
            prop_assert!((a.miou - b.miou).abs() < 1e-9);
            for i in 0..c {
                prop_assert_eq!(a.class_iou[i], b.class_iou[perm[i]]);
            }
        }

        #[test]
        fn degradation_is_zero_iff_components_match(
            ra in 1.0f64..100.0, rm in 1.0f64..100.0,
            sa in 0.0f64..100.0, sm in 0.0f64..100.0,
        ) {
            let reference = ReferenceScore { acc: ra, miou: rm };
            let shifted = ReferenceScore { acc: sa, miou: sm };
            let d = dataset_distance(&reference, &shifted).unwrap();
            prop_assert!(d >= 0.0);
            if ra == sa && rm == sm {
                prop_assert_eq!(d, 0.0);
            } else {
                prop_assert!(d > 0.0);
            }
            // Which component is called acc does not matter.
            let flipped = dataset_distance(
                &ReferenceScore { acc: rm, miou: ra },
                &ReferenceScore { acc: sm, miou: sa },
            ).unwrap();
            prop_assert!((d - flipped).abs() < 1e-9);
        }
    }
}
