//! Confusion matrix, per-class IoU, mIoU and pixel accuracy.

use std::fmt::Write as _;

use crate::config::key_values;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// `counts[t * k + p]` pixels with truth `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidArgument(format!(
                "{classes} classes need {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose truth is not IGNORE.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        truth.check_classes(self.classes)?;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE {
                continue;
            }
            if p as usize >= self.classes {
                return Err(Error::Label(format!(
                    "predicted class {p} out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Classes with an empty union get no IoU and are left out of the mean.
    pub fn report(&self) -> Result<EvalReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("confusion matrix is empty".into()));
        }
        let k = self.classes;
        let diag: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|j| self.get(j, c)).sum();
                let union = row + col - self.get(c, c);
                (union > 0).then(|| self.get(c, c) as f64 / union as f64)
            })
            .collect();
        let valid: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(EvalReport {
            miou: valid.iter().sum::<f64>() / valid.len() as f64,
            pixel_acc: diag as f64 / total as f64,
            valid_classes: valid.len(),
            per_class_iou,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
    pub valid_classes: usize,
}

impl EvalReport {
    /// `key=value` lines; reals use the shortest exact decimal form so the
    /// document parses back bit for bit.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou={}", self.miou);
        let _ = writeln!(s, "pixel_acc={}", self.pixel_acc);
        let _ = writeln!(s, "valid_classes={}", self.valid_classes);
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "iou.{c}={v}"),
                None => writeln!(s, "iou.{c}=undefined"),
            }
            .expect("write to string");
        }
        s
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format { kind: "metrics", path: "<document>".into(), reason: m };
        let real = |k: &str, v: &str| v.parse::<f64>().map_err(|_| bad(format!("{k}: not a number: {v:?}")));
        let (mut miou, mut acc, mut valid) = (None, None, None);
        let mut ious: Vec<(usize, Option<f64>)> = Vec::new();
        for (k, v) in key_values(text).map_err(|e| bad(e.to_string()))? {
            match k.as_str() {
                "miou" => miou = Some(real(&k, &v)?),
                "pixel_acc" => acc = Some(real(&k, &v)?),
                "valid_classes" => valid = Some(v.parse().map_err(|_| bad(format!("valid_classes: {v:?}")))?),
                _ => {
                    let c = k
                        .strip_prefix("iou.")
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| bad(format!("unknown key {k:?}")))?;
                    let iou = if v == "undefined" { None } else { Some(real(&k, &v)?) };
                    ious.push((c, iou));
                }
            }
        }
        ious.sort_by_key(|p| p.0);
        if ious.iter().enumerate().any(|(i, p)| p.0 != i) {
            return Err(bad("per-class entries are not 0..K".into()));
        }
        Ok(EvalReport {
            per_class_iou: ious.into_iter().map(|p| p.1).collect(),
            miou: miou.ok_or_else(|| bad("missing miou".into()))?,
            pixel_acc: acc.ok_or_else(|| bad("missing pixel_acc".into()))?,
            valid_classes: valid.ok_or_else(|| bad("missing valid_classes".into()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_case() {
        let r = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 4]).unwrap().report().unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(4.0 / 6.0)]);
        assert!((r.miou - 0.583_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(r.pixel_acc, 0.75);
        assert_eq!(r.valid_classes, 2);
    }

    #[test]
    fn perfect_and_fully_wrong() {
        let mut cm = ConfusionMatrix::new(3);
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        cm.accumulate(&m, &m).unwrap();
        assert!((0..3).all(|i| (0..3).all(|j| i == j || cm.get(i, j) == 0)));
        let r = cm.report().unwrap();
        assert_eq!((r.miou, r.pixel_acc), (1.0, 1.0));

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&LabelMap::filled(2, 2, 1), &LabelMap::filled(2, 2, 0)).unwrap();
        let r = cm.report().unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.pixel_acc, 0.0);
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = ConfusionMatrix::from_counts(3, vec![3, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap().report().unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.valid_classes, 2);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignore_truth_is_skipped_and_range_is_checked() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&LabelMap::filled(1, 2, 7), &LabelMap::filled(1, 2, IGNORE)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.report().is_err());
        assert!(cm.accumulate(&LabelMap::filled(1, 2, 2), &LabelMap::filled(1, 2, 0)).is_err());
        assert!(cm.accumulate(&LabelMap::filled(1, 2, 0), &LabelMap::filled(1, 2, 3)).is_err());
    }

    #[test]
    fn matches_counting_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = |rng: &mut ChaCha8Rng| LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let (p, t) = (gen(&mut rng), gen(&mut rng));
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&p, &t).unwrap();
            let mut counts = [[0u64; 3]; 3];
            for i in 0..16 {
                counts[t.data[i] as usize][p.data[i] as usize] += 1;
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(cm.get(i, j), counts[i][j]);
                }
            }
            let r = cm.report().unwrap();
            let mut ious = Vec::new();
            for c in 0..3 {
                let (mut inter, mut uni) = (0, 0);
                for i in 0..16 {
                    let (a, b) = (p.data[i] == c, t.data[i] == c);
                    inter += (a && b) as u32;
                    uni += (a || b) as u32;
                }
                if uni > 0 {
                    ious.push(inter as f64 / uni as f64);
                }
            }
            let miou = ious.iter().sum::<f64>() / ious.len() as f64;
            let acc = (0..16).filter(|&i| p.data[i] == t.data[i]).count() as f64 / 16.0;
            assert!((r.miou - miou).abs() <= 1e-10 * miou.max(1e-300));
            assert!((r.pixel_acc - acc).abs() <= 1e-10 * acc.max(1e-300));
        }
    }

    #[test]
    fn document_round_trips() {
        let r = ConfusionMatrix::from_counts(3, vec![3, 1, 0, 2, 7, 0, 0, 0, 0]).unwrap().report().unwrap();
        let doc = r.to_document();
        assert!(doc.starts_with("miou="));
        assert!(doc.contains("iou.2=undefined"));
        assert_eq!(EvalReport::from_document(&doc).unwrap(), r);
        assert!(EvalReport::from_document("miou=0.5\n").is_err());
    }

    fn matrix(k: usize) -> impl Strategy<Value = ConfusionMatrix> {
        prop::collection::vec(0u64..20, k * k).prop_map(move |c| ConfusionMatrix::from_counts(k, c).unwrap())
    }

    proptest! {
        #[test]
        fn accumulation_is_order_independent(maps in prop::collection::vec((prop::collection::vec(0u8..3, 6), prop::collection::vec(0u8..3, 6)), 1..5)) {
            let pairs: Vec<(LabelMap, LabelMap)> = maps
                .into_iter()
                .map(|(p, t)| (LabelMap::new(2, 3, p).unwrap(), LabelMap::new(2, 3, t).unwrap()))
                .collect();
            let mut fwd = ConfusionMatrix::new(3);
            for (p, t) in &pairs {
                fwd.accumulate(p, t).unwrap();
            }
            let mut rev = ConfusionMatrix::new(3);
            for (p, t) in pairs.iter().rev() {
                let mut one = ConfusionMatrix::new(3);
                one.accumulate(p, t).unwrap();
                rev.merge(&one).unwrap();
            }
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn metrics_are_bounded_and_permutation_invariant(cm in matrix(4), perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
            prop_assume!(cm.total() > 0);
            let r = cm.report().unwrap();
            prop_assert!((0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.pixel_acc));
            let trace: u64 = (0..4).map(|c| cm.get(c, c)).sum();
            prop_assert_eq!(r.pixel_acc, trace as f64 / cm.total() as f64);
            let mut permuted = ConfusionMatrix::new(4);
            for i in 0..4 {
                for j in 0..4 {
                    permuted.counts[perm[i] * 4 + perm[j]] = cm.get(i, j);
                }
            }
            let rp = permuted.report().unwrap();
            prop_assert!((rp.miou - r.miou).abs() < 1e-12);
        }
    }
}
