//! Road-detection metrics (precision, recall, F-measure sweep, AP, IoU) and
//! multi-class mIoU / mAcc. All reported values are percentages.

use crate::error::{bail, Error, Result};
use crate::kv::KvMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub pre: f64,
    pub rec: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub f1: f64,
    pub iou: f64,
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(pre: f64, rec: f64) -> f64 {
    if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    }
}

impl BinaryMetrics {
    /// Precision is 0 when nothing is predicted positive.
    pub fn from_counts(c: ConfusionCounts) -> Result<Self> {
        if c.tp + c.fn_ == 0 {
            return Err(Error::UndefinedRecall);
        }
        let pre = pct(c.tp, c.tp + c.fp);
        let rec = pct(c.tp, c.tp + c.fn_);
        Ok(BinaryMetrics {
            pre,
            rec,
            fpr: pct(c.fp, c.fp + c.tn),
            fnr: pct(c.fn_, c.fn_ + c.tp),
            f1: f_measure(pre, rec),
            iou: pct(c.tp, c.tp + c.fp + c.fn_),
        })
    }

    /// Derived quantities from published precision and recall percentages:
    /// `(f1, fnr)`.
    pub fn from_pre_rec(pre: f64, rec: f64) -> (f64, f64) {
        (f_measure(pre, rec), 100.0 - rec)
    }
}

fn check_binary(prob: &[f64], gt: &[u8]) -> Result<()> {
    if prob.len() != gt.len() {
        bail!(Dimension, "{} scores but {} labels", prob.len(), gt.len());
    }
    if let Some(&bad) = gt.iter().find(|&&g| g > 1) {
        bail!(Data, "binary ground truth holds label {bad}");
    }
    if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        bail!(Data, "score {p} outside [0, 1]");
    }
    if !gt.contains(&1) {
        return Err(Error::UndefinedRecall);
    }
    Ok(())
}

/// Pixel counts with `prob >= threshold` as the positive prediction.
pub fn binary_confusion(prob: &[f64], gt: &[u8], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in prob.iter().zip(gt) {
        match (p >= threshold, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn binary_metrics_at(prob: &[f64], gt: &[u8], threshold: f64) -> Result<BinaryMetrics> {
    check_binary(prob, gt)?;
    BinaryMetrics::from_counts(binary_confusion(prob, gt, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub max_f: f64,
    /// Index into `curve` of the best F-measure (first on ties).
    pub best: usize,
    pub ap: f64,
    pub curve: Vec<CurvePoint>,
}

/// Thresholds `i / (n - 1)` for `i in 0..n`.
pub fn sweep_thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Eleven-point interpolated average precision of a precision/recall curve
/// (percent inputs): mean over `r in {0, 0.1, .., 1}` of the best precision
/// at recall `>= r`.
pub fn eleven_point_ap(curve: &[CurvePoint]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 * 10.0;
            curve
                .iter()
                .filter(|p| p.recall >= r - 1e-9)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn max_f_and_ap(prob: &[f64], gt: &[u8], n_thresholds: usize) -> Result<ThresholdSweep> {
    if n_thresholds < 2 {
        bail!(Usage, "need at least 2 thresholds, got {n_thresholds}");
    }
    check_binary(prob, gt)?;
    let thresholds = sweep_thresholds(n_thresholds);
    // passes[k] counts pixels that clear exactly thresholds 0..k
    let mut pos = vec![0u64; n_thresholds + 1];
    let mut neg = vec![0u64; n_thresholds + 1];
    for (&p, &g) in prob.iter().zip(gt) {
        let k = thresholds.partition_point(|&t| t <= p);
        if g == 1 {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let (total_pos, total_neg) = (pos.iter().sum::<u64>(), neg.iter().sum::<u64>());
    let (mut below_pos, mut below_neg) = (0u64, 0u64);
    let mut curve = Vec::with_capacity(n_thresholds);
    for (i, &threshold) in thresholds.iter().enumerate() {
        // pixels clearing threshold i are those with k > i
        below_pos += pos[i];
        below_neg += neg[i];
        let c = ConfusionCounts {
            tp: total_pos - below_pos,
            fp: total_neg - below_neg,
            tn: below_neg,
            fn_: below_pos,
        };
        let m = BinaryMetrics::from_counts(c)?;
        curve.push(CurvePoint {
            threshold,
            precision: m.pre,
            recall: m.rec,
            f1: m.f1,
        });
    }
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.f1 > curve[best].f1 {
            best = i;
        }
    }
    Ok(ThresholdSweep {
        max_f: curve[best].f1,
        best,
        ap: eleven_point_ap(&curve),
        curve,
    })
}

/// Multi-class confusion accumulated over any number of masks. Rows are
/// ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MulticlassConfusion {
    n_cls: usize,
    ignore: u8,
    matrix: Vec<u64>,
    /// Valid ground-truth pixels whose prediction carried the ignore label.
    unpredicted: Vec<u64>,
}

impl MulticlassConfusion {
    pub fn new(n_cls: usize, ignore: u8) -> Self {
        MulticlassConfusion {
            n_cls,
            ignore,
            matrix: vec![0; n_cls * n_cls],
            unpredicted: vec![0; n_cls],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            bail!(Dimension, "{} predictions but {} labels", pred.len(), gt.len());
        }
        let n = self.n_cls;
        let bad = |v: u8| v != self.ignore && v as usize >= n;
        if let Some(&v) = pred.iter().chain(gt).find(|&&v| bad(v)) {
            bail!(Data, "label {v} outside 0..{n} and not the ignore label {}", self.ignore);
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == self.ignore {
                continue;
            }
            if p == self.ignore {
                self.unpredicted[g as usize] += 1;
            } else {
                self.matrix[g as usize * n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn matrix(&self) -> &[u64] {
        &self.matrix
    }

    pub fn gt_count(&self, c: usize) -> u64 {
        self.matrix[c * self.n_cls..(c + 1) * self.n_cls].iter().sum::<u64>() + self.unpredicted[c]
    }

    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.n_cls).map(|g| self.matrix[g * self.n_cls + c]).sum()
    }

    pub fn finish(&self) -> Result<MulticlassMetrics> {
        let n = self.n_cls;
        let mut per_class_iou = vec![None; n];
        let mut per_class_acc = vec![None; n];
        for c in 0..n {
            let gt = self.gt_count(c);
            if gt == 0 {
                continue;
            }
            let tp = self.matrix[c * n + c];
            let fp = self.pred_count(c) - tp;
            let fn_ = gt - tp;
            per_class_iou[c] = Some(pct(tp, tp + fp + fn_));
            per_class_acc[c] = Some(pct(tp, gt));
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        if per_class_iou.iter().all(Option::is_none) {
            return Err(Error::DegenerateBatch);
        }
        Ok(MulticlassMetrics {
            miou: mean(&per_class_iou),
            macc: mean(&per_class_acc),
            per_class_iou,
            per_class_acc,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassMetrics {
    pub miou: f64,
    pub macc: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
}

pub fn multiclass_miou_macc(pred: &[u8], gt: &[u8], n_cls: usize, ignore: u8) -> Result<MulticlassMetrics> {
    let mut conf = MulticlassConfusion::new(n_cls, ignore);
    conf.add(pred, gt)?;
    conf.finish()
}

/// Evaluation summary written as `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub binary: Option<(BinaryMetrics, f64, f64)>,
    pub multiclass: Option<MulticlassMetrics>,
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    /// `binary` holds the metrics at the best threshold plus `(max_f, ap)`.
    pub fn from_sweep(sweep: &ThresholdSweep, prob: &[f64], gt: &[u8]) -> Result<Self> {
        let at_best = binary_metrics_at(prob, gt, sweep.curve[sweep.best].threshold)?;
        Ok(MetricsReport {
            binary: Some((at_best, sweep.max_f, sweep.ap)),
            multiclass: None,
            curve: sweep.curve.clone(),
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        if let Some((m, max_f, ap)) = &self.binary {
            kv.insert("max_f", format!("{max_f:.4}"));
            kv.insert("ap", format!("{ap:.4}"));
            kv.insert("pre", format!("{:.4}", m.pre));
            kv.insert("rec", format!("{:.4}", m.rec));
            kv.insert("fpr", format!("{:.4}", m.fpr));
            kv.insert("fnr", format!("{:.4}", m.fnr));
            kv.insert("iou", format!("{:.4}", m.iou));
        }
        if let Some(m) = &self.multiclass {
            kv.insert("miou", format!("{:.4}", m.miou));
            kv.insert("macc", format!("{:.4}", m.macc));
            for (c, v) in m.per_class_iou.iter().enumerate() {
                let s = v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
                kv.insert(&format!("iou_class{c:02}"), s);
            }
        }
        kv
    }

    /// `threshold,precision,recall,f1` CSV of the sweep.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for p in &self.curve {
            s.push_str(&format!("{:.6},{:.6},{:.6},{:.6}\n", p.threshold, p.precision, p.recall, p.f1));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 1, 0, 1];
        let prob: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
        let m = binary_metrics_at(&prob, &gt, 0.5).unwrap();
        assert_eq!((m.pre, m.rec, m.f1, m.iou, m.fpr, m.fnr), (100.0, 100.0, 100.0, 100.0, 0.0, 0.0));
        let s = max_f_and_ap(&prob, &gt, 256).unwrap();
        assert_eq!((s.max_f, s.ap), (100.0, 100.0));
    }

    #[test]
    fn constant_half_scores() {
        let gt = [1, 0, 1, 0];
        let s = max_f_and_ap(&[0.5; 4], &gt, 256).unwrap();
        assert!((s.max_f - 200.0 / 3.0).abs() < 1e-9);
        assert!(s.curve.iter().all(|p| p.f1 <= s.max_f));
    }

    #[test]
    fn undefined_recall_and_bad_labels() {
        assert!(matches!(binary_metrics_at(&[0.3], &[0], 0.5), Err(Error::UndefinedRecall)));
        assert!(matches!(binary_metrics_at(&[0.3], &[2], 0.5), Err(Error::Data(_))));
        assert!(matches!(max_f_and_ap(&[0.3], &[1], 1), Err(Error::Usage(_))));
    }

    #[test]
    fn all_background_prediction_half_road() {
        let gt = [0, 0, 1, 1];
        let m = multiclass_miou_macc(&[0; 4], &gt, 2, 255).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(50.0), Some(0.0)]);
        assert_eq!(m.miou, 25.0);
        assert_eq!(m.macc, 50.0);
    }

    #[test]
    fn ignore_pixels_and_absent_classes() {
        let gt = [0, 255, 1, 1];
        let pred = [0, 2, 1, 255];
        let m = multiclass_miou_macc(&pred, &gt, 3, 255).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(100.0), Some(50.0), None]);
        assert!(multiclass_miou_macc(&[3], &[0], 3, 255).is_err());
        assert!(matches!(multiclass_miou_macc(&[0], &[255], 3, 255), Err(Error::DegenerateBatch)));
    }
}
