//! Evaluation metrics: balanced accuracy over the known classes, one-vs-rest
//! sensitivity/specificity, ROC AUC and the high-sensitivity partial AUC.
//!
//! Predictions are decided by argmax over all nine columns. An image whose
//! argmax is UNK lands in a separate "rejected" column and counts as a miss
//! for its true class.

use std::collections::HashMap;
use std::io::Read;

use serde::Serialize;

use crate::classes::{argmax, Label, KNOWN_CLASSES};
use crate::predictions::{PredictionMatrix, Probs};

/// Default sensitivity floor for AUC-S.
pub const AUC_S_FLOOR: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("label {0} is not one of the eight evaluated classes")]
    UnknownLabel(Label),
    #[error("class row {0} has no samples")]
    EmptyClassRow(usize),
    #[error("no class row has samples")]
    NoSamples,
    #[error("need at least one positive and one negative sample")]
    SingleClassLabels,
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("sensitivity floor {0} not in [0, 1)")]
    BadFloor(f64),
    #[error("no ground truth for image `{0}`")]
    MissingTruth(String),
    #[error("{file}: {reason}")]
    Truth { file: String, reason: String },
}

/// Counts with rows = true class and columns = predicted class, plus a
/// trailing rejected column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    /// Square matrix with an empty rejected column.
    pub fn from_square(rows: &[Vec<u64>]) -> Self {
        let c = rows.len();
        let mut m = Self::zeros(c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "confusion matrix must be square");
            for (j, &v) in row.iter().enumerate() {
                m.counts[i * (c + 1) + j] = v;
            }
        }
        m
    }

    /// Eight-class matrix from 9-column probability rows.
    pub fn from_predictions(probs: &[Probs], labels: &[Label]) -> Result<Self, MetricsError> {
        if probs.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(probs.len(), labels.len()));
        }
        let mut m = Self::zeros(KNOWN_CLASSES);
        for (p, &label) in probs.iter().zip(labels) {
            if !label.is_known() {
                return Err(MetricsError::UnknownLabel(label));
            }
            // UNK is index 8, which is exactly the rejected column
            m.add(label.index(), argmax(p));
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * (self.classes + 1) + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * (self.classes + 1) + predicted]
    }

    pub fn rejected(&self, truth: usize) -> u64 {
        self.get(truth, self.classes)
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        let w = self.classes + 1;
        &self.counts[truth * w..(truth + 1) * w]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Recall of one class, `None` for an empty row.
    pub fn sensitivity(&self, class: usize) -> Option<f64> {
        let n = self.row_total(class);
        (n > 0).then(|| self.get(class, class) as f64 / n as f64)
    }

    /// One-vs-rest specificity: `TN / (TN + FP)`, `None` with no negatives.
    pub fn specificity(&self, class: usize) -> Option<f64> {
        let negatives = self.total() - self.row_total(class);
        let fp: u64 = (0..self.classes).filter(|&t| t != class).map(|t| self.get(t, class)).sum();
        (negatives > 0).then(|| (negatives - fp) as f64 / negatives as f64)
    }
}

pub fn confusion(preds: &PredictionMatrix, labels: &[Label]) -> Result<ConfusionMatrix, MetricsError> {
    ConfusionMatrix::from_predictions(preds.probs(), labels)
}

/// Unweighted mean of per-class recalls; every class must have samples.
pub fn mean_sensitivity(conf: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for c in 0..conf.classes() {
        sum += conf.sensitivity(c).ok_or(MetricsError::EmptyClassRow(c))?;
    }
    Ok(sum / conf.classes() as f64)
}

/// Mean recall over the classes that occur; used on single validation folds
/// where a rare class may be missing.
pub fn mean_sensitivity_present(conf: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let present: Vec<f64> = (0..conf.classes()).filter_map(|c| conf.sensitivity(c)).collect();
    if present.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// ROC operating points plus the positive and negative totals.
type RocPoints = (Vec<(u64, u64)>, u64, u64);

/// Operating points of the empirical ROC curve as integer (FP, TP) counts,
/// from (0, 0) to (N, P); tied scores form a single step.
fn roc_points(scores: &[f64], positive: &[bool]) -> Result<RocPoints, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), positive.len()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(MetricsError::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0u64, 0u64)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp, tp));
    }
    Ok((points, p, n))
}

/// Area under the ROC curve, `P(pos > neg) + P(tie) / 2`.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64, MetricsError> {
    let (points, p, n) = roc_points(scores, positive)?;
    // twice the trapezoid area, in units of 1 / (P N): exact in integers
    let twice: u64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(twice as f64 / (2 * p * n) as f64)
}

/// Unnormalized area of the ROC region with TPR >= `floor`:
/// `∫_floor^1 (1 - FPR(t)) dt`, linearly interpolated at the crossing.
/// Equals `roc_auc` bit-for-bit at `floor = 0`.
pub fn auc_above_sensitivity_raw(scores: &[f64], positive: &[bool], floor: f64) -> Result<f64, MetricsError> {
    if !(0.0..1.0).contains(&floor) {
        return Err(MetricsError::BadFloor(floor));
    }
    let (points, p, n) = roc_points(scores, positive)?;
    let floor_tp = floor * p as f64;
    // integrate along TPR: segment contributes (2N - fp0 - fp1) * dtp,
    // in units of 1 / (2 P N)
    let mut exact: u64 = 0;
    let mut partial = 0.0;
    for w in points.windows(2) {
        let ((fp0, tp0), (fp1, tp1)) = (w[0], w[1]);
        if tp1 == tp0 || (tp1 as f64) <= floor_tp {
            continue;
        }
        if tp0 as f64 >= floor_tp {
            exact += (2 * n - fp0 - fp1) * (tp1 - tp0);
        } else {
            let frac = (floor_tp - tp0 as f64) / (tp1 - tp0) as f64;
            let fpc = fp0 as f64 + frac * (fp1 - fp0) as f64;
            partial += (2.0 * n as f64 - fpc - fp1 as f64) * (tp1 as f64 - floor_tp);
        }
    }
    Ok((exact as f64 + partial) / (2 * p * n) as f64)
}

/// AUC-S on a [0, 1] scale: the raw area is standardized so that a chance
/// (diagonal) ROC scores 0.5 and a perfect classifier scores 1.
///
/// `0.5 * (1 + (raw - lo) / (hi - lo))` with `lo = (1 - floor)^2 / 2`
/// (diagonal) and `hi = 1 - floor` (perfect). At `floor = 0` this is plain
/// ROC AUC.
pub fn auc_above_sensitivity(scores: &[f64], positive: &[bool], floor: f64) -> Result<f64, MetricsError> {
    let raw = auc_above_sensitivity_raw(scores, positive, floor)?;
    if floor == 0.0 {
        return Ok(raw);
    }
    let hi = 1.0 - floor;
    let lo = hi * hi / 2.0;
    Ok(0.5 * (1.0 + (raw - lo) / (hi - lo)))
}

/// One row of the per-class report.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: Label,
    pub positives: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Result<f64, MetricsError>,
    pub auc_s: Result<f64, MetricsError>,
    pub auc_s_raw: Result<f64, MetricsError>,
}

pub fn per_class_metrics(
    preds: &PredictionMatrix,
    labels: &[Label],
    floor: f64,
) -> Result<Vec<ClassReport>, MetricsError> {
    let conf = confusion(preds, labels)?;
    let probs = preds.probs();
    Ok((0..KNOWN_CLASSES)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|l| l.index() == c).collect();
            ClassReport {
                class: Label::from_index(c).expect("known class index"),
                positives: conf.row_total(c),
                sensitivity: conf.sensitivity(c),
                specificity: conf.specificity(c),
                auc: roc_auc(&scores, &positive),
                auc_s: auc_above_sensitivity(&scores, &positive, floor),
                auc_s_raw: auc_above_sensitivity_raw(&scores, &positive, floor),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSummary {
    pub class: String,
    pub positives: u64,
    pub auc: Option<f64>,
    pub auc_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_s_raw: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    /// Mean sensitivity over the classes present (all eight when complete).
    #[serde(rename = "S")]
    pub s: f64,
    pub classes_present: usize,
    pub images: usize,
    pub auc_s_floor: f64,
    pub per_class: Vec<ClassSummary>,
}

/// Evaluate predictions against truth; rows are matched by image id and
/// every prediction needs a label.
pub fn evaluate(
    preds: &PredictionMatrix,
    truth: &HashMap<String, Label>,
    floor: f64,
    include_raw: bool,
) -> Result<(EvalSummary, Vec<ClassReport>), MetricsError> {
    let labels = preds
        .ids()
        .iter()
        .map(|id| truth.get(id).copied().ok_or_else(|| MetricsError::MissingTruth(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let conf = confusion(preds, &labels)?;
    let s = mean_sensitivity_present(&conf)?;
    let reports = per_class_metrics(preds, &labels, floor)?;
    let per_class = reports
        .iter()
        .map(|r| ClassSummary {
            class: r.class.code().to_string(),
            positives: r.positives,
            auc: r.auc.clone().ok(),
            auc_s: r.auc_s.clone().ok(),
            auc_s_raw: if include_raw { r.auc_s_raw.clone().ok() } else { None },
            sensitivity: r.sensitivity,
            specificity: r.specificity,
        })
        .collect();
    let summary = EvalSummary {
        s,
        classes_present: (0..KNOWN_CLASSES).filter(|&c| conf.row_total(c) > 0).count(),
        images: labels.len(),
        auc_s_floor: floor,
        per_class,
    };
    Ok((summary, reports))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Per-class CSV (`class,auc,auc_s,sensitivity,specificity`, optionally
/// `auc_s_raw`); undefined values are left empty.
pub fn report_csv(reports: &[ClassReport], include_raw: bool) -> String {
    let mut out = String::from("class,auc,auc_s,sensitivity,specificity");
    if include_raw {
        out.push_str(",auc_s_raw");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.class.code(),
            cell(r.auc.clone().ok()),
            cell(r.auc_s.clone().ok()),
            cell(r.sensitivity),
            cell(r.specificity)
        ));
        if include_raw {
            out.push(',');
            out.push_str(&cell(r.auc_s_raw.clone().ok()));
        }
        out.push('\n');
    }
    out
}

/// Read ground truth from either a `label` column (manifest style) or
/// one-hot class columns (`image,MEL,NV,...`).
pub fn read_truth_csv<R: Read>(reader: R, file: &str) -> Result<HashMap<String, Label>, MetricsError> {
    let err = |reason: String| MetricsError::Truth {
        file: file.to_string(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let image_col = col("image").ok_or_else(|| err("missing `image` column".into()))?;
    let label_col = col("label");
    let onehot: Vec<Option<usize>> = Label::ALL.iter().map(|l| col(l.code())).collect();
    if label_col.is_none() && onehot.iter().any(Option::is_none) {
        return Err(err("need a `label` column or one column per class".into()));
    }
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let line = i + 2;
        let image = rec.get(image_col).unwrap_or_default().to_string();
        let label = if let Some(c) = label_col {
            rec.get(c)
                .unwrap_or_default()
                .parse::<Label>()
                .map_err(|e| err(format!("line {line}: {e}")))?
        } else {
            let values = onehot
                .iter()
                .map(|c| rec.get(c.unwrap()).unwrap_or_default().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| err(format!("line {line}: {e}")))?;
            Label::from_index(argmax(&values)).expect("class index")
        };
        if out.insert(image.clone(), label).is_some() {
            return Err(err(format!("line {line}: duplicate image `{image}`")));
        }
    }
    Ok(out)
}

pub fn read_truth_path(path: &std::path::Path) -> crate::Result<HashMap<String, Label>> {
    let f = std::fs::File::open(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(read_truth_csv(f, &path.display().to_string())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::NUM_CLASSES;
    use proptest::prelude::*;

    fn onehot(c: usize) -> Probs {
        let mut p = [0.0; NUM_CLASSES];
        p[c] = 1.0;
        p
    }

    #[test]
    fn two_class_example() {
        let m = ConfusionMatrix::from_square(&[vec![1, 1], vec![0, 2]]);
        assert_eq!(mean_sensitivity(&m).unwrap(), 0.75);
        let d = ConfusionMatrix::from_square(&[vec![3, 0, 0], vec![0, 1, 0], vec![0, 0, 7]]);
        assert_eq!(mean_sensitivity(&d).unwrap(), 1.0);
        let e = ConfusionMatrix::from_square(&[vec![3, 0], vec![0, 0]]);
        assert_eq!(mean_sensitivity(&e), Err(MetricsError::EmptyClassRow(1)));
        assert_eq!(mean_sensitivity_present(&e).unwrap(), 1.0);
    }

    #[test]
    fn unk_goes_to_rejected_column() {
        let labels: Vec<Label> = Label::ALL[..8].to_vec();
        let probs: Vec<Probs> = (0..8).map(|_| onehot(8)).collect();
        let m = ConfusionMatrix::from_predictions(&probs, &labels).unwrap();
        for c in 0..8 {
            assert_eq!(m.get(c, c), 0);
            assert_eq!(m.rejected(c), 1);
        }
        assert_eq!(mean_sensitivity(&m).unwrap(), 0.0);
        let perfect: Vec<Probs> = (0..8).map(onehot).collect();
        let m = ConfusionMatrix::from_predictions(&perfect, &labels).unwrap();
        assert_eq!(mean_sensitivity(&m).unwrap(), 1.0);
        assert_eq!(
            ConfusionMatrix::from_predictions(&[onehot(0)], &[Label::Unk]),
            Err(MetricsError::UnknownLabel(Label::Unk))
        );
    }

    #[test]
    fn three_image_hand_case() {
        // MEL -> NV, NV -> NV, BCC -> UNK
        let m = ConfusionMatrix::from_predictions(
            &[onehot(1), onehot(1), onehot(8)],
            &[Label::Mel, Label::Nv, Label::Bcc],
        )
        .unwrap();
        assert_eq!(m.get(0, 1), 1);
        assert_eq!(m.get(1, 1), 1);
        assert_eq!(m.rejected(2), 1);
        assert_eq!(m.total(), 3);
        assert_eq!(m.specificity(1), Some(0.5));
    }

    #[test]
    fn auc_examples() {
        let pos = [true, false, true, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.6], &pos).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8, 0.2], &pos).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClassLabels));
    }

    #[test]
    fn auc_s_examples() {
        let pos = [true, false, true, false];
        assert_eq!(auc_above_sensitivity(&[0.9, 0.1, 0.8, 0.2], &pos, 0.8).unwrap(), 1.0);
        let flat = auc_above_sensitivity(&[0.5; 4], &pos, 0.8).unwrap();
        assert!((flat - 0.5).abs() < 1e-12);
        let raw = auc_above_sensitivity_raw(&[0.5; 4], &pos, 0.8).unwrap();
        assert!((raw - 0.02).abs() < 1e-12);
        // 5 positives, 5 negatives: ROC steps (0,.2) (0,.4) (.2,.4) (.2,.6)
        // (.2,.8) (.4,.8) (.4,1) ... (1,1); above TPR .8 FPR is .4 -> .2 * .6
        let scores = [10., 9., 8., 7., 6., 5., 4., 3., 2., 1.];
        let labels = [true, true, false, true, true, false, true, false, false, false];
        let raw = auc_above_sensitivity_raw(&scores, &labels, 0.8).unwrap();
        assert!((raw - 0.12).abs() < 1e-12);
    }

    #[test]
    fn per_class_hand_case() {
        let labels = [Label::Mel, Label::Mel, Label::Nv, Label::Nv, Label::Bcc, Label::Bcc];
        let mut a = [0.0; NUM_CLASSES];
        a[0] = 0.6;
        a[1] = 0.4;
        let mut b = [0.0; NUM_CLASSES];
        b[0] = 0.3;
        b[1] = 0.7;
        let probs = vec![a, b, b, b, onehot(2), onehot(8)];
        let ids = (0..6).map(|i| format!("i{i}")).collect();
        let preds = PredictionMatrix::new(ids, probs).unwrap();
        let r = per_class_metrics(&preds, &labels, 0.8).unwrap();
        assert_eq!(r[0].sensitivity, Some(0.5));
        assert_eq!(r[0].specificity, Some(1.0));
        assert_eq!(r[1].sensitivity, Some(1.0));
        assert_eq!(r[1].specificity, Some(0.75));
        assert_eq!(r[2].sensitivity, Some(0.5));
        // MEL scores: pos {.6,.3}, neg {.3,.3,0,0}: 6 wins + 2 ties of 8 pairs
        assert_eq!(r[0].auc, Ok(7.0 / 8.0));
        assert_eq!(r[3].auc, Err(MetricsError::SingleClassLabels));
        assert_eq!(r[3].sensitivity, None);
    }

    #[test]
    fn truth_formats() {
        let a = read_truth_csv("image,label\nx,MEL\ny,NV\n".as_bytes(), "t").unwrap();
        assert_eq!(a["y"], Label::Nv);
        let b = read_truth_csv(
            "image,MEL,NV,BCC,AK,BKL,DF,VASC,SCC,UNK\nx,0,0,1,0,0,0,0,0,0\n".as_bytes(),
            "t",
        )
        .unwrap();
        assert_eq!(b["x"], Label::Bcc);
        assert!(read_truth_csv("image,foo\n".as_bytes(), "t").is_err());
    }

    proptest! {
        #[test]
        fn auc_properties(raw in prop::collection::vec((0u32..20, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            if let Ok(a) = roc_auc(&scores, &labels) {
                prop_assert_eq!(auc_above_sensitivity(&scores, &labels, 0.0).unwrap(), a);
                let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() - 7.0).collect();
                prop_assert_eq!(roc_auc(&warped, &labels).unwrap(), a);
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                let b = roc_auc(&neg, &labels).unwrap();
                let ties = scores.iter().enumerate().any(|(i, s)| scores[..i].contains(s));
                if !ties {
                    prop_assert!((a + b - 1.0).abs() < 1e-12);
                }
                let s = auc_above_sensitivity(&scores, &labels, 0.8).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!(auc_above_sensitivity_raw(&scores, &labels, 0.8).unwrap() <= a + 1e-12);
            }
        }
    }
}
