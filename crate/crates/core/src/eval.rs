//! Patient splits, discrimination and calibration metrics, operating points,
//! cross-split summaries and the physician comparison.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{Diagnosis, PerDiagnosis};
use crate::labels::{physician_benchmark, ChartReview, LabelError};

pub const N_SPLITS: usize = 5;
pub const N_CAL_BINS: usize = 5;
pub const DEFAULT_TARGET_PPV: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("no threshold reaches PPV {0}")]
    PpvUnattainable(f64),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("no values to summarize")]
    Empty,
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "train" => Some(Role::Train),
            "val" => Some(Role::Val),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

/// One random partition of patients into train, validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub split_index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn role(&self, patient_id: &str) -> Option<Role> {
        if self.train.iter().any(|p| p == patient_id) {
            Some(Role::Train)
        } else if self.val.iter().any(|p| p == patient_id) {
            Some(Role::Val)
        } else if self.test.iter().any(|p| p == patient_id) {
            Some(Role::Test)
        } else {
            None
        }
    }

    pub fn members(&self, role: Role) -> &[String] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }
}

/// Five seeded shuffles of the sorted ids. Validation and test each get
/// `floor(n / 5)` patients; the remainder goes to train.
pub fn make_splits(patient_ids: &[String], seed: u64) -> Result<Vec<SplitAssignment>, EvalError> {
    if patient_ids.len() < N_SPLITS {
        return Err(EvalError::TooFewSamples { need: N_SPLITS, got: patient_ids.len() });
    }
    let mut ids = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    let n_hold = n / 5;
    let n_train = n - 2 * n_hold;
    Ok((0..N_SPLITS)
        .map(|split_index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(split_index as u64);
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            let test = order.split_off(n_train + n_hold);
            let val = order.split_off(n_train);
            SplitAssignment { split_index, train: order, val, test }
        })
        .collect())
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// Indices sorted by ascending score, stable.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Runs of equal scores over an ordering, as `(positives, negatives)` per block.
fn tie_blocks(order: &[usize], scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    for &i in order {
        match out.last_mut() {
            Some(last) if last.0 == scores[i] => {
                if labels[i] {
                    last.1 += 1;
                } else {
                    last.2 += 1;
                }
            }
            _ => out.push((scores[i], labels[i] as u64, (!labels[i]) as u64)),
        }
    }
    out
}

/// Mann-Whitney AUROC: `(concordant + ties / 2) / (P * N)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut neg_below = 0u64;
    // counted in half-pairs to stay in integers
    let mut twice = 0u64;
    for (_, p, n) in tie_blocks(&ascending(scores), scores, labels) {
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `sum (R_n - R_{n-1}) P_n` over descending tie blocks.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (_, p, n) in tie_blocks(&order, scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// ROC points `(threshold, fpr, tpr)` from the strictest threshold down,
/// starting at `(+inf, 0, 0)`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>, EvalError> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order = ascending(scores);
    order.reverse();
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, p, n) in tie_blocks(&order, scores, labels) {
        tp += p;
        fp += n;
        out.push((s, fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_pred: f64,
    pub frac_pos: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    /// Least-squares fit of observed fraction on mean prediction; `None` when
    /// every bin has the same mean prediction.
    pub line: Option<Line>,
    pub ece: f64,
}

/// Equal-count quintile bins over sorted predictions, lowest bins taking
/// the remainder.
pub fn calibration(preds: &[f64], labels: &[bool]) -> Result<Calibration, EvalError> {
    check(preds, labels)?;
    let n = preds.len();
    if n < N_CAL_BINS {
        return Err(EvalError::TooFewSamples { need: N_CAL_BINS, got: n });
    }
    let order = ascending(preds);
    let (base, rem) = (n / N_CAL_BINS, n % N_CAL_BINS);
    let mut bins = Vec::with_capacity(N_CAL_BINS);
    let mut start = 0;
    for b in 0..N_CAL_BINS {
        let size = base + usize::from(b < rem);
        let members = &order[start..start + size];
        start += size;
        let mean_pred = members.iter().map(|&i| preds[i]).sum::<f64>() / size as f64;
        let frac_pos = members.iter().filter(|&&i| labels[i]).count() as f64 / size as f64;
        bins.push(CalibrationBin { mean_pred, frac_pos, count: size });
    }
    let ece = bins.iter().map(|b| (b.mean_pred - b.frac_pos).abs()).sum::<f64>() / N_CAL_BINS as f64;
    Ok(Calibration { line: fit_line(&bins), bins, ece })
}

fn fit_line(bins: &[CalibrationBin]) -> Option<Line> {
    let k = bins.len() as f64;
    let mx = bins.iter().map(|b| b.mean_pred).sum::<f64>() / k;
    let my = bins.iter().map(|b| b.frac_pos).sum::<f64>() / k;
    let sxx: f64 = bins.iter().map(|b| (b.mean_pred - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = bins.iter().map(|b| (b.mean_pred - mx) * (b.frac_pos - my)).sum();
    let slope = sxy / sxx;
    Some(Line { slope, intercept: my - slope * mx })
}

/// Affine recalibration clamped to `[0, 1]`.
pub fn recalibrate(line: &Line, p: f64) -> f64 {
    (line.slope * p + line.intercept).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }

    pub fn ppv(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fp) as f64
    }
}

/// Diagnostic odds ratio; adds 0.5 to every cell when any cell is zero and
/// reports whether it did.
pub fn dor_from_confusion(c: &Confusion) -> (f64, bool) {
    let cells = [c.tp, c.fp, c.fn_, c.tn];
    if cells.contains(&0) {
        let [tp, fp, fn_, tn] = cells.map(|v| v as f64 + 0.5);
        ((tp * tn) / (fp * fn_), true)
    } else {
        let [tp, fp, fn_, tn] = cells.map(|v| v as f64);
        ((tp * tn) / (fp * fn_), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub dor: f64,
    pub dor_corrected: bool,
    pub confusion: Confusion,
}

/// Among thresholds equal to an observed prediction (positive when
/// `pred >= t`) whose PPV reaches the target, the one with the highest
/// sensitivity, then the highest specificity.
pub fn threshold_at_ppv(preds: &[f64], labels: &[bool], target: f64) -> Result<OperatingPoint, EvalError> {
    check(preds, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order = ascending(preds);
    order.reverse();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(f64, Confusion)> = None;
    for (t, p, n) in tie_blocks(&order, preds, labels) {
        tp += p;
        fp += n;
        let c = Confusion { tp, fp, fn_: pos - tp, tn: neg - fp };
        if c.ppv() < target {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, b)) => (c.tp, c.tn) > (b.tp, b.tn),
        };
        if better {
            best = Some((t, c));
        }
    }
    let (threshold, confusion) = best.ok_or(EvalError::PpvUnattainable(target))?;
    let (dor, dor_corrected) = dor_from_confusion(&confusion);
    Ok(OperatingPoint {
        threshold,
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        ppv: confusion.ppv(),
        dor,
        dor_corrected,
        confusion,
    })
}

pub fn macro_average(values: &PerDiagnosis<f64>) -> f64 {
    (values.pneumonia + values.heart_failure + values.copd) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Median and range. With an even count the median is the mean of the two
/// middle values; with five splits it is the third order statistic.
pub fn summarize_splits(values: &[f64]) -> Result<Summary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Ok(Summary { median, min: v[0], max: v[n - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub calibration: Option<Calibration>,
    /// Test ECE after applying the recalibration line fitted on validation.
    pub ece_recalibrated: Option<f64>,
    pub recalibration: Option<Line>,
    pub operating_point: Option<OperatingPoint>,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_diagnosis: PerDiagnosis<DiagnosisMetrics>,
    pub macro_auroc: Option<f64>,
    pub macro_aupr: Option<f64>,
    pub macro_ece: Option<f64>,
}

fn column(probs: &[[f64; 3]], d: Diagnosis) -> Vec<f64> {
    probs.iter().map(|p| p[d.index()]).collect()
}

fn label_column(labels: &[[bool; 3]], d: Diagnosis) -> Vec<bool> {
    labels.iter().map(|l| l[d.index()]).collect()
}

fn macro_of(m: &PerDiagnosis<DiagnosisMetrics>, f: impl Fn(&DiagnosisMetrics) -> Option<f64>) -> Option<f64> {
    PerDiagnosis::try_from_fn(|d| f(&m[d]).ok_or(())).ok().map(|v| macro_average(&v))
}

/// Test-set metrics; the recalibration line is fitted on validation
/// predictions. Metrics undefined on the data (single class, PPV target out
/// of reach) are reported as `None`.
pub fn evaluate_predictions(
    val_probs: &[[f64; 3]],
    val_labels: &[[bool; 3]],
    test_probs: &[[f64; 3]],
    test_labels: &[[bool; 3]],
) -> Result<MetricsReport, EvalError> {
    if val_probs.len() != val_labels.len() {
        return Err(EvalError::LengthMismatch(val_probs.len(), val_labels.len()));
    }
    if test_probs.len() != test_labels.len() {
        return Err(EvalError::LengthMismatch(test_probs.len(), test_labels.len()));
    }
    let per_diagnosis = PerDiagnosis::try_from_fn(|d| {
        let s = column(test_probs, d);
        let y = label_column(test_labels, d);
        let recal = calibration(&column(val_probs, d), &label_column(val_labels, d)).ok().and_then(|c| c.line);
        let cal = calibration(&s, &y).ok();
        let ece_recalibrated = match recal {
            Some(line) => {
                let adjusted: Vec<f64> = s.iter().map(|&p| recalibrate(&line, p)).collect();
                calibration(&adjusted, &y).ok().map(|c| c.ece)
            }
            None => None,
        };
        Ok::<_, EvalError>(DiagnosisMetrics {
            auroc: auroc(&s, &y).ok(),
            aupr: aupr(&s, &y).ok(),
            calibration: cal,
            ece_recalibrated,
            recalibration: recal,
            operating_point: threshold_at_ppv(&s, &y, DEFAULT_TARGET_PPV).ok(),
            prevalence: if y.is_empty() { 0.0 } else { y.iter().filter(|&&b| b).count() as f64 / y.len() as f64 },
        })
    })?;
    Ok(MetricsReport {
        macro_auroc: macro_of(&per_diagnosis, |m| m.auroc),
        macro_aupr: macro_of(&per_diagnosis, |m| m.aupr),
        macro_ece: macro_of(&per_diagnosis, |m| m.calibration.as_ref().map(|c| c.ece)),
        per_diagnosis,
    })
}

/// One `(diagnosis, metric, value)` row; `diagnosis` is `macro` for averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub diagnosis: String,
    pub metric: &'static str,
    pub value: f64,
}

impl MetricsReport {
    /// Flat rows in a fixed order; undefined metrics are omitted.
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        let mut push = |diagnosis: &str, metric: &'static str, value: Option<f64>| {
            if let Some(value) = value {
                rows.push(MetricRow { diagnosis: diagnosis.to_string(), metric, value });
            }
        };
        for (d, m) in self.per_diagnosis.iter() {
            let name = d.name();
            push(name, "prevalence", Some(m.prevalence));
            push(name, "auroc", m.auroc);
            push(name, "aupr", m.aupr);
            push(name, "ece", m.calibration.as_ref().map(|c| c.ece));
            push(name, "ece_recalibrated", m.ece_recalibrated);
            push(name, "recal_slope", m.recalibration.map(|l| l.slope));
            push(name, "recal_intercept", m.recalibration.map(|l| l.intercept));
            if let Some(op) = &m.operating_point {
                push(name, "threshold", Some(op.threshold));
                push(name, "sensitivity", Some(op.sensitivity));
                push(name, "specificity", Some(op.specificity));
                push(name, "ppv", Some(op.ppv));
                push(name, "dor", Some(op.dor));
                push(name, "dor_corrected", Some(f64::from(u8::from(op.dor_corrected))));
            }
        }
        push("macro", "auroc", self.macro_auroc);
        push("macro", "aupr", self.macro_aupr);
        push("macro", "ece", self.macro_ece);
        rows
    }
}

/// One patient with enough reviews for the physician benchmark, plus the
/// model's probabilities for that patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicianCase {
    pub reviews: Vec<ChartReview>,
    pub model_probs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicianComparison {
    pub n_patients: usize,
    pub physician_auroc: PerDiagnosis<Option<f64>>,
    pub model_auroc: PerDiagnosis<Option<f64>>,
    pub physician_macro: Option<f64>,
    pub model_macro: Option<f64>,
}

/// Scores a randomly held-out physician and the model against the
/// consensus of the remaining reviews. Diagnoses with a single consensus
/// class are reported as `None`.
pub fn physician_comparison<R: Rng + ?Sized>(cases: &[PhysicianCase], rng: &mut R) -> Result<PhysicianComparison, EvalError> {
    let mut phys: Vec<PerDiagnosis<f64>> = Vec::new();
    let mut model: Vec<[f64; 3]> = Vec::new();
    let mut consensus: Vec<[bool; 3]> = Vec::new();
    for case in cases.iter().filter(|c| c.reviews.len() >= 3) {
        let bench = physician_benchmark(&case.reviews, rng)?;
        phys.push(bench.scores());
        model.push(case.model_probs);
        consensus.push(bench.consensus.flags().to_array());
    }
    if phys.is_empty() {
        return Err(EvalError::Label(LabelError::TooFewReviews(0)));
    }
    let physician_auroc = PerDiagnosis::from_fn(|d| {
        let s: Vec<f64> = phys.iter().map(|p| p[d]).collect();
        auroc(&s, &label_column(&consensus, d)).ok()
    });
    let model_auroc = PerDiagnosis::from_fn(|d| auroc(&column(&model, d), &label_column(&consensus, d)).ok());
    let mac = |v: &PerDiagnosis<Option<f64>>| PerDiagnosis::try_from_fn(|d| v[d].ok_or(())).ok().map(|x| macro_average(&x));
    Ok(PhysicianComparison {
        n_patients: phys.len(),
        physician_macro: mac(&physician_auroc),
        model_macro: mac(&model_auroc),
        physician_auroc,
        model_auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &y).unwrap(), 0.5);
        assert_eq!(auroc(&[0.3; 4], &[true; 4]), Err(EvalError::SingleClass));
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
        assert!((aupr(&[0.4; 8], &[true, false, false, true, false, false, true, false]).unwrap() - 0.375).abs() < 1e-15);
        assert_eq!(aupr(&[0.1], &[false]), Err(EvalError::NoPositives));
    }

    #[test]
    fn splits_counts_and_determinism() {
        let ids: Vec<String> = (0..100).map(|i| format!("p{i:03}")).collect();
        let s = make_splits(&ids, 3).unwrap();
        assert_eq!(s.len(), 5);
        for a in &s {
            assert_eq!((a.train.len(), a.val.len(), a.test.len()), (60, 20, 20));
        }
        let ids101: Vec<String> = (0..101).map(|i| format!("p{i:03}")).collect();
        let s101 = make_splits(&ids101, 3).unwrap();
        assert_eq!((s101[0].train.len(), s101[0].val.len(), s101[0].test.len()), (61, 20, 20));
        assert_eq!(make_splits(&ids, 3).unwrap(), s);
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(make_splits(&rev, 3).unwrap(), s);
        assert!(s.iter().any(|a| a.test != s[0].test || a.val != s[0].val));
    }

    #[test]
    fn calibration_examples() {
        let preds = vec![0.5; 10];
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let c = calibration(&preds, &labels).unwrap();
        assert!(c.bins.iter().all(|b| b.mean_pred == 0.5 && b.frac_pos == 0.5));
        assert_eq!(c.ece, 0.0);
        assert_eq!(c.line, None);

        let labels: Vec<bool> = (0..10).map(|i| i < 4).collect();
        let preds: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let c = calibration(&preds, &labels).unwrap();
        assert_eq!(c.ece, 0.0);
        assert_eq!(c.line.unwrap().slope, 1.0);

        let c = calibration(&[0.0; 7], &[false; 7]).unwrap();
        assert_eq!(c.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2, 1, 1, 1]);
        assert!(calibration(&[0.1; 4], &[true; 4]).is_err());
    }

    #[test]
    fn recalibration_clamps() {
        let l = Line { slope: 2.0, intercept: -0.5 };
        assert_eq!(recalibrate(&l, 0.1), 0.0);
        assert_eq!(recalibrate(&l, 0.5), 0.5);
        assert_eq!(recalibrate(&l, 0.9), 1.0);
    }

    #[test]
    fn threshold_examples() {
        let op = threshold_at_ppv(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false], 0.5).unwrap();
        assert_eq!(op.threshold, 0.7);
        assert_eq!(op.sensitivity, 1.0);
        assert_eq!(op.specificity, 0.5);
        assert_eq!(op.dor, 5.0);
        assert!(op.dor_corrected);
        assert_eq!(dor_from_confusion(&Confusion { tp: 8, fn_: 2, fp: 2, tn: 8 }), (16.0, false));
        assert_eq!(dor_from_confusion(&Confusion { tp: 5, fn_: 5, fp: 5, tn: 5 }), (1.0, false));
        assert_eq!(
            threshold_at_ppv(&[0.9, 0.1], &[false, true], 0.6),
            Err(EvalError::PpvUnattainable(0.6))
        );
    }

    #[test]
    fn macro_and_summary() {
        assert!((macro_average(&PerDiagnosis::new(0.79, 0.83, 0.88)) - 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(macro_average(&PerDiagnosis::new(0.0, 1.0, 0.5)), 0.5);
        assert_eq!(
            summarize_splits(&[0.77, 0.79, 0.79, 0.79, 0.79]).unwrap(),
            Summary { median: 0.79, min: 0.77, max: 0.79 }
        );
        assert_eq!(summarize_splits(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap(), Summary { median: 3.0, min: 1.0, max: 5.0 });
    }

    fn review(id: &str, r: f64) -> ChartReview {
        ChartReview { reviewer_id: id.into(), scores: PerDiagnosis::new(r, r, r) }
    }

    #[test]
    fn physician_examples() {
        // held-out ratings 1, 4, 2 once the draw is fixed: make every review
        // of a patient identical so the held-out choice does not matter
        let cases: Vec<PhysicianCase> = [1.0, 4.0, 2.0]
            .iter()
            .map(|&r| PhysicianCase { reviews: vec![review("a", r), review("b", r), review("c", r)], model_probs: [0.5; 3] })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cmp = physician_comparison(&cases, &mut rng).unwrap();
        assert_eq!(cmp.physician_auroc.pneumonia, Some(1.0));
        assert_eq!(cmp.model_auroc.pneumonia, Some(0.5));

        let cases: Vec<PhysicianCase> = [(1.0, 1.0), (1.0, 4.0), (1.0, 2.0)]
            .iter()
            .map(|&(held, rest)| PhysicianCase {
                reviews: vec![review("a", held), review("b", rest), review("c", rest)],
                model_probs: [if rest < 2.5 { 1.0 } else { 0.0 }; 3],
            })
            .collect();
        let cmp = physician_comparison(&cases, &mut rng).unwrap();
        assert_eq!(cmp.model_auroc.copd, Some(1.0));
    }

    proptest! {
        #[test]
        fn auroc_matches_bruteforce(v in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|p| f64::from(p.0) / 5.0).collect();
            let y: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let a = auroc(&s, &y).unwrap();
            prop_assert!((a - brute_auroc(&s, &y)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
            prop_assert_eq!(auroc(&t, &y).unwrap(), a);
        }

        #[test]
        fn auroc_complement_without_ties(n in 2usize..30, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let mut y: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            y[0] = true;
            y[1] = false;
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert_eq!(auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap(), 1.0);
        }

        #[test]
        fn operating_point_meets_target(v in prop::collection::vec((0u8..10, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|p| f64::from(p.0) / 10.0).collect();
            let y: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            if let Ok(op) = threshold_at_ppv(&s, &y, 0.5) {
                let tp = s.iter().zip(&y).filter(|(&p, &l)| p >= op.threshold && l).count();
                let fp = s.iter().zip(&y).filter(|(&p, &l)| p >= op.threshold && !l).count();
                prop_assert!(tp as f64 / (tp + fp) as f64 >= 0.5);
                prop_assert_eq!(op.confusion.tp as usize, tp);
            }
        }

        #[test]
        fn split_roles_partition(n in 5usize..60, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            for a in make_splits(&ids, seed).unwrap() {
                let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), n);
                prop_assert_eq!(a.train.len() + a.val.len() + a.test.len(), n);
            }
        }
    }
}
