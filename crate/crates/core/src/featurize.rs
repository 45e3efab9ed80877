//! Binary EHR featurization.
//!
//! Each numeric variable becomes a block of `bins_per_var` indicator bits
//! selecting a quantile range of its most recent value inside the observation
//! window; each categorical variable becomes a one-hot block over its
//! vocabulary. A missing variable is an all-zero block.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{observation_window, CohortConfig, CohortError, ObsValue, ObservationEvent, PatientStay, Window};
use crate::diagnosis::Diagnosis;
use crate::labels::DiagnosisLabels;
use crate::stats::{quantile_sorted, spearman};

pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeaturizeError {
    #[error("bad value for `{variable}`: {detail}")]
    BadValue { variable: String, detail: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid featurizer config: {0}")]
    Config(String),
    #[error("malformed featurizer data: {0}")]
    Format(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalVar {
    pub name: String,
    pub vocabulary: Vec<String>,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub numeric_vars: Vec<String>,
    #[serde(default)]
    pub categorical_vars: Vec<CategoricalVar>,
    #[serde(default = "default_bins")]
    pub bins_per_var: usize,
    /// Site variable name to canonical name.
    #[serde(default)]
    pub variable_map: BTreeMap<String, String>,
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), FeaturizeError> {
        let err = |m: String| Err(FeaturizeError::Config(m));
        if self.bins_per_var < 2 {
            return err(format!("bins_per_var must be >= 2, got {}", self.bins_per_var));
        }
        let mut names = BTreeSet::new();
        let all = self.numeric_vars.iter().chain(self.categorical_vars.iter().map(|c| &c.name));
        for name in all {
            if name.trim().is_empty() {
                return err("empty variable name".into());
            }
            if !names.insert(name.as_str()) {
                return err(format!("variable `{name}` listed twice"));
            }
        }
        for c in &self.categorical_vars {
            if c.vocabulary.is_empty() {
                return err(format!("categorical `{}` has an empty vocabulary", c.name));
            }
            let uniq: BTreeSet<_> = c.vocabulary.iter().collect();
            if uniq.len() != c.vocabulary.len() {
                return err(format!("categorical `{}` has duplicate tokens", c.name));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FeaturizeError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| FeaturizeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn canonical<'a>(&'a self, site_name: &'a str) -> &'a str {
        self.variable_map.get(site_name).map(String::as_str).unwrap_or(site_name)
    }
}

/// Latest value per canonical variable inside a window. Absent keys are missing.
pub type WindowValues = BTreeMap<String, ObsValue>;

/// Value of the most recent `var` event inside the window. Events carrying no
/// value are not observations. Equal timestamps resolve to the later event in
/// list order.
pub fn latest_value<'a>(events: &'a [ObservationEvent], var: &str, window: Window) -> Option<&'a ObsValue> {
    let mut best: Option<(i64, &ObsValue)> = None;
    for ev in events.iter().filter(|e| e.variable == var && window.contains(e.time)) {
        if let Some(v) = &ev.value {
            if best.is_none_or(|(t, _)| ev.time >= t) {
                best = Some((ev.time, v));
            }
        }
    }
    best.map(|(_, v)| v)
}

/// Collects the latest in-window value for every configured variable, after
/// mapping site names to canonical ones.
pub fn window_values(events: &[ObservationEvent], window: Window, cfg: &FeaturizerConfig) -> WindowValues {
    let wanted: BTreeSet<&str> =
        cfg.numeric_vars.iter().map(String::as_str).chain(cfg.categorical_vars.iter().map(|c| c.name.as_str())).collect();
    let mut best: BTreeMap<&str, (i64, &ObsValue)> = BTreeMap::new();
    for ev in events {
        let name = cfg.canonical(&ev.variable);
        if !wanted.contains(name) || !window.contains(ev.time) {
            continue;
        }
        let Some(v) = &ev.value else { continue };
        let slot = best.entry(name).or_insert((ev.time, v));
        if ev.time >= slot.0 {
            *slot = (ev.time, v);
        }
    }
    best.into_iter().map(|(k, (_, v))| (k.to_string(), v.clone())).collect()
}

pub fn stay_window_values(
    stay: &PatientStay,
    cohort: &CohortConfig,
    cfg: &FeaturizerConfig,
) -> Result<WindowValues, FeaturizeError> {
    let window = observation_window(stay, cohort)?;
    Ok(window_values(&stay.events, window, cfg))
}

fn numeric(variable: &str, v: &ObsValue) -> Result<f64, FeaturizeError> {
    let x = match v {
        ObsValue::Num(x) => *x,
        ObsValue::Token(s) => s.trim().parse::<f64>().map_err(|_| FeaturizeError::BadValue {
            variable: variable.to_string(),
            detail: format!("`{s}` is not numeric"),
        })?,
    };
    if !x.is_finite() {
        return Err(FeaturizeError::BadValue { variable: variable.to_string(), detail: "non-finite".into() });
    }
    Ok(x)
}

fn token(v: &ObsValue) -> String {
    match v {
        ObsValue::Token(s) => s.clone(),
        ObsValue::Num(x) => x.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericEncoding {
    pub name: String,
    /// Sorted, distinct cut points; at most `bins_per_var - 1` of them.
    pub edges: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Numeric,
    Categorical,
}

/// A variable's slot range in the feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFeaturizer {
    pub bins_per_var: usize,
    pub numeric: Vec<NumericEncoding>,
    pub categorical: Vec<CategoricalVar>,
    #[serde(default)]
    pub variable_map: BTreeMap<String, String>,
    pub d: usize,
}

/// Number of edges strictly below `v`; boundary values fall in the lower bin.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    edges.iter().filter(|&&e| e < v).count()
}

/// Quantile cut points at `k / bins` for `k = 1..bins`, duplicates collapsed.
/// A training column without spread yields no edges.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() || sorted[0] == sorted[sorted.len() - 1] {
        return Vec::new();
    }
    let mut edges: Vec<f64> = (1..bins).map(|k| quantile_sorted(&sorted, k as f64 / bins as f64)).collect();
    edges.dedup();
    edges
}

pub fn fit(train: &[WindowValues], cfg: &FeaturizerConfig) -> Result<FittedFeaturizer, FeaturizeError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(FeaturizeError::EmptyTrainingSet);
    }
    let mut numeric_blocks = Vec::with_capacity(cfg.numeric_vars.len());
    for name in &cfg.numeric_vars {
        let mut column = Vec::new();
        for row in train {
            if let Some(v) = row.get(name) {
                column.push(numeric(name, v)?);
            }
        }
        numeric_blocks.push(NumericEncoding { name: name.clone(), edges: quantile_edges(&column, cfg.bins_per_var) });
    }
    let d = cfg.bins_per_var * cfg.numeric_vars.len()
        + cfg.categorical_vars.iter().map(|c| c.vocabulary.len()).sum::<usize>();
    Ok(FittedFeaturizer {
        bins_per_var: cfg.bins_per_var,
        numeric: numeric_blocks,
        categorical: cfg.categorical_vars.clone(),
        variable_map: cfg.variable_map.clone(),
        d,
    })
}

impl FittedFeaturizer {
    pub fn expected_dim(&self) -> usize {
        self.bins_per_var * self.numeric.len() + self.categorical.iter().map(|c| c.vocabulary.len()).sum::<usize>()
    }

    /// Numeric blocks first in configured order, then categorical blocks.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::with_capacity(self.numeric.len() + self.categorical.len());
        let mut offset = 0;
        for n in &self.numeric {
            out.push(Block { name: n.name.clone(), kind: BlockKind::Numeric, range: offset..offset + self.bins_per_var });
            offset += self.bins_per_var;
        }
        for c in &self.categorical {
            let w = c.vocabulary.len();
            out.push(Block { name: c.name.clone(), kind: BlockKind::Categorical, range: offset..offset + w });
            offset += w;
        }
        out
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.blocks().into_iter().map(|b| b.name).collect()
    }

    pub fn config(&self) -> FeaturizerConfig {
        FeaturizerConfig {
            numeric_vars: self.numeric.iter().map(|n| n.name.clone()).collect(),
            categorical_vars: self.categorical.clone(),
            bins_per_var: self.bins_per_var,
            variable_map: self.variable_map.clone(),
        }
    }

    pub fn encode(&self, values: &WindowValues) -> Result<FeatureVector, FeaturizeError> {
        let mut bits = vec![false; self.d];
        let mut offset = 0;
        for n in &self.numeric {
            if let Some(v) = values.get(&n.name) {
                let x = numeric(&n.name, v)?;
                bits[offset + bin_index(&n.edges, x)] = true;
            }
            offset += self.bins_per_var;
        }
        for c in &self.categorical {
            if let Some(v) = values.get(&c.name) {
                let tok = token(v);
                if let Some(i) = c.vocabulary.iter().position(|t| *t == tok) {
                    bits[offset + i] = true;
                }
            }
            offset += c.vocabulary.len();
        }
        Ok(FeatureVector { bits })
    }

    /// Per-variable scalar: `bin index + 1` when present, 0 when missing.
    pub fn variable_signals(&self, v: &FeatureVector) -> Vec<f64> {
        self.blocks()
            .iter()
            .map(|b| match v.bits[b.range.clone()].iter().position(|&x| x) {
                Some(i) => (i + 1) as f64,
                None => 0.0,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("featurizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FeaturizeError> {
        let f: Self = serde_json::from_str(text).map_err(|e| FeaturizeError::Format(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), FeaturizeError> {
        let bad = |m: String| Err(FeaturizeError::Format(m));
        self.config().validate().map_err(|e| FeaturizeError::Format(e.to_string()))?;
        for n in &self.numeric {
            if n.edges.len() >= self.bins_per_var {
                return bad(format!("`{}` has {} edges for {} bins", n.name, n.edges.len(), self.bins_per_var));
            }
            if n.edges.iter().any(|e| !e.is_finite()) || n.edges.windows(2).any(|w| w[0] > w[1]) {
                return bad(format!("`{}` edges must be finite and sorted", n.name));
            }
        }
        if self.d != self.expected_dim() {
            return bad(format!("d = {} but blocks sum to {}", self.d, self.expected_dim()));
        }
        Ok(())
    }
}

/// Binary EHR feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub bits: Vec<bool>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Packs bits MSB-first into bytes and hex-encodes them (lowercase).
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.bits.len().div_ceil(8) * 2);
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    byte |= 0x80 >> i;
                }
            }
            s.push_str(&format!("{byte:02x}"));
        }
        s
    }

    pub fn from_hex(hex: &str, d: usize) -> Result<Self, FeaturizeError> {
        let nbytes = d.div_ceil(8);
        if hex.len() != nbytes * 2 || !hex.is_ascii() {
            return Err(FeaturizeError::Format(format!("expected {} hex chars for d = {d}", nbytes * 2)));
        }
        let mut bits = Vec::with_capacity(nbytes * 8);
        for i in 0..nbytes {
            let byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| FeaturizeError::Format(format!("bad hex byte at {}", 2 * i)))?;
            bits.extend((0..8).map(|k| byte & (0x80 >> k) != 0));
        }
        if bits[d..].iter().any(|&b| b) {
            return Err(FeaturizeError::Format("padding bits set".into()));
        }
        bits.truncate(d);
        Ok(Self { bits })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureRecord {
    patient_id: String,
    bits: String,
}

/// One `{"patient_id", "bits"}` object per line.
pub fn features_to_ndjson(rows: &[(String, FeatureVector)]) -> String {
    let mut s = String::new();
    for (id, v) in rows {
        let rec = FeatureRecord { patient_id: id.clone(), bits: v.to_hex() };
        s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn features_from_ndjson(text: &str, d: usize) -> Result<Vec<(String, FeatureVector)>, FeaturizeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec: FeatureRecord =
            serde_json::from_str(line).map_err(|e| FeaturizeError::Format(format!("line {}: {e}", i + 1)))?;
        out.push((rec.patient_id, FeatureVector::from_hex(&rec.bits, d)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessCorrelation {
    pub variable: String,
    pub diagnosis: Diagnosis,
    /// `None` when presence or the label is constant across patients.
    pub coefficient: Option<f64>,
}

/// Spearman correlation between each variable's presence indicator and each
/// diagnosis label.
pub fn missingness_correlation(
    encoded: &[FeatureVector],
    labels: &[DiagnosisLabels],
    featurizer: &FittedFeaturizer,
) -> Vec<MissingnessCorrelation> {
    assert_eq!(encoded.len(), labels.len(), "one label row per encoded patient");
    let mut out = Vec::new();
    for block in featurizer.blocks() {
        let presence: Vec<f64> =
            encoded.iter().map(|v| if v.bits[block.range.clone()].iter().any(|&b| b) { 1.0 } else { 0.0 }).collect();
        for d in Diagnosis::ALL {
            let y: Vec<f64> = labels.iter().map(|l| if l.get(d) { 1.0 } else { 0.0 }).collect();
            out.push(MissingnessCorrelation { variable: block.name.clone(), diagnosis: d, coefficient: spearman(&presence, &y) });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelSource;

    fn ev(var: &str, t: i64, v: f64) -> ObservationEvent {
        ObservationEvent { variable: var.into(), time: t, value: Some(ObsValue::Num(v)) }
    }

    fn cfg(numeric: &[&str]) -> FeaturizerConfig {
        FeaturizerConfig {
            numeric_vars: numeric.iter().map(|s| s.to_string()).collect(),
            categorical_vars: vec![CategoricalVar { name: "sex".into(), vocabulary: vec!["F".into(), "M".into()] }],
            bins_per_var: 5,
            variable_map: BTreeMap::new(),
        }
    }

    fn row(pairs: &[(&str, f64)]) -> WindowValues {
        pairs.iter().map(|&(k, v)| (k.to_string(), ObsValue::Num(v))).collect()
    }

    #[test]
    fn latest_value_cases() {
        let w = Window { start: 0, end: 180 };
        let events = vec![ev("hr", 60, 80.0), ev("hr", 120, 95.0), ev("rr", 200, 30.0)];
        assert_eq!(latest_value(&events, "hr", w), Some(&ObsValue::Num(95.0)));
        assert_eq!(latest_value(&events, "spo2", w), None);
        assert_eq!(latest_value(&events, "rr", w), None);
    }

    #[test]
    fn window_values_apply_variable_map() {
        let mut c = cfg(&["hr"]);
        c.variable_map.insert("Pulse".into(), "hr".into());
        let events = vec![ev("Pulse", 10, 70.0), ev("hr", 5, 60.0), ev("other", 10, 1.0)];
        let vals = window_values(&events, Window { start: 0, end: 100 }, &c);
        assert_eq!(vals.len(), 1);
        assert_eq!(vals["hr"], ObsValue::Num(70.0));
    }

    #[test]
    fn fit_edges() {
        let c = cfg(&["x"]);
        let train: Vec<_> = (1..=10).map(|i| row(&[("x", i as f64)])).collect();
        let f = fit(&train, &c).unwrap();
        for (got, want) in f.numeric[0].edges.iter().zip([2.8, 4.6, 6.4, 8.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(f.d, 7);
        let constant: Vec<_> = (0..3).map(|_| row(&[("x", 5.0)])).collect();
        assert!(fit(&constant, &c).unwrap().numeric[0].edges.is_empty());
        assert!(fit(&[row(&[("x", 7.0)])], &c).unwrap().numeric[0].edges.is_empty());
        assert!(fit(&[row(&[])], &c).unwrap().numeric[0].edges.is_empty());
        assert_eq!(fit(&[], &c), Err(FeaturizeError::EmptyTrainingSet));
    }

    #[test]
    fn encode_blocks() {
        let f = FittedFeaturizer {
            bins_per_var: 5,
            numeric: vec![NumericEncoding { name: "x".into(), edges: vec![2.8, 4.6, 6.4, 8.2] }],
            categorical: vec![CategoricalVar { name: "sex".into(), vocabulary: vec!["F".into(), "M".into()] }],
            variable_map: BTreeMap::new(),
            d: 7,
        };
        let block = |vals: WindowValues| f.encode(&vals).unwrap().bits[..5].to_vec();
        assert_eq!(block(row(&[("x", 5.0)])), vec![false, false, true, false, false]);
        assert_eq!(block(row(&[])), vec![false; 5]);
        assert_eq!(block(row(&[("x", 1.0)])), vec![true, false, false, false, false]);
        assert_eq!(block(row(&[("x", 2.8)])), vec![true, false, false, false, false]);
        assert_eq!(block(row(&[("x", 100.0)])), vec![false, false, false, false, true]);

        let mut vals = WindowValues::new();
        vals.insert("sex".into(), ObsValue::Token("M".into()));
        assert_eq!(f.encode(&vals).unwrap().bits[5..], [false, true]);
        vals.insert("sex".into(), ObsValue::Token("X".into()));
        assert_eq!(f.encode(&vals).unwrap().bits[5..], [false, false]);

        let bad = [("x".to_string(), ObsValue::Token("high".into()))].into_iter().collect();
        assert!(matches!(f.encode(&bad), Err(FeaturizeError::BadValue { .. })));
        assert!(matches!(f.encode(&row(&[("x", f64::NAN)])), Err(FeaturizeError::BadValue { .. })));
    }

    #[test]
    fn degenerate_edges_use_bin_zero() {
        let c = cfg(&["x"]);
        let f = fit(&[row(&[("x", 5.0)]), row(&[("x", 5.0)])], &c).unwrap();
        let v = f.encode(&row(&[("x", 9.0)])).unwrap();
        assert_eq!(v.bits[..5], [true, false, false, false, false]);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(&["x", "sex"]);
        assert!(c.validate().is_err());
        c = cfg(&["x"]);
        c.bins_per_var = 1;
        assert!(c.validate().is_err());
        c = cfg(&["x"]);
        c.categorical_vars[0].vocabulary.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hex_packing() {
        let v = FeatureVector { bits: vec![true, false, false, false, false, false, false, true, true] };
        assert_eq!(v.to_hex(), "8180");
        assert_eq!(FeatureVector::from_hex("8180", 9).unwrap(), v);
        assert!(FeatureVector::from_hex("8181", 9).is_err());
        assert!(FeatureVector::from_hex("81", 9).is_err());
        let rows = vec![("p1".to_string(), v.clone())];
        assert_eq!(features_from_ndjson(&features_to_ndjson(&rows), 9).unwrap(), rows);
    }

    #[test]
    fn featurizer_json_round_trip_and_checks() {
        let c = cfg(&["x", "y"]);
        let train: Vec<_> = (0..20).map(|i| row(&[("x", i as f64), ("y", (i * i) as f64)])).collect();
        let f = fit(&train, &c).unwrap();
        assert_eq!(FittedFeaturizer::from_json(&f.to_json()).unwrap(), f);
        let mut broken = f.clone();
        broken.d += 1;
        assert!(FittedFeaturizer::from_json(&broken.to_json()).is_err());
        broken = f.clone();
        broken.numeric[0].edges.reverse();
        assert!(FittedFeaturizer::from_json(&broken.to_json()).is_err());
    }

    fn labels(p: bool) -> DiagnosisLabels {
        DiagnosisLabels { pneumonia: p, heart_failure: false, copd: !p, source: LabelSource::ChartReview }
    }

    #[test]
    fn missingness_phi() {
        let c = cfg(&["x"]);
        let f = fit(&[row(&[("x", 1.0)]), row(&[("x", 2.0)])], &c).unwrap();
        let enc = |present: bool| f.encode(&if present { row(&[("x", 1.0)]) } else { row(&[]) }).unwrap();
        let encoded = vec![enc(true), enc(true), enc(false), enc(false)];
        let l = vec![labels(true), labels(false), labels(true), labels(false)];
        let r = missingness_correlation(&encoded, &l, &f);
        let get = |var: &str, d| r.iter().find(|m| m.variable == var && m.diagnosis == d).unwrap().coefficient;
        assert_eq!(get("x", Diagnosis::Pneumonia), Some(0.0));
        assert_eq!(get("x", Diagnosis::HeartFailure), None);
        assert_eq!(get("sex", Diagnosis::Pneumonia), None);

        let l = vec![labels(true), labels(true), labels(false), labels(false)];
        let r = missingness_correlation(&encoded, &l, &f);
        let get = |d| r.iter().find(|m| m.variable == "x" && m.diagnosis == d).unwrap().coefficient.unwrap();
        assert!((get(Diagnosis::Pneumonia) - 1.0).abs() < 1e-12);
        assert!((get(Diagnosis::Copd) + 1.0).abs() < 1e-12);
    }
}
