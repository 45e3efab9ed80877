//! Patient stays, ARF onset detection, inclusion/exclusion rules, the EHR
//! observation window and radiograph study selection.
//!
//! Timestamps and durations are integer minutes. A stay is ingested from one
//! NDJSON line; lines that fail to parse or violate a stay invariant are
//! collected as [`Reject`]s rather than aborting the whole file.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::ChartReview;

/// Minutes since epoch.
pub type Timestamp = i64;
/// Minutes.
pub type Duration = i64;

pub const HOUR: Duration = 60;
pub const DAY: Duration = 24 * HOUR;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("stay has no ARF onset")]
    OnsetRequired,
    #[error("stay has no imaging study")]
    NoStudy,
    #[error("invalid stay: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A recorded observation value. Numbers and categorical tokens share one
/// JSON slot; `null` means the observation carried no value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObsValue {
    Num(f64),
    Token(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    pub variable: String,
    pub time: Timestamp,
    #[serde(default)]
    pub value: Option<ObsValue>,
}

/// Canonical respiratory support levels that define ARF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SupportKind {
    #[serde(rename = "HFNC")]
    Hfnc,
    #[serde(rename = "NIV")]
    Niv,
    #[serde(rename = "IMV")]
    Imv,
}

impl SupportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SupportKind::Hfnc => "HFNC",
            SupportKind::Niv => "NIV",
            SupportKind::Imv => "IMV",
        }
    }
}

impl fmt::Display for SupportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEvent {
    pub time: Timestamp,
    pub kind: SupportKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagingStudy {
    pub study_id: String,
    pub time: Timestamp,
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitInterval {
    pub unit_code: String,
    pub start: Timestamp,
    pub end: Timestamp,
}

/// One hospitalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientStay {
    pub patient_id: String,
    pub admit_time: Timestamp,
    #[serde(default)]
    pub events: Vec<ObservationEvent>,
    #[serde(default)]
    pub support_events: Vec<SupportEvent>,
    #[serde(default)]
    pub studies: Vec<ImagingStudy>,
    #[serde(default)]
    pub unit_intervals: Vec<UnitInterval>,
    #[serde(default)]
    pub reviews: Vec<ChartReview>,
    #[serde(default)]
    pub icd_codes: BTreeSet<String>,
    #[serde(default)]
    pub medications: BTreeSet<String>,
    /// Set at ingestion for stays admitted to an ICU after a surgical
    /// procedure, where the site has no unit-interval record of it.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub post_surgical: bool,
}

impl PatientStay {
    /// Checks the stay invariants. Called on every ingested line.
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |msg: String| Err(CohortError::Invalid(msg));
        if self.patient_id.trim().is_empty() {
            return bad("patient_id is empty".into());
        }
        let admit = self.admit_time;
        for ev in &self.events {
            if ev.variable.trim().is_empty() {
                return bad("observation with empty variable name".into());
            }
            if ev.time < admit {
                return bad(format!("observation `{}` at {} precedes admission", ev.variable, ev.time));
            }
            if let Some(ObsValue::Num(v)) = ev.value {
                if !v.is_finite() {
                    return bad(format!("non-finite value for `{}`", ev.variable));
                }
            }
        }
        for s in &self.support_events {
            if s.time < admit {
                return bad(format!("support event at {} precedes admission", s.time));
            }
        }
        let mut study_ids = HashSet::new();
        for st in &self.studies {
            if st.time < admit {
                return bad(format!("study `{}` precedes admission", st.study_id));
            }
            if st.image_refs.is_empty() {
                return bad(format!("study `{}` has no images", st.study_id));
            }
            if !study_ids.insert(st.study_id.as_str()) {
                return bad(format!("duplicate study_id `{}`", st.study_id));
            }
        }
        let mut by_unit: BTreeMap<&str, Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
        for u in &self.unit_intervals {
            if u.end < u.start {
                return bad(format!("unit `{}` interval ends before it starts", u.unit_code));
            }
            by_unit.entry(u.unit_code.as_str()).or_default().push((u.start, u.end));
        }
        for (unit, mut spans) in by_unit {
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[1].0 < w[0].1) {
                return bad(format!("overlapping intervals for unit `{unit}`"));
            }
        }
        for r in &self.reviews {
            r.validate().map_err(|e| CohortError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub onset_horizon: Duration,
    pub min_window: Duration,
    pub surgical_units: BTreeSet<String>,
    pub post_surgical_buffer: Duration,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            onset_horizon: 7 * DAY,
            min_window: DAY,
            surgical_units: ["CSURG", "NSURG", "ORTHO", "SURG", "TSURG", "VSURG"]
                .into_iter()
                .map(String::from)
                .collect(),
            post_surgical_buffer: DAY,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.onset_horizon <= 0 || self.min_window <= 0 || self.post_surgical_buffer <= 0 {
            return Err(CohortError::Invalid("cohort durations must be positive".into()));
        }
        Ok(())
    }
}

/// Earliest time the patient received significant respiratory support.
pub fn detect_arf_onset(stay: &PatientStay) -> Option<Timestamp> {
    stay.support_events.iter().map(|s| s.time).min()
}

/// True when onset lies inside a surgical unit interval, inside the
/// post-surgical buffer after one, or the stay carries the post-surgical flag.
/// Stays without an onset are never excluded here.
pub fn exclude_surgical(stay: &PatientStay, cfg: &CohortConfig) -> bool {
    if stay.post_surgical {
        return true;
    }
    let Some(onset) = detect_arf_onset(stay) else {
        return false;
    };
    stay.unit_intervals
        .iter()
        .filter(|u| cfg.surgical_units.contains(&u.unit_code))
        .any(|u| onset >= u.start && onset <= u.end + cfg.post_surgical_buffer)
}

pub fn include_stay(stay: &PatientStay, cfg: &CohortConfig) -> bool {
    let Some(onset) = detect_arf_onset(stay) else {
        return false;
    };
    onset - stay.admit_time <= cfg.onset_horizon && !stay.studies.is_empty() && !exclude_surgical(stay, cfg)
}

/// Closed time interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t <= self.end
    }
}

/// EHR extraction window: admission up to onset, but never shorter than
/// `cfg.min_window`.
pub fn observation_window(stay: &PatientStay, cfg: &CohortConfig) -> Result<Window, CohortError> {
    let onset = detect_arf_onset(stay).ok_or(CohortError::OnsetRequired)?;
    let admit = stay.admit_time;
    let end = if onset - admit > cfg.min_window { onset } else { admit + cfg.min_window };
    Ok(Window { start: admit, end })
}

/// Study nearest to onset. Equal distance prefers the earlier study; equal
/// times fall back to study id so the choice never depends on list order.
pub fn select_study(stay: &PatientStay) -> Result<&ImagingStudy, CohortError> {
    let onset = detect_arf_onset(stay).ok_or(CohortError::OnsetRequired)?;
    stay.studies
        .iter()
        .min_by(|a, b| {
            (a.time - onset)
                .abs()
                .cmp(&(b.time - onset).abs())
                .then(a.time.cmp(&b.time))
                .then_with(|| a.study_id.cmp(&b.study_id))
        })
        .ok_or(CohortError::NoStudy)
}

/// Maps site-specific support device strings onto [`SupportKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportAliases {
    map: BTreeMap<String, SupportKind>,
}

impl Default for SupportAliases {
    fn default() -> Self {
        let mut a = Self { map: BTreeMap::new() };
        for (k, v) in [
            ("hfnc", SupportKind::Hfnc),
            ("high flow nasal cannula", SupportKind::Hfnc),
            ("niv", SupportKind::Niv),
            ("bipap", SupportKind::Niv),
            ("bipap mask", SupportKind::Niv),
            ("cpap", SupportKind::Niv),
            ("noninvasive ventilation", SupportKind::Niv),
            ("imv", SupportKind::Imv),
            ("endotracheal tube", SupportKind::Imv),
            ("invasive mechanical ventilation", SupportKind::Imv),
        ] {
            a.insert(k, v);
        }
        a
    }
}

impl SupportAliases {
    pub fn insert(&mut self, site_name: &str, kind: SupportKind) {
        self.map.insert(normalize_alias(site_name), kind);
    }

    pub fn resolve(&self, site_name: &str) -> Option<SupportKind> {
        self.map.get(&normalize_alias(site_name)).copied()
    }
}

fn normalize_alias(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// A cohort line that was not accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    /// 1-based line number in the input file.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub stays: Vec<PatientStay>,
    pub rejects: Vec<Reject>,
}

/// Parses one NDJSON line into a validated stay, resolving support kind
/// aliases first.
pub fn parse_stay_line(line: &str, aliases: &SupportAliases) -> Result<PatientStay, CohortError> {
    let mut value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| CohortError::Parse(e.to_string()))?;
    if let Some(events) = value.get_mut("support_events").and_then(|v| v.as_array_mut()) {
        for ev in events {
            if let Some(kind) = ev.get_mut("kind") {
                let raw = kind
                    .as_str()
                    .ok_or_else(|| CohortError::Parse("support kind must be a string".into()))?;
                let resolved = aliases
                    .resolve(raw)
                    .ok_or_else(|| CohortError::Invalid(format!("unknown support kind `{raw}`")))?;
                *kind = serde_json::Value::String(resolved.as_str().to_string());
            }
        }
    }
    let stay: PatientStay = serde_json::from_value(value).map_err(|e| CohortError::Parse(e.to_string()))?;
    stay.validate()?;
    Ok(stay)
}

/// Parses a whole cohort file. Blank lines and lines starting with `#` are
/// skipped. A repeated patient id is rejected: one stay per patient.
pub fn parse_cohort(text: &str, aliases: &SupportAliases) -> Ingested {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_stay_line(trimmed, aliases) {
            Ok(stay) => {
                if seen.insert(stay.patient_id.clone()) {
                    out.stays.push(stay);
                } else {
                    out.rejects.push(Reject {
                        line: i + 1,
                        reason: format!("duplicate patient_id `{}`", stay.patient_id),
                    });
                }
            }
            Err(e) => out.rejects.push(Reject { line: i + 1, reason: e.to_string() }),
        }
    }
    out
}

pub fn read_cohort_file(path: &Path, aliases: &SupportAliases) -> io::Result<Ingested> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_cohort(&text, aliases))
}

/// Renders rejects as `line<TAB>reason` rows.
pub fn format_rejects(rejects: &[Reject]) -> String {
    let mut s = String::new();
    for r in rejects {
        s.push_str(&format!("{}\t{}\n", r.line, r.reason.replace(['\n', '\t'], " ")));
    }
    s
}

/// Serializes stays as NDJSON, one stay per line.
pub fn to_ndjson(stays: &[PatientStay]) -> String {
    let mut s = String::new();
    for stay in stays {
        s.push_str(&serde_json::to_string(stay).expect("stay serializes"));
        s.push('\n');
    }
    s
}
