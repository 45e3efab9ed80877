//! Diagnosis labels from physician chart reviews and from ICD-10 plus
//! medication phenotype rules, inter-rater agreement, and the held-out
//! physician benchmark.
//!
//! Ratings run from 1 (very likely) to 4 (unlikely). A diagnosis is assigned
//! when the mean rating is strictly below 2.5, the midpoint of the scale.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientStay;
use crate::diagnosis::{Diagnosis, PerDiagnosis};

/// Mean ratings strictly below this assign the diagnosis.
pub const ASSIGN_BELOW: f64 = 2.5;
pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("no chart reviews")]
    NoReviews,
    #[error("physician benchmark needs at least 3 reviews, got {0}")]
    TooFewReviews(usize),
    #[error("degenerate marginals for {0}: expected agreement is 1")]
    DegenerateMarginals(Diagnosis),
    #[error("no patient has two or more reviews")]
    NoPairs,
    #[error("rating {rating} for {diagnosis} outside [1, 4]")]
    BadRating { diagnosis: Diagnosis, rating: f64 },
    #[error("invalid ruleset: {0}")]
    Ruleset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartReview {
    pub reviewer_id: String,
    pub scores: PerDiagnosis<f64>,
}

impl ChartReview {
    pub fn validate(&self) -> Result<(), LabelError> {
        for (d, &r) in self.scores.iter() {
            if !(MIN_RATING..=MAX_RATING).contains(&r) {
                return Err(LabelError::BadRating { diagnosis: d, rating: r });
            }
        }
        Ok(())
    }

    /// This reviewer's own binary call.
    pub fn assigns(&self, d: Diagnosis) -> bool {
        self.scores[d] < ASSIGN_BELOW
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelSource {
    ChartReview,
    CodeMed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisLabels {
    pub pneumonia: bool,
    pub heart_failure: bool,
    pub copd: bool,
    pub source: LabelSource,
}

impl DiagnosisLabels {
    pub fn from_per_diagnosis(flags: PerDiagnosis<bool>, source: LabelSource) -> Self {
        Self { pneumonia: flags.pneumonia, heart_failure: flags.heart_failure, copd: flags.copd, source }
    }

    pub fn get(&self, d: Diagnosis) -> bool {
        match d {
            Diagnosis::Pneumonia => self.pneumonia,
            Diagnosis::HeartFailure => self.heart_failure,
            Diagnosis::Copd => self.copd,
        }
    }

    pub fn flags(&self) -> PerDiagnosis<bool> {
        PerDiagnosis::from_fn(|d| self.get(d))
    }

    pub fn as_targets(&self) -> [f64; 3] {
        Diagnosis::ALL.map(|d| if self.get(d) { 1.0 } else { 0.0 })
    }
}

/// Consensus labels: per diagnosis, mean rating across reviews `< 2.5`.
pub fn aggregate_reviews(reviews: &[ChartReview]) -> Result<DiagnosisLabels, LabelError> {
    if reviews.is_empty() {
        return Err(LabelError::NoReviews);
    }
    let n = reviews.len() as f64;
    let flags = PerDiagnosis::from_fn(|d| {
        let mean = reviews.iter().map(|r| r.scores[d]).sum::<f64>() / n;
        mean < ASSIGN_BELOW
    });
    Ok(DiagnosisLabels::from_per_diagnosis(flags, LabelSource::ChartReview))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeRule {
    pub icd: BTreeSet<String>,
    pub medications: BTreeSet<String>,
}

/// ICD-10 code and medication lists per diagnosis. Codes are stored
/// uppercased with dots kept; medications are matched case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeRuleset(pub PerDiagnosis<PhenotypeRule>);

const DEFAULT_RULESET: &str = include_str!("../data/ruleset_default.json");

impl PhenotypeRuleset {
    pub fn from_json(text: &str) -> Result<Self, LabelError> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| LabelError::Ruleset(e.to_string()))?;
        if let Some(m) = value.as_object_mut() {
            m.remove("provenance");
        }
        let raw: PerDiagnosis<PhenotypeRule> =
            serde_json::from_value(value).map_err(|e| LabelError::Ruleset(e.to_string()))?;
        let rules = PerDiagnosis::try_from_fn(|d| {
            let r = &raw[d];
            let icd: BTreeSet<String> = r.icd.iter().map(|c| normalize_code(c)).filter(|c| !c.is_empty()).collect();
            let medications: BTreeSet<String> =
                r.medications.iter().map(|m| normalize_med(m)).filter(|m| !m.is_empty()).collect();
            if icd.is_empty() || medications.is_empty() {
                return Err(LabelError::Ruleset(format!("{d}: code and medication lists must be non-empty")));
            }
            Ok(PhenotypeRule { icd, medications })
        })?;
        Ok(Self(rules))
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabelError::Ruleset(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Bundled ICD-10 and medication lists.
    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULESET).expect("bundled ruleset is valid")
    }

    pub fn rule(&self, d: Diagnosis) -> &PhenotypeRule {
        &self.0[d]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("ruleset serializes")
    }
}

pub fn normalize_code(code: &str) -> String {
    code.trim().to_uppercase()
}

pub fn normalize_med(med: &str) -> String {
    med.trim().to_lowercase()
}

/// Diagnosis assigned iff the stay has a matching ICD-10 code AND received a
/// matching medication.
pub fn code_med_label(stay: &PatientStay, ruleset: &PhenotypeRuleset) -> DiagnosisLabels {
    let codes: BTreeSet<String> = stay.icd_codes.iter().map(|c| normalize_code(c)).collect();
    let meds: BTreeSet<String> = stay.medications.iter().map(|m| normalize_med(m)).collect();
    let flags = PerDiagnosis::from_fn(|d| {
        let rule = ruleset.rule(d);
        !codes.is_disjoint(&rule.icd) && !meds.is_disjoint(&rule.medications)
    });
    DiagnosisLabels::from_per_diagnosis(flags, LabelSource::CodeMed)
}

/// Pooled 2x2 agreement table. `a` both assign, `b` first only, `c` second
/// only, `d` neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgreementTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl AgreementTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn raw_agreement(&self) -> f64 {
        (self.a + self.d) as f64 / self.total() as f64
    }

    /// Expected chance agreement from the row and column marginals.
    pub fn expected_agreement(&self) -> f64 {
        let n = self.total() as f64;
        let first_yes = (self.a + self.b) as f64;
        let second_yes = (self.a + self.c) as f64;
        (first_yes * second_yes + (n - first_yes) * (n - second_yes)) / (n * n)
    }

    /// Cohen's kappa, `None` when chance agreement is 1.
    pub fn kappa(&self) -> Option<f64> {
        if self.total() == 0 {
            return None;
        }
        let po = self.raw_agreement();
        let pe = self.expected_agreement();
        if pe >= 1.0 {
            return None;
        }
        Some((po - pe) / (1.0 - pe))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub table: AgreementTable,
    pub kappa: f64,
    pub raw_agreement: f64,
}

/// Builds the pooled table for one diagnosis from every unordered reviewer
/// pair within each patient.
pub fn pooled_table(patient_reviews: &[Vec<ChartReview>], d: Diagnosis) -> AgreementTable {
    let mut t = AgreementTable::default();
    for reviews in patient_reviews {
        for (i, first) in reviews.iter().enumerate() {
            for second in &reviews[i + 1..] {
                match (first.assigns(d), second.assigns(d)) {
                    (true, true) => t.a += 1,
                    (true, false) => t.b += 1,
                    (false, true) => t.c += 1,
                    (false, false) => t.d += 1,
                }
            }
        }
    }
    t
}

pub fn rater_agreement(patient_reviews: &[Vec<ChartReview>]) -> Result<PerDiagnosis<Agreement>, LabelError> {
    if !patient_reviews.iter().any(|r| r.len() >= 2) {
        return Err(LabelError::NoPairs);
    }
    PerDiagnosis::try_from_fn(|d| {
        let table = pooled_table(patient_reviews, d);
        let kappa = table.kappa().ok_or(LabelError::DegenerateMarginals(d))?;
        Ok(Agreement { table, kappa, raw_agreement: table.raw_agreement() })
    })
}

/// Ordinal "prediction score" for a single physician: higher means more likely.
pub fn physician_score(rating: f64) -> f64 {
    5.0 - rating
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicianBenchmark {
    pub held_out: ChartReview,
    pub consensus: DiagnosisLabels,
}

impl PhysicianBenchmark {
    pub fn scores(&self) -> PerDiagnosis<f64> {
        self.held_out.scores.map(|_, &r| physician_score(r))
    }
}

/// Holds out one review uniformly at random and labels the patient from the
/// remaining ones.
pub fn physician_benchmark<R: Rng + ?Sized>(
    reviews: &[ChartReview],
    rng: &mut R,
) -> Result<PhysicianBenchmark, LabelError> {
    if reviews.len() < 3 {
        return Err(LabelError::TooFewReviews(reviews.len()));
    }
    let k = rng.gen_range(0..reviews.len());
    let held_out = reviews[k].clone();
    let rest: Vec<ChartReview> =
        reviews.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, r)| r.clone()).collect();
    let consensus = aggregate_reviews(&rest)?;
    Ok(PhysicianBenchmark { held_out, consensus })
}

/// Training label for a stay: chart-review consensus when reviews exist,
/// otherwise the code+medication phenotype.
pub fn stay_labels(stay: &PatientStay, ruleset: &PhenotypeRuleset) -> DiagnosisLabels {
    aggregate_reviews(&stay.reviews).unwrap_or_else(|_| code_med_label(stay, ruleset))
}
