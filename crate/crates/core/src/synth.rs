//! Seeded synthetic cohorts with a known generative model.
//!
//! Each patient gets three independent diagnosis bits `z`. Numeric EHR
//! values are `Normal(mu0 + sum z_k * ehr_signal_k, 1)`, missingness is
//! `Bernoulli(missing_base + sum z_k * missing_shift_k)` and each image
//! embedding of the selected study is `Normal(sum z_k * emb_signal_k, I)`.
//! The default signals put part of every diagnosis in each modality, so
//! neither modality alone recovers the labels as well as both together.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    detect_arf_onset, include_stay, observation_window, CohortConfig, ImagingStudy, ObsValue, ObservationEvent,
    PatientStay, SupportEvent, SupportKind, Timestamp, UnitInterval, DAY, HOUR,
};
use crate::diagnosis::{Diagnosis, PerDiagnosis};
use crate::featurize::{CategoricalVar, FeaturizerConfig};
use crate::imaging::{EmbeddingSet, ImageEmbedding};
use crate::labels::{code_med_label, ChartReview, PhenotypeRuleset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
}

const NUMERIC_NAMES: [(&str, f64); 12] = [
    ("heart_rate", 95.0),
    ("resp_rate", 24.0),
    ("spo2", 92.0),
    ("temperature", 37.2),
    ("sbp", 118.0),
    ("wbc", 11.0),
    ("bnp", 40.0),
    ("pco2", 45.0),
    ("ph", 7.35),
    ("creatinine", 1.3),
    ("lactate", 2.0),
    ("age", 64.0),
];

/// Site names the generator writes for some canonical variables.
const SITE_ALIASES: [(&str, &str); 3] = [("HR", "heart_rate"), ("RR", "resp_rate"), ("SpO2", "spo2")];

const SEX: [&str; 2] = ["F", "M"];
const RACE: [&str; 4] = ["asian", "black", "white", "other"];
const REVIEWERS: [&str; 8] = ["r01", "r02", "r03", "r04", "r05", "r06", "r07", "r08"];

pub fn numeric_var_name(j: usize) -> String {
    NUMERIC_NAMES.get(j).map_or_else(|| format!("lab_{j:02}"), |(n, _)| n.to_string())
}

fn base_mean(j: usize) -> f64 {
    NUMERIC_NAMES.get(j).map_or(0.0, |(_, m)| *m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub prevalences: PerDiagnosis<f64>,
    pub n_numeric_vars: usize,
    pub emb_dim: usize,
    /// Per diagnosis, one coefficient per numeric variable.
    pub ehr_signal: PerDiagnosis<Vec<f64>>,
    /// Per diagnosis, one mean shift per embedding dimension.
    pub emb_signal: PerDiagnosis<Vec<f64>>,
    pub missing_base: f64,
    pub missing_shift: PerDiagnosis<f64>,
    /// Probabilities of 1, 2, 3 and 4 chart reviews.
    pub n_reviews_dist: [f64; 4],
    pub reviewer_noise: f64,
    pub seed: u64,
}

/// Diagnosis `k` drives numeric variables `2k, 2k+1` and embedding
/// dimensions `4k..4k+4` (wrapping when the model is narrower).
pub fn planted_signals(
    n_numeric: usize,
    emb_dim: usize,
    ehr_strength: f64,
    emb_strength: f64,
) -> (PerDiagnosis<Vec<f64>>, PerDiagnosis<Vec<f64>>) {
    let ehr = PerDiagnosis::from_fn(|d| {
        let mut v = vec![0.0; n_numeric];
        if n_numeric > 0 {
            for j in [2 * d.index(), 2 * d.index() + 1] {
                v[j % n_numeric] += ehr_strength;
            }
        }
        v
    });
    let emb = PerDiagnosis::from_fn(|d| {
        let mut v = vec![0.0; emb_dim];
        if emb_dim > 0 {
            for j in 4 * d.index()..4 * d.index() + 4 {
                v[j % emb_dim] += emb_strength;
            }
        }
        v
    });
    (ehr, emb)
}

impl SynthSpec {
    pub const DEFAULT_NUMERIC: usize = 12;
    pub const DEFAULT_EMB_DIM: usize = 64;
    pub const DEFAULT_EHR_STRENGTH: f64 = 1.0;
    pub const DEFAULT_EMB_STRENGTH: f64 = 0.6;

    pub fn new(n_patients: usize, seed: u64) -> Self {
        Self::with_signals(
            n_patients,
            Self::DEFAULT_NUMERIC,
            Self::DEFAULT_EMB_DIM,
            Self::DEFAULT_EHR_STRENGTH,
            Self::DEFAULT_EMB_STRENGTH,
            seed,
        )
    }

    pub fn with_signals(
        n_patients: usize,
        n_numeric_vars: usize,
        emb_dim: usize,
        ehr_strength: f64,
        emb_strength: f64,
        seed: u64,
    ) -> Self {
        let (ehr_signal, emb_signal) = planted_signals(n_numeric_vars, emb_dim, ehr_strength, emb_strength);
        Self {
            n_patients,
            prevalences: PerDiagnosis::new(0.31, 0.22, 0.09),
            n_numeric_vars,
            emb_dim,
            ehr_signal,
            emb_signal,
            missing_base: 0.3,
            missing_shift: PerDiagnosis::new(-0.15, 0.15, -0.15),
            n_reviews_dist: [0.23, 0.48, 0.20, 0.09],
            reviewer_noise: 0.6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.n_numeric_vars == 0 {
            return bad("n_numeric_vars must be positive".into());
        }
        if self.emb_dim == 0 {
            return bad("emb_dim must be positive".into());
        }
        for (d, &p) in self.prevalences.iter() {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{d} prevalence {p} outside (0, 1)"));
            }
        }
        for (d, v) in self.ehr_signal.iter() {
            if v.len() != self.n_numeric_vars || v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{d} ehr_signal must hold {} finite values", self.n_numeric_vars));
            }
        }
        for (d, v) in self.emb_signal.iter() {
            if v.len() != self.emb_dim || v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{d} emb_signal must hold {} finite values", self.emb_dim));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_base) || self.missing_shift.iter().any(|(_, s)| !s.is_finite()) {
            return bad("missing_base must lie in [0, 1] and shifts must be finite".into());
        }
        if self.n_reviews_dist.iter().any(|p| !(*p >= 0.0 && p.is_finite())) || self.n_reviews_dist.iter().sum::<f64>() <= 0.0 {
            return bad("n_reviews_dist must be non-negative with a positive sum".into());
        }
        if !(self.reviewer_noise >= 0.0 && self.reviewer_noise.is_finite()) {
            return bad("reviewer_noise must be non-negative".into());
        }
        Ok(())
    }

    /// Featurizer configuration matching the generated variables.
    pub fn featurizer_config(&self) -> FeaturizerConfig {
        FeaturizerConfig {
            numeric_vars: (0..self.n_numeric_vars).map(numeric_var_name).collect(),
            categorical_vars: vec![
                CategoricalVar { name: "sex".into(), vocabulary: SEX.iter().map(|s| s.to_string()).collect() },
                CategoricalVar { name: "race".into(), vocabulary: RACE.iter().map(|s| s.to_string()).collect() },
            ],
            bins_per_var: crate::featurize::DEFAULT_BINS,
            variable_map: SITE_ALIASES.iter().map(|(s, c)| (s.to_string(), c.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub stays: Vec<PatientStay>,
    pub embeddings: EmbeddingSet,
    pub truth: Vec<(String, PerDiagnosis<bool>)>,
    pub ruleset: PhenotypeRuleset,
    pub featurizer_config: FeaturizerConfig,
}

impl SynthCohort {
    /// `patient_id,pneumonia,heart_failure,copd` with 0/1 cells.
    pub fn truth_rows(&self) -> Vec<[String; 4]> {
        self.truth
            .iter()
            .map(|(id, z)| {
                let b = |v: bool| if v { "1".to_string() } else { "0".to_string() };
                [id.clone(), b(z.pneumonia), b(z.heart_failure), b(z.copd)]
            })
            .collect()
    }
}

fn pick<'a, R: Rng + ?Sized>(set: &'a BTreeSet<String>, rng: &mut R) -> &'a String {
    set.iter().nth(rng.gen_range(0..set.len())).expect("non-empty rule set")
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Stored embeddings are f32 on disk; keep the in-memory copy identical.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn draw_reviews<R: Rng + ?Sized>(spec: &SynthSpec, z: &PerDiagnosis<bool>, rng: &mut R) -> Vec<ChartReview> {
    let total: f64 = spec.n_reviews_dist.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut count = 4;
    for (i, &p) in spec.n_reviews_dist.iter().enumerate() {
        if u < p {
            count = i + 1;
            break;
        }
        u -= p;
    }
    let mut ids = REVIEWERS.to_vec();
    ids.shuffle(rng);
    ids.truncate(count);
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let scores = PerDiagnosis::from_fn(|d| {
                let noise = if spec.reviewer_noise > 0.0 {
                    let n: f64 = StandardNormal.sample(rng);
                    spec.reviewer_noise * n
                } else {
                    0.0
                };
                let raw = 1.0 + 3.0 * (1.0 - f64::from(u8::from(z[d]))) + noise;
                (raw.clamp(1.0, 4.0) * 2.0).round() / 2.0
            });
            ChartReview { reviewer_id: id.to_string(), scores }
        })
        .collect()
}

/// Codes and medications so that the code+medication rule reproduces `z`:
/// both for every true diagnosis, plus decoys (a code or a medication alone)
/// for some false ones.
fn draw_codes<R: Rng + ?Sized>(stay: &mut PatientStay, z: &PerDiagnosis<bool>, rules: &PhenotypeRuleset, rng: &mut R) {
    for d in Diagnosis::ALL {
        if z[d] {
            stay.icd_codes.insert(pick(&rules.rule(d).icd, rng).clone());
            stay.medications.insert(pick(&rules.rule(d).medications, rng).clone());
        }
    }
    for d in Diagnosis::ALL {
        if z[d] || !rng.gen_bool(0.3) {
            continue;
        }
        let use_code = rng.gen_bool(0.5);
        let item = if use_code { pick(&rules.rule(d).icd, rng) } else { pick(&rules.rule(d).medications, rng) }.clone();
        let target = if use_code { &mut stay.icd_codes } else { &mut stay.medications };
        if !target.insert(item.clone()) {
            continue;
        }
        if code_med_label(stay, rules).flags() != *z {
            let target = if use_code { &mut stay.icd_codes } else { &mut stay.medications };
            target.remove(&item);
        }
    }
}

struct PatientDraw {
    stay: PatientStay,
    z: PerDiagnosis<bool>,
    images: Vec<ImageEmbedding>,
}

fn draw_patient<R: Rng + ?Sized>(spec: &SynthSpec, i: usize, rules: &PhenotypeRuleset, cohort_cfg: &CohortConfig, rng: &mut R) -> PatientDraw {
    let patient_id = format!("P{i:06}");
    let z = PerDiagnosis::from_fn(|d| rng.gen_bool(spec.prevalences[d]));
    let zf = |d: Diagnosis| f64::from(u8::from(z[d]));
    let admit: Timestamp = 1_000_000 + (i as i64) * 30 * DAY + rng.gen_range(0..DAY);
    let onset = admit + rng.gen_range(2 * HOUR..=6 * DAY);

    let mut stay = PatientStay {
        patient_id: patient_id.clone(),
        admit_time: admit,
        events: Vec::new(),
        support_events: Vec::new(),
        studies: Vec::new(),
        unit_intervals: Vec::new(),
        reviews: Vec::new(),
        icd_codes: BTreeSet::new(),
        medications: BTreeSet::new(),
        post_surgical: false,
    };

    let kinds = [SupportKind::Hfnc, SupportKind::Niv, SupportKind::Imv];
    stay.support_events.push(SupportEvent { time: onset, kind: *kinds.choose(rng).expect("non-empty") });
    if rng.gen_bool(0.4) {
        stay.support_events.push(SupportEvent { time: onset + rng.gen_range(HOUR..2 * DAY), kind: SupportKind::Imv });
    }
    stay.unit_intervals.push(UnitInterval { unit_code: "MICU".into(), start: (onset - 2 * HOUR).max(admit), end: onset + 3 * DAY });
    if onset - admit > 2 * DAY && rng.gen_bool(0.2) {
        let end = admit + HOUR;
        stay.unit_intervals.push(UnitInterval { unit_code: "SURG".into(), start: admit, end });
    }

    let window = observation_window(&stay, cohort_cfg).expect("onset present");
    let span = window.end - window.start;
    let mid = window.start + span / 2;
    let missing_p = (spec.missing_base + Diagnosis::ALL.iter().map(|&d| zf(d) * spec.missing_shift[d]).sum::<f64>()).clamp(0.0, 1.0);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    for j in 0..spec.n_numeric_vars {
        let canonical = numeric_var_name(j);
        let site = SITE_ALIASES.iter().find(|(_, c)| *c == canonical).map(|(s, _)| *s);
        let name = |rng: &mut R| match site {
            Some(s) if rng.gen_bool(0.5) => s.to_string(),
            _ => canonical.clone(),
        };
        if !rng.gen_bool(missing_p) {
            let mu = base_mean(j) + Diagnosis::ALL.iter().map(|&d| zf(d) * spec.ehr_signal[d][j]).sum::<f64>();
            let value = round2(mu + unit.sample(rng));
            let t_true = rng.gen_range(mid..=window.end);
            if rng.gen_bool(0.5) {
                let older = round2(base_mean(j) + unit.sample(rng));
                stay.events.push(ObservationEvent {
                    variable: name(rng),
                    time: rng.gen_range(window.start..=mid),
                    value: Some(ObsValue::Num(older)),
                });
            }
            stay.events.push(ObservationEvent { variable: name(rng), time: t_true, value: Some(ObsValue::Num(value)) });
            if rng.gen_bool(0.1) {
                stay.events.push(ObservationEvent { variable: name(rng), time: t_true, value: None });
            }
        }
        if rng.gen_bool(0.5) {
            let later = round2(base_mean(j) + 3.0 * unit.sample(rng));
            stay.events.push(ObservationEvent {
                variable: name(rng),
                time: window.end + rng.gen_range(HOUR..12 * HOUR),
                value: Some(ObsValue::Num(later)),
            });
        }
    }
    let sex = SEX.choose(rng).expect("non-empty");
    let race = if rng.gen_bool(0.05) { "unknown" } else { RACE.choose(rng).expect("non-empty") };
    for (var, token) in [("sex", *sex), ("race", race)] {
        stay.events.push(ObservationEvent {
            variable: var.into(),
            time: rng.gen_range(window.start..=window.end),
            value: Some(ObsValue::Token(token.into())),
        });
    }
    stay.events.sort_by_key(|e| e.time);

    let mut images = Vec::new();
    let mut study = |stay: &mut PatientStay, sid: String, time: Timestamp, n_img: usize, signal: bool, rng: &mut R| {
        let mut refs = Vec::new();
        for k in 0..n_img {
            let id = format!("{sid}_i{k}");
            let vector = (0..spec.emb_dim)
                .map(|c| {
                    let shift = if signal { Diagnosis::ALL.iter().map(|&d| zf(d) * spec.emb_signal[d][c]).sum::<f64>() } else { 0.0 };
                    f32_exact(shift + unit.sample(rng))
                })
                .collect();
            images.push(ImageEmbedding { study_image_id: id.clone(), vector });
            refs.push(id);
        }
        stay.studies.push(ImagingStudy { study_id: sid, time, image_refs: refs });
    };
    let main_time = (onset + rng.gen_range(-6 * HOUR..=6 * HOUR)).max(admit);
    let n_img = rng.gen_range(1..=2);
    study(&mut stay, format!("{patient_id}_s0"), main_time, n_img, true, rng);
    if rng.gen_bool(0.3) {
        let far = onset + rng.gen_range(2 * DAY..=4 * DAY);
        study(&mut stay, format!("{patient_id}_s1"), far, 1, false, rng);
    }

    stay.reviews = draw_reviews(spec, &z, rng);
    draw_codes(&mut stay, &z, rules, rng);
    debug_assert_eq!(detect_arf_onset(&stay), Some(onset));
    PatientDraw { stay, z, images }
}

/// Draws a cohort; identical specs give identical cohorts.
pub fn generate(spec: &SynthSpec) -> Result<SynthCohort, SynthError> {
    spec.validate()?;
    let rules = PhenotypeRuleset::default_rules();
    let cohort_cfg = CohortConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stays = Vec::with_capacity(spec.n_patients);
    let mut truth = Vec::with_capacity(spec.n_patients);
    let mut embeddings = EmbeddingSet::new(spec.emb_dim);
    for i in 0..spec.n_patients {
        let draw = draw_patient(spec, i, &rules, &cohort_cfg, &mut rng);
        debug_assert!(include_stay(&draw.stay, &cohort_cfg));
        for img in draw.images {
            embeddings.insert(img).map_err(|e| SynthError::Spec(e.to_string()))?;
        }
        truth.push((draw.stay.patient_id.clone(), draw.z));
        stays.push(draw.stay);
    }
    Ok(SynthCohort { stays, embeddings, truth, ruleset: rules, featurizer_config: spec.featurizer_config() })
}
