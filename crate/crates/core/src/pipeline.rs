//! In-memory pipeline stages shared by the CLI and the end-to-end tests:
//! cohort filtering and labeling, per-split featurization and assembly of
//! model examples.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cohort::{detect_arf_onset, exclude_surgical, include_stay, select_study, CohortConfig, PatientStay};
use crate::diagnosis::Diagnosis;
use crate::eval::SplitAssignment;
use crate::featurize::{self, stay_window_values, FeatureVector, FeaturizeError, FeaturizerConfig, FittedFeaturizer, WindowValues};
use crate::imaging::EmbeddingSet;
use crate::labels::{stay_labels, DiagnosisLabels, PhenotypeRuleset};
use crate::models::Example;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("patient {0} has no {1}")]
    Missing(String, &'static str),
    #[error("image {image} of patient {patient} is not in the embedding file")]
    MissingEmbedding { patient: String, image: String },
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Cohort(#[from] crate::cohort::CohortError),
}

/// Why a stay was left out of the analysis cohort.
pub fn exclusion_reason(stay: &PatientStay, cfg: &CohortConfig) -> Option<&'static str> {
    if include_stay(stay, cfg) {
        return None;
    }
    Some(match detect_arf_onset(stay) {
        None => "no_respiratory_support",
        Some(onset) if onset - stay.admit_time > cfg.onset_horizon => "onset_after_horizon",
        Some(_) if stay.studies.is_empty() => "no_imaging_study",
        Some(_) if exclude_surgical(stay, cfg) => "post_surgical",
        Some(_) => "excluded",
    })
}

/// Included stays with their labels, plus the excluded ids and reasons.
pub struct LabeledCohort<'a> {
    pub included: Vec<(&'a PatientStay, DiagnosisLabels)>,
    pub excluded: Vec<(String, &'static str)>,
}

pub fn label_cohort<'a>(stays: &'a [PatientStay], ruleset: &PhenotypeRuleset, cfg: &CohortConfig) -> LabeledCohort<'a> {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for stay in stays {
        match exclusion_reason(stay, cfg) {
            None => included.push((stay, stay_labels(stay, ruleset))),
            Some(reason) => excluded.push((stay.patient_id.clone(), reason)),
        }
    }
    LabeledCohort { included, excluded }
}

/// Window values for every given stay, keyed by patient id.
pub fn cohort_window_values(
    stays: &[&PatientStay],
    cohort_cfg: &CohortConfig,
    cfg: &FeaturizerConfig,
) -> Result<BTreeMap<String, WindowValues>, PipelineError> {
    stays
        .iter()
        .map(|s| Ok((s.patient_id.clone(), stay_window_values(s, cohort_cfg, cfg)?)))
        .collect()
}

/// Fits on the split's training patients and encodes every patient.
pub fn featurize_split(
    values: &BTreeMap<String, WindowValues>,
    split: &SplitAssignment,
    cfg: &FeaturizerConfig,
) -> Result<(FittedFeaturizer, BTreeMap<String, FeatureVector>), PipelineError> {
    let train: Vec<WindowValues> = split
        .train
        .iter()
        .map(|id| values.get(id).cloned().ok_or_else(|| PipelineError::Missing(id.clone(), "window values")))
        .collect::<Result<_, _>>()?;
    let fitted = featurize::fit(&train, cfg)?;
    let encoded = values
        .iter()
        .map(|(id, v)| Ok((id.clone(), fitted.encode(v)?)))
        .collect::<Result<BTreeMap<_, _>, FeaturizeError>>()?;
    Ok((fitted, encoded))
}

/// Embeddings of every image of the study nearest to onset.
pub fn study_embeddings(stay: &PatientStay, embeddings: &EmbeddingSet) -> Result<Vec<Vec<f64>>, PipelineError> {
    let study = select_study(stay)?;
    study
        .image_refs
        .iter()
        .map(|r| {
            embeddings.get(r).map(|e| e.vector.clone()).ok_or_else(|| PipelineError::MissingEmbedding {
                patient: stay.patient_id.clone(),
                image: r.clone(),
            })
        })
        .collect()
}

/// Model inputs for the given patients, in the given order.
pub fn build_examples(
    ids: &[String],
    stays: &BTreeMap<String, &PatientStay>,
    features: &BTreeMap<String, FeatureVector>,
    embeddings: &EmbeddingSet,
    labels: &BTreeMap<String, DiagnosisLabels>,
) -> Result<Vec<Example>, PipelineError> {
    ids.iter()
        .map(|id| {
            let stay = stays.get(id).ok_or_else(|| PipelineError::Missing(id.clone(), "stay"))?;
            let fv = features.get(id).ok_or_else(|| PipelineError::Missing(id.clone(), "feature vector"))?;
            let l = labels.get(id).ok_or_else(|| PipelineError::Missing(id.clone(), "labels"))?;
            Ok(Example {
                patient_id: id.clone(),
                ehr: fv.to_f64(),
                embeddings: study_embeddings(stay, embeddings)?,
                targets: l.as_targets(),
            })
        })
        .collect()
}

/// Label rows in a fixed column order: pneumonia, heart failure, COPD.
pub fn label_flags(l: &DiagnosisLabels) -> [bool; 3] {
    Diagnosis::ALL.map(|d| l.get(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::make_splits;
    use crate::synth::{generate, SynthSpec};

    #[test]
    fn synthetic_cohort_assembles() {
        let c = generate(&SynthSpec::new(60, 3)).unwrap();
        let labeled = label_cohort(&c.stays, &c.ruleset, &CohortConfig::default());
        assert!(labeled.excluded.is_empty());
        let stays: Vec<&PatientStay> = labeled.included.iter().map(|(s, _)| *s).collect();
        let values = cohort_window_values(&stays, &CohortConfig::default(), &c.featurizer_config).unwrap();
        let ids: Vec<String> = values.keys().cloned().collect();
        let split = &make_splits(&ids, 1).unwrap()[0];
        let (fitted, encoded) = featurize_split(&values, split, &c.featurizer_config).unwrap();
        assert_eq!(encoded.len(), 60);
        let by_id: BTreeMap<String, &PatientStay> = stays.iter().map(|s| (s.patient_id.clone(), *s)).collect();
        let labels: BTreeMap<String, DiagnosisLabels> =
            labeled.included.iter().map(|(s, l)| (s.patient_id.clone(), *l)).collect();
        let ex = build_examples(&split.test, &by_id, &encoded, &c.embeddings, &labels).unwrap();
        assert_eq!(ex.len(), split.test.len());
        assert!(ex.iter().all(|e| e.ehr.len() == fitted.d && !e.embeddings.is_empty()));
    }

    #[test]
    fn exclusion_reasons() {
        let cfg = CohortConfig::default();
        let mut c = generate(&SynthSpec::new(3, 1)).unwrap();
        c.stays[0].support_events.clear();
        c.stays[1].studies.clear();
        assert_eq!(exclusion_reason(&c.stays[0], &cfg), Some("no_respiratory_support"));
        assert_eq!(exclusion_reason(&c.stays[1], &cfg), Some("no_imaging_study"));
        assert_eq!(exclusion_reason(&c.stays[2], &cfg), None);
    }
}
