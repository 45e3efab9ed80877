use std::collections::BTreeMap;

use arfdx::cohort::{CohortConfig, PatientStay};
use arfdx::diagnosis::{Diagnosis, PerDiagnosis};
use arfdx::eval::{auroc, make_splits};
use arfdx::labels::DiagnosisLabels;
use arfdx::models::{sweep, Family, HyperGrid};
use arfdx::pipeline::{build_examples, cohort_window_values, featurize_split, label_cohort};
use arfdx::synth::{generate, SynthSpec};

/// Null standard deviation of AUROC with `p` positives and `n` negatives
/// (Mann-Whitney U under exchangeability).
fn null_sd(p: usize, n: usize) -> f64 {
    ((p + n + 1) as f64 / (12.0 * p as f64 * n as f64)).sqrt()
}

#[test]
fn no_signal_cohort_gives_chance_auroc() {
    let mut spec = SynthSpec::with_signals(2000, 12, 16, 0.0, 0.0, 31);
    // presence of a value is itself a signal unless the shift is zero
    spec.missing_shift = PerDiagnosis::new(0.0, 0.0, 0.0);
    let cohort = generate(&spec).unwrap();
    let ccfg = CohortConfig::default();
    let labeled = label_cohort(&cohort.stays, &cohort.ruleset, &ccfg);
    let stays: Vec<&PatientStay> = labeled.included.iter().map(|(s, _)| *s).collect();
    let by_id: BTreeMap<String, &PatientStay> = stays.iter().map(|s| (s.patient_id.clone(), *s)).collect();
    let labels: BTreeMap<String, DiagnosisLabels> = labeled.included.iter().map(|(s, l)| (s.patient_id.clone(), *l)).collect();
    let values = cohort_window_values(&stays, &ccfg, &cohort.featurizer_config).unwrap();
    let ids: Vec<String> = values.keys().cloned().collect();
    let split = &make_splits(&ids, 32).unwrap()[0];
    let (fitted, encoded) = featurize_split(&values, split, &cohort.featurizer_config).unwrap();
    let mk = |ids: &[String]| build_examples(ids, &by_id, &encoded, &cohort.embeddings, &labels).unwrap();
    let (train, val, test) = (mk(&split.train), mk(&split.val), mk(&split.test));
    let grid = HyperGrid { learning_rates: vec![0.01, 0.1], momenta: vec![0.9], weight_decays: vec![1e-3], ..HyperGrid::default() };

    // macro-AUROC sd under the null, diagnoses treated as independent
    let var: f64 = Diagnosis::ALL
        .iter()
        .map(|&d| {
            let p = test.iter().filter(|e| e.label(d)).count();
            null_sd(p, test.len() - p).powi(2)
        })
        .sum::<f64>()
        / 9.0;
    assert!(0.07 > 3.0 * var.sqrt(), "bound is not a 3-sigma band: sd {}", var.sqrt());

    for family in Family::ALL {
        let r = sweep(family.architectures(), fitted.d, cohort.embeddings.width(), &grid, &train, &val, 33).unwrap();
        let mut sum = 0.0;
        for d in Diagnosis::ALL {
            let s: Vec<f64> = test.iter().map(|e| r.best.predict(e).unwrap()[d.index()]).collect();
            let y: Vec<bool> = test.iter().map(|e| e.label(d)).collect();
            sum += auroc(&s, &y).unwrap();
        }
        let m = sum / 3.0;
        assert!((m - 0.5).abs() < 0.07, "{}: macro AUROC {m}", family.name());
    }
}
