use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three ARF etiologies the models predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Pneumonia,
    HeartFailure,
    Copd,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Pneumonia, Diagnosis::HeartFailure, Diagnosis::Copd];

    pub fn name(self) -> &'static str {
        match self {
            Diagnosis::Pneumonia => "pneumonia",
            Diagnosis::HeartFailure => "heart_failure",
            Diagnosis::Copd => "copd",
        }
    }

    /// Output index in model heads and label arrays.
    pub fn index(self) -> usize {
        match self {
            Diagnosis::Pneumonia => 0,
            Diagnosis::HeartFailure => 1,
            Diagnosis::Copd => 2,
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Diagnosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pneumonia" => Ok(Diagnosis::Pneumonia),
            "heart_failure" | "hf" => Ok(Diagnosis::HeartFailure),
            "copd" => Ok(Diagnosis::Copd),
            other => Err(format!("unknown diagnosis `{other}`")),
        }
    }
}

/// One value per diagnosis. Serializes as an object keyed by diagnosis name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerDiagnosis<T> {
    pub pneumonia: T,
    pub heart_failure: T,
    pub copd: T,
}

impl<T> PerDiagnosis<T> {
    pub fn new(pneumonia: T, heart_failure: T, copd: T) -> Self {
        Self { pneumonia, heart_failure, copd }
    }

    pub fn from_fn(mut f: impl FnMut(Diagnosis) -> T) -> Self {
        Self {
            pneumonia: f(Diagnosis::Pneumonia),
            heart_failure: f(Diagnosis::HeartFailure),
            copd: f(Diagnosis::Copd),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Diagnosis, &T) -> U) -> PerDiagnosis<U> {
        PerDiagnosis::from_fn(|d| f(d, &self[d]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Diagnosis, &T)> {
        Diagnosis::ALL.into_iter().map(move |d| (d, &self[d]))
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Diagnosis) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            pneumonia: f(Diagnosis::Pneumonia)?,
            heart_failure: f(Diagnosis::HeartFailure)?,
            copd: f(Diagnosis::Copd)?,
        })
    }
}

impl<T: Copy> PerDiagnosis<T> {
    pub fn to_array(&self) -> [T; 3] {
        [self.pneumonia, self.heart_failure, self.copd]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T> Index<Diagnosis> for PerDiagnosis<T> {
    type Output = T;

    fn index(&self, d: Diagnosis) -> &T {
        match d {
            Diagnosis::Pneumonia => &self.pneumonia,
            Diagnosis::HeartFailure => &self.heart_failure,
            Diagnosis::Copd => &self.copd,
        }
    }
}

impl<T> IndexMut<Diagnosis> for PerDiagnosis<T> {
    fn index_mut(&mut self, d: Diagnosis) -> &mut T {
        match d {
            Diagnosis::Pneumonia => &mut self.pneumonia,
            Diagnosis::HeartFailure => &mut self.heart_failure,
            Diagnosis::Copd => &mut self.copd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for d in Diagnosis::ALL {
            assert_eq!(d.name().parse::<Diagnosis>().unwrap(), d);
        }
        assert!("asthma".parse::<Diagnosis>().is_err());
    }

    #[test]
    fn indices_follow_output_order() {
        let idx: Vec<usize> = Diagnosis::ALL.iter().map(|d| d.index()).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn per_diagnosis_requires_all_fields() {
        let err = serde_json::from_str::<PerDiagnosis<f64>>(r#"{"pneumonia":1,"copd":2}"#);
        assert!(err.is_err());
    }
}
