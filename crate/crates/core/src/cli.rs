//! The `arfdx` command-line front end.
//!
//! ```text
//! arfdx <synth|label|featurize|split|train|evaluate|explain> --config <path> [--seed N] [--out DIR]
//! ```
//!
//! Settings are resolved with the precedence flags > config file > defaults.
//! The config file is INI text; see [`RunConfig`] for sections and keys.
//! Every artifact starts with a provenance record (tool version, seed and
//! config hash) and is written atomically. `ARFDX_THREADS` caps the worker
//! pool. Failures print one JSON line on stderr; module errors exit 1,
//! config and IO errors exit 2.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use ini::Ini;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::Value;
use thiserror::Error;

use crate::cohort::{parse_cohort, to_ndjson, format_rejects, CohortConfig, Ingested, PatientStay, SupportAliases, HOUR};
use crate::diagnosis::Diagnosis;
use crate::eval::{
    evaluate_predictions, make_splits, physician_comparison, roc_points, summarize_splits, MetricsReport,
    PhysicianCase, Role, SplitAssignment,
};
use crate::explain::{correlation_groups, group_blocks, permutation_importance, FeatureGroup, ImportanceReport};
use crate::featurize::{features_from_ndjson, features_to_ndjson, missingness_correlation, FeatureVector, FeaturizerConfig, FittedFeaturizer};
use crate::imaging::EmbeddingSet;
use crate::labels::{pooled_table, DiagnosisLabels, LabelSource, PhenotypeRuleset};
use crate::models::{sweep, Example, Family, HyperGrid, ModelKind, TrainedModel};
use crate::output::{csv_text, derive_seed, fmt_f64, read_csv, write_atomic, Provenance};
use crate::pipeline::{build_examples, cohort_window_values, featurize_split, label_cohort, label_flags};
use crate::synth::{generate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Synth,
    Label,
    Featurize,
    Split,
    Train,
    Evaluate,
    Explain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Label => "label",
            Stage::Featurize => "featurize",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
        }
    }

    /// Stages that draw random numbers refuse to run without a seed.
    pub fn needs_seed(self) -> bool {
        !matches!(self, Stage::Label | Stage::Featurize)
    }
}

#[derive(Debug, Parser)]
#[command(name = "arfdx", version, about = "Acute respiratory failure diagnosis pipeline")]
struct Args {
    #[arg(value_enum)]
    command: Stage,
    /// INI run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Top-level seed; overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `[run] out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { message: String, path: Option<PathBuf> },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{message}")]
    Module { module: &'static str, message: String },
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError::Config { message: message.into(), path: None }
    }

    fn at(message: impl Into<String>, path: &Path) -> Self {
        CliError::Config { message: message.into(), path: Some(path.to_path_buf()) }
    }

    fn module(module: &'static str, e: impl Display) -> Self {
        CliError::Module { module, message: e.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Module { .. } => 1,
            CliError::Config { .. } | CliError::Io { .. } => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Module { module, .. } => module,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            CliError::Config { path, .. } => path.as_deref(),
            CliError::Io { path, .. } => Some(path),
            CliError::Module { .. } => None,
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json(&self, stage: Option<Stage>) -> String {
        let message = match self {
            CliError::Io { source, .. } => source.to_string(),
            other => other.to_string(),
        };
        serde_json::json!({
            "error": self.kind(),
            "stage": stage.map(Stage::name),
            "message": message,
            "path": self.path().map(|p| p.display().to_string()),
        })
        .to_string()
    }
}

macro_rules! module_error {
    ($($ty:ty => $name:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::module($name, e)
            }
        })*
    };
}

module_error! {
    crate::cohort::CohortError => "cohort",
    crate::labels::LabelError => "labels",
    crate::featurize::FeaturizeError => "featurize",
    crate::imaging::ImagingError => "imaging",
    crate::models::ModelError => "models",
    crate::eval::EvalError => "eval",
    crate::explain::ExplainError => "explain",
    crate::synth::SynthError => "synth",
    crate::pipeline::PipelineError => "pipeline",
}

/// `[synth]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub n_patients: usize,
    pub n_numeric_vars: usize,
    pub emb_dim: usize,
    pub ehr_strength: f64,
    pub emb_strength: f64,
    pub reviewer_noise: f64,
    pub missing_base: f64,
}

/// Input files. Unset entries point into the output directory, where
/// `synth` writes them.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPaths {
    pub cohort: PathBuf,
    pub embeddings: PathBuf,
    pub ruleset: Option<PathBuf>,
    pub variables: PathBuf,
}

/// Effective run configuration.
///
/// | section      | keys |
/// |--------------|------|
/// | `[run]`      | `seed`, `out` |
/// | `[paths]`    | `cohort`, `embeddings`, `ruleset`, `variables` |
/// | `[synth]`    | `n_patients`, `n_numeric_vars`, `emb_dim`, `ehr_strength`, `emb_strength`, `reviewer_noise`, `missing_base` |
/// | `[cohort]`   | `onset_horizon_hours`, `min_window_hours`, `post_surgical_buffer_hours`, `surgical_units` |
/// | `[sweep]`    | `learning_rates`, `momenta`, `weight_decays`, `batch_size`, `patience`, `max_epochs`, `families` |
/// | `[evaluate]` | `physician`, `plots` |
/// | `[explain]`  | `repeats`, `threshold`, `models` |
///
/// Lists are comma separated. Relative paths in the file resolve against
/// the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub paths: InputPaths,
    pub synth: SynthSettings,
    pub cohort: CohortConfig,
    pub grid: HyperGrid,
    pub families: Vec<Family>,
    pub physician: bool,
    pub plots: bool,
    pub explain_repeats: usize,
    pub explain_threshold: f64,
    pub explain_models: Vec<Family>,
    /// `section.key=value` lines of every setting except seed and output
    /// directory; hashed into the provenance record.
    pub canonical: String,
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn defaults() -> BTreeMap<(&'static str, &'static str), String> {
    let s = SynthSpec::new(0, 0);
    let c = CohortConfig::default();
    let g = HyperGrid::default();
    let hours = |m: i64| (m / HOUR).to_string();
    let entries: Vec<((&str, &str), String)> = vec![
        (("run", "seed"), String::new()),
        (("run", "out"), "out".into()),
        (("paths", "cohort"), String::new()),
        (("paths", "embeddings"), String::new()),
        (("paths", "ruleset"), String::new()),
        (("paths", "variables"), String::new()),
        (("synth", "n_patients"), "1000".into()),
        (("synth", "n_numeric_vars"), s.n_numeric_vars.to_string()),
        (("synth", "emb_dim"), s.emb_dim.to_string()),
        (("synth", "ehr_strength"), fmt_f64(SynthSpec::DEFAULT_EHR_STRENGTH)),
        (("synth", "emb_strength"), fmt_f64(SynthSpec::DEFAULT_EMB_STRENGTH)),
        (("synth", "reviewer_noise"), fmt_f64(s.reviewer_noise)),
        (("synth", "missing_base"), fmt_f64(s.missing_base)),
        (("cohort", "onset_horizon_hours"), hours(c.onset_horizon)),
        (("cohort", "min_window_hours"), hours(c.min_window)),
        (("cohort", "post_surgical_buffer_hours"), hours(c.post_surgical_buffer)),
        (("cohort", "surgical_units"), c.surgical_units.iter().cloned().collect::<Vec<_>>().join(",")),
        (("sweep", "learning_rates"), join_f64(&g.learning_rates)),
        (("sweep", "momenta"), join_f64(&g.momenta)),
        (("sweep", "weight_decays"), join_f64(&g.weight_decays)),
        (("sweep", "batch_size"), g.batch_size.to_string()),
        (("sweep", "patience"), g.patience.to_string()),
        (("sweep", "max_epochs"), g.max_epochs.to_string()),
        (("sweep", "families"), "ehr,image,combined".into()),
        (("evaluate", "physician"), "true".into()),
        (("evaluate", "plots"), "true".into()),
        (("explain", "repeats"), crate::explain::DEFAULT_REPEATS.to_string()),
        (("explain", "threshold"), fmt_f64(crate::explain::DEFAULT_CORRELATION_THRESHOLD)),
        (("explain", "models"), "ehr,combined".into()),
    ];
    entries.into_iter().collect()
}

struct Settings {
    values: BTreeMap<(&'static str, &'static str), String>,
}

impl Settings {
    fn raw(&self, section: &'static str, key: &'static str) -> &str {
        self.values[&(section, key)].as_str()
    }

    fn parse<T: std::str::FromStr>(&self, section: &'static str, key: &'static str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.raw(section, key);
        v.parse().map_err(|e| CliError::config(format!("[{section}] {key} = `{v}`: {e}")))
    }

    fn list<T: std::str::FromStr>(&self, section: &'static str, key: &'static str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let v = self.raw(section, key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::config(format!("[{section}] {key}: `{s}`: {e}"))))
            .collect()
    }

    fn families(&self, section: &'static str, key: &'static str) -> Result<Vec<Family>, CliError> {
        let names: Vec<String> = self.list(section, key)?;
        let mut out = Vec::new();
        for n in names {
            let f = Family::parse(&n).ok_or_else(|| CliError::config(format!("[{section}] {key}: unknown model family `{n}`")))?;
            if !out.contains(&f) {
                out.push(f);
            }
        }
        if out.is_empty() {
            return Err(CliError::config(format!("[{section}] {key} is empty")));
        }
        Ok(out)
    }

    fn hours(&self, key: &'static str) -> Result<i64, CliError> {
        let h: i64 = self.parse("cohort", key)?;
        h.checked_mul(HOUR).ok_or_else(|| CliError::config(format!("[cohort] {key} out of range")))
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses INI text; `base` is the directory relative paths resolve against.
    pub fn from_ini(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::config(format!("config syntax: {e}")))?;
        let mut values = defaults();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::config(format!("key `{k}` outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                let slot = values
                    .iter_mut()
                    .find(|((s, key), _)| *s == section && *key == k)
                    .map(|(_, slot)| slot)
                    .ok_or_else(|| CliError::config(format!("unknown setting [{section}] {k}")))?;
                *slot = v.trim().to_string();
            }
        }
        let settings = Settings { values };

        let seed = match overrides.seed {
            Some(s) => Some(s),
            None if settings.raw("run", "seed").is_empty() => None,
            None => Some(settings.parse("run", "seed")?),
        };
        let out = match &overrides.out {
            Some(o) => o.clone(),
            None => resolve(base, settings.raw("run", "out")),
        };
        let input = |key: &'static str, default: &str| {
            let v = settings.raw("paths", key);
            if v.is_empty() {
                out.join(default)
            } else {
                resolve(base, v)
            }
        };
        let paths = InputPaths {
            cohort: input("cohort", "cohort.ndjson"),
            embeddings: input("embeddings", "embeddings.bin"),
            ruleset: (!settings.raw("paths", "ruleset").is_empty()).then(|| resolve(base, settings.raw("paths", "ruleset"))),
            variables: input("variables", "variables.json"),
        };
        let synth = SynthSettings {
            n_patients: settings.parse("synth", "n_patients")?,
            n_numeric_vars: settings.parse("synth", "n_numeric_vars")?,
            emb_dim: settings.parse("synth", "emb_dim")?,
            ehr_strength: settings.parse("synth", "ehr_strength")?,
            emb_strength: settings.parse("synth", "emb_strength")?,
            reviewer_noise: settings.parse("synth", "reviewer_noise")?,
            missing_base: settings.parse("synth", "missing_base")?,
        };
        let cohort = CohortConfig {
            onset_horizon: settings.hours("onset_horizon_hours")?,
            min_window: settings.hours("min_window_hours")?,
            post_surgical_buffer: settings.hours("post_surgical_buffer_hours")?,
            surgical_units: settings.list::<String>("cohort", "surgical_units")?.into_iter().collect::<BTreeSet<_>>(),
        };
        cohort.validate()?;
        let grid = HyperGrid {
            learning_rates: settings.list("sweep", "learning_rates")?,
            momenta: settings.list("sweep", "momenta")?,
            weight_decays: settings.list("sweep", "weight_decays")?,
            batch_size: settings.parse("sweep", "batch_size")?,
            patience: settings.parse("sweep", "patience")?,
            max_epochs: settings.parse("sweep", "max_epochs")?,
        };
        if grid.learning_rates.is_empty() || grid.momenta.is_empty() || grid.weight_decays.is_empty() {
            return Err(CliError::config("[sweep] grid lists must be non-empty"));
        }
        let explain_threshold: f64 = settings.parse("explain", "threshold")?;
        if !(0.0..=1.0).contains(&explain_threshold) {
            return Err(CliError::config("[explain] threshold must lie in [0, 1]"));
        }
        let canonical = settings
            .values
            .iter()
            .filter(|((s, k), _)| !(*s == "run" && (*k == "seed" || *k == "out")))
            .map(|((s, k), v)| format!("{s}.{k}={v}\n"))
            .collect();
        Ok(RunConfig {
            seed,
            out,
            paths,
            synth,
            cohort,
            grid,
            families: settings.families("sweep", "families")?,
            physician: settings.parse("evaluate", "physician")?,
            plots: settings.parse("evaluate", "plots")?,
            explain_repeats: settings.parse("explain", "repeats")?,
            explain_threshold,
            explain_models: settings.families("explain", "models")?,
            canonical,
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_ini(&text, base, overrides)
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::at(format!("missing {what}: {}", path.display()), path))
    }
}

fn parse_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = read_text(path)?;
    read_csv(&text).map_err(|e| CliError::at(format!("malformed CSV {}: {e}", path.display()), path))
}

fn with_provenance(mut v: Value, prov: &Provenance) -> String {
    if let Value::Object(m) = &mut v {
        m.insert("provenance".into(), prov.to_json());
    }
    let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
    s.push('\n');
    s
}

/// Per-invocation state: resolved config and provenance record.
struct Run<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    seed: u64,
    prov: Provenance,
}

impl<'a> Run<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn split_path(&self, k: usize, name: &str) -> PathBuf {
        self.cfg.out.join(format!("split{k}")).join(name)
    }

    fn stage_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, &format!("{}/{tag}", self.stage.name()))
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }

    fn write_text(&self, path: &Path, body: &str) -> Result<(), CliError> {
        self.write(path, self.prov.wrap_text(body).as_bytes())
    }

    fn write_csv<R, I, S>(&self, path: &Path, header: &[&str], rows: R) -> Result<(), CliError>
    where
        R: IntoIterator<Item = I>,
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.write_text(path, &csv_text(header, rows))
    }

    fn write_json(&self, path: &Path, v: Value) -> Result<(), CliError> {
        self.write(path, with_provenance(v, &self.prov).as_bytes())
    }

    fn cohort(&self) -> Result<Ingested, CliError> {
        require(&self.cfg.paths.cohort, "cohort file")?;
        Ok(parse_cohort(&read_text(&self.cfg.paths.cohort)?, &SupportAliases::default()))
    }

    fn ruleset(&self) -> Result<PhenotypeRuleset, CliError> {
        let default_path = self.path("ruleset.json");
        match &self.cfg.paths.ruleset {
            Some(p) => {
                require(p, "ruleset")?;
                Ok(PhenotypeRuleset::from_json(&read_text(p)?)?)
            }
            None if default_path.is_file() => Ok(PhenotypeRuleset::from_json(&read_text(&default_path)?)?),
            None => Ok(PhenotypeRuleset::default_rules()),
        }
    }

    fn variables(&self) -> Result<FeaturizerConfig, CliError> {
        require(&self.cfg.paths.variables, "variable configuration")?;
        Ok(FeaturizerConfig::from_json(&read_text(&self.cfg.paths.variables)?)?)
    }

    fn embeddings(&self) -> Result<EmbeddingSet, CliError> {
        require(&self.cfg.paths.embeddings, "embedding file")?;
        Ok(EmbeddingSet::decode(&read_bytes(&self.cfg.paths.embeddings)?)?)
    }

    fn labels(&self) -> Result<BTreeMap<String, DiagnosisLabels>, CliError> {
        let path = self.path("labels.csv");
        require(&path, "labels (run `label` first)")?;
        let (_, rows) = parse_csv(&path)?;
        let bad = || CliError::at(format!("malformed labels file {}", path.display()), &path);
        let mut out = BTreeMap::new();
        for r in rows {
            if r.len() != 5 {
                return Err(bad());
            }
            let flag = |s: &str| match s {
                "1" => Ok(true),
                "0" => Ok(false),
                _ => Err(bad()),
            };
            let source = match r[4].as_str() {
                "chart_review" => LabelSource::ChartReview,
                "code_med" => LabelSource::CodeMed,
                _ => return Err(bad()),
            };
            let labels = DiagnosisLabels {
                pneumonia: flag(&r[1])?,
                heart_failure: flag(&r[2])?,
                copd: flag(&r[3])?,
                source,
            };
            out.insert(r[0].clone(), labels);
        }
        Ok(out)
    }

    fn splits(&self) -> Result<Vec<SplitAssignment>, CliError> {
        let path = self.path("splits.csv");
        require(&path, "splits (run `split` first)")?;
        let (_, rows) = parse_csv(&path)?;
        let bad = || CliError::at(format!("malformed splits file {}", path.display()), &path);
        let mut splits: BTreeMap<usize, SplitAssignment> = BTreeMap::new();
        for r in rows {
            if r.len() != 3 {
                return Err(bad());
            }
            let k: usize = r[0].parse().map_err(|_| bad())?;
            let s = splits.entry(k).or_insert_with(|| SplitAssignment { split_index: k, train: vec![], val: vec![], test: vec![] });
            match Role::parse(&r[2]).ok_or_else(bad)? {
                Role::Train => s.train.push(r[1].clone()),
                Role::Val => s.val.push(r[1].clone()),
                Role::Test => s.test.push(r[1].clone()),
            }
        }
        if splits.is_empty() || splits.keys().enumerate().any(|(i, k)| i != *k) {
            return Err(bad());
        }
        Ok(splits.into_values().collect())
    }

    fn featurizer(&self, k: usize) -> Result<FittedFeaturizer, CliError> {
        let path = self.split_path(k, "featurizer.json");
        require(&path, "featurizer (run `featurize` first)")?;
        Ok(FittedFeaturizer::from_json(&read_text(&path)?)?)
    }

    fn features(&self, k: usize, d: usize) -> Result<BTreeMap<String, FeatureVector>, CliError> {
        let path = self.split_path(k, "features.ndjson");
        require(&path, "features (run `featurize` first)")?;
        Ok(features_from_ndjson(&read_text(&path)?, d)?.into_iter().collect())
    }

    fn checkpoint_path(&self, k: usize, family: Family) -> PathBuf {
        self.split_path(k, &format!("model_{}.json", family.name()))
    }

    fn checkpoint(&self, k: usize, family: Family) -> Result<TrainedModel, CliError> {
        let path = self.checkpoint_path(k, family);
        require(&path, "checkpoint")?;
        Ok(TrainedModel::from_checkpoint_json(&read_text(&path)?)?)
    }
}

/// Labeled stays plus the model inputs of every split.
struct Dataset {
    stays: BTreeMap<String, PatientStay>,
    labels: BTreeMap<String, DiagnosisLabels>,
    embeddings: EmbeddingSet,
    splits: Vec<SplitAssignment>,
}

struct SplitData {
    featurizer: FittedFeaturizer,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

impl Dataset {
    fn load(run: &Run) -> Result<Self, CliError> {
        let labels = run.labels()?;
        let splits = run.splits()?;
        let embeddings = run.embeddings()?;
        let stays = run
            .cohort()?
            .stays
            .into_iter()
            .filter(|s| labels.contains_key(&s.patient_id))
            .map(|s| (s.patient_id.clone(), s))
            .collect::<BTreeMap<_, _>>();
        if let Some(id) = labels.keys().find(|id| !stays.contains_key(*id)) {
            return Err(CliError::module("pipeline", format!("labeled patient {id} is not in the cohort file")));
        }
        Ok(Self { stays, labels, embeddings, splits })
    }

    fn split(&self, run: &Run, k: usize) -> Result<SplitData, CliError> {
        let featurizer = run.featurizer(k)?;
        let features = run.features(k, featurizer.d)?;
        let by_id: BTreeMap<String, &PatientStay> = self.stays.iter().map(|(id, s)| (id.clone(), s)).collect();
        let s = &self.splits[k];
        let mk = |ids: &[String]| build_examples(ids, &by_id, &features, &self.embeddings, &self.labels);
        Ok(SplitData { train: mk(&s.train)?, val: mk(&s.val)?, test: mk(&s.test)?, featurizer })
    }
}

fn bit(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn kind_name(k: ModelKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_else(|| format!("{k:?}"))
}

fn run_synth(run: &Run) -> Result<(), CliError> {
    let s = &run.cfg.synth;
    let mut spec = SynthSpec::with_signals(
        s.n_patients,
        s.n_numeric_vars,
        s.emb_dim,
        s.ehr_strength,
        s.emb_strength,
        run.stage_seed("cohort"),
    );
    spec.reviewer_noise = s.reviewer_noise;
    spec.missing_base = s.missing_base;
    let cohort = generate(&spec)?;
    run.write_text(&run.path("cohort.ndjson"), &to_ndjson(&cohort.stays))?;
    run.write(&run.path("embeddings.bin"), &cohort.embeddings.encode()?)?;
    run.write_json(&run.path("embeddings.bin.provenance.json"), serde_json::json!({ "artifact": "embeddings.bin" }))?;
    run.write_csv(&run.path("truth_labels.csv"), &["patient_id", "pneumonia", "heart_failure", "copd"], cohort.truth_rows())?;
    let ruleset: Value = serde_json::from_str(&cohort.ruleset.to_json()).expect("ruleset json");
    run.write_json(&run.path("ruleset.json"), ruleset)?;
    run.write_json(&run.path("variables.json"), serde_json::to_value(&cohort.featurizer_config).expect("config json"))?;
    Ok(())
}

fn run_label(run: &Run) -> Result<(), CliError> {
    let ingested = run.cohort()?;
    let ruleset = run.ruleset()?;
    run.write_text(&run.path("cohort.rejects"), &format_rejects(&ingested.rejects))?;
    let labeled = label_cohort(&ingested.stays, &ruleset, &run.cfg.cohort);
    run.write_csv(&run.path("excluded.csv"), &["patient_id", "reason"], labeled.excluded.iter().map(|(id, r)| [id.clone(), r.to_string()]))?;
    let mut rows: Vec<[String; 5]> = labeled
        .included
        .iter()
        .map(|(s, l)| {
            let f = label_flags(l);
            let source = match l.source {
                LabelSource::ChartReview => "chart_review",
                LabelSource::CodeMed => "code_med",
            };
            [s.patient_id.clone(), bit(f[0]), bit(f[1]), bit(f[2]), source.to_string()]
        })
        .collect();
    rows.sort();
    run.write_csv(&run.path("labels.csv"), &["patient_id", "pneumonia", "heart_failure", "copd", "source"], rows)?;
    let reviews: Vec<_> = labeled.included.iter().map(|(s, _)| s.reviews.clone()).collect();
    let agreement = Diagnosis::ALL.map(|d| {
        let t = pooled_table(&reviews, d);
        let raw = (t.total() > 0).then(|| t.raw_agreement());
        [
            d.name().to_string(),
            t.a.to_string(),
            t.b.to_string(),
            t.c.to_string(),
            t.d.to_string(),
            opt(t.kappa()),
            opt(raw),
        ]
    });
    run.write_csv(&run.path("agreement.csv"), &["diagnosis", "both_yes", "first_only", "second_only", "both_no", "kappa", "raw_agreement"], agreement)?;
    Ok(())
}

fn run_split(run: &Run) -> Result<(), CliError> {
    let ids: Vec<String> = run.labels()?.into_keys().collect();
    let splits = make_splits(&ids, run.stage_seed("assign"))?;
    let mut rows = Vec::new();
    for s in &splits {
        for role in [Role::Train, Role::Val, Role::Test] {
            for id in s.members(role) {
                rows.push([s.split_index.to_string(), id.clone(), role.as_str().to_string()]);
            }
        }
    }
    run.write_csv(&run.path("splits.csv"), &["split", "patient_id", "role"], rows)
}

fn run_featurize(run: &Run) -> Result<(), CliError> {
    let labels = run.labels()?;
    let splits = run.splits()?;
    let variables = run.variables()?;
    let ingested = run.cohort()?;
    let stays: Vec<&PatientStay> = ingested.stays.iter().filter(|s| labels.contains_key(&s.patient_id)).collect();
    let values = cohort_window_values(&stays, &run.cfg.cohort, &variables)?;
    for split in &splits {
        let k = split.split_index;
        let (fitted, encoded) = featurize_split(&values, split, &variables)?;
        let fj: Value = serde_json::from_str(&fitted.to_json()).expect("featurizer json");
        run.write_json(&run.split_path(k, "featurizer.json"), fj)?;
        let rows: Vec<(String, FeatureVector)> = encoded.iter().map(|(id, v)| (id.clone(), v.clone())).collect();
        run.write_text(&run.split_path(k, "features.ndjson"), &features_to_ndjson(&rows))?;
        let train_vecs: Vec<FeatureVector> = split.train.iter().map(|id| encoded[id].clone()).collect();
        let train_labels: Vec<DiagnosisLabels> = split.train.iter().map(|id| labels[id]).collect();
        let corr = missingness_correlation(&train_vecs, &train_labels, &fitted);
        run.write_csv(
            &run.split_path(k, "missingness.csv"),
            &["variable", "diagnosis", "spearman"],
            corr.iter().map(|c| [c.variable.clone(), c.diagnosis.name().to_string(), opt(c.coefficient)]),
        )?;
    }
    Ok(())
}

fn run_train(run: &Run) -> Result<(), CliError> {
    let data = Dataset::load(run)?;
    let emb_dim = data.embeddings.width();
    let results: Vec<Vec<(Family, crate::models::SweepResult)>> = (0..data.splits.len())
        .into_par_iter()
        .map(|k| {
            let sd = data.split(run, k)?;
            run.cfg
                .families
                .iter()
                .map(|&family| {
                    let seed = run.stage_seed(&format!("split{k}/{}", family.name()));
                    let r = sweep(family.architectures(), sd.featurizer.d, emb_dim, &run.cfg.grid, &sd.train, &sd.val, seed)?;
                    Ok((family, r))
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<_, _>>()?;
    for (k, per_family) in results.iter().enumerate() {
        for (family, r) in per_family {
            let ck = r.best.to_checkpoint_json(Some(run.prov.to_json()));
            run.write(&run.checkpoint_path(k, *family), format!("{ck}\n").as_bytes())?;
            let rows = r.runs.iter().map(|s| {
                [
                    kind_name(s.kind),
                    fmt_f64(s.hyperparams.learning_rate),
                    fmt_f64(s.hyperparams.momentum),
                    fmt_f64(s.hyperparams.weight_decay),
                    s.hyperparams.batch_size.to_string(),
                    opt(s.val_macro_auroc),
                    s.error.clone().unwrap_or_default(),
                ]
            });
            run.write_csv(
                &run.split_path(k, &format!("sweep_{}.csv", family.name())),
                &["architecture", "learning_rate", "momentum", "weight_decay", "batch_size", "val_macro_auroc", "error"],
                rows,
            )?;
        }
    }
    Ok(())
}

fn predict_all(model: &TrainedModel, examples: &[Example]) -> Result<Vec<[f64; 3]>, CliError> {
    Ok(examples.iter().map(|e| model.predict(e)).collect::<Result<_, _>>()?)
}

fn label_matrix(examples: &[Example]) -> Vec<[bool; 3]> {
    examples.iter().map(|e| Diagnosis::ALL.map(|d| e.label(d))).collect()
}

fn run_evaluate(run: &Run) -> Result<(), CliError> {
    let data = Dataset::load(run)?;
    for k in 0..data.splits.len() {
        for &f in &run.cfg.families {
            require(&run.checkpoint_path(k, f), "checkpoint")?;
        }
    }
    let mut metrics = Vec::new();
    let mut roc = Vec::new();
    let mut cal = Vec::new();
    let mut phys = Vec::new();
    let mut per_model: BTreeMap<(Family, String, &'static str), Vec<f64>> = BTreeMap::new();
    for k in 0..data.splits.len() {
        let sd = data.split(run, k)?;
        let val_labels = label_matrix(&sd.val);
        let test_labels = label_matrix(&sd.test);
        for &family in &run.cfg.families {
            let model = run.checkpoint(k, family)?;
            let val_probs = predict_all(&model, &sd.val)?;
            let test_probs = predict_all(&model, &sd.test)?;
            let report: MetricsReport = evaluate_predictions(&val_probs, &val_labels, &test_probs, &test_labels)?;
            for row in report.rows() {
                if matches!(row.metric, "auroc" | "aupr") {
                    per_model.entry((family, row.diagnosis.clone(), row.metric)).or_default().push(row.value);
                }
                metrics.push([family.name().to_string(), k.to_string(), row.diagnosis, row.metric.to_string(), fmt_f64(row.value)]);
            }
            if run.cfg.plots {
                for d in Diagnosis::ALL {
                    let s: Vec<f64> = test_probs.iter().map(|p| p[d.index()]).collect();
                    let y: Vec<bool> = test_labels.iter().map(|l| l[d.index()]).collect();
                    if let Ok(points) = roc_points(&s, &y) {
                        for (t, fpr, tpr) in points {
                            roc.push([family.name().to_string(), k.to_string(), d.name().to_string(), fmt_f64(t), fmt_f64(fpr), fmt_f64(tpr)]);
                        }
                    }
                    if let Some(c) = &report.per_diagnosis[d].calibration {
                        for (i, b) in c.bins.iter().enumerate() {
                            cal.push([
                                family.name().to_string(),
                                k.to_string(),
                                d.name().to_string(),
                                i.to_string(),
                                fmt_f64(b.mean_pred),
                                fmt_f64(b.frac_pos),
                                b.count.to_string(),
                            ]);
                        }
                    }
                }
            }
            if run.cfg.physician {
                let cases: Vec<PhysicianCase> = sd
                    .test
                    .iter()
                    .zip(&test_probs)
                    .map(|(e, p)| PhysicianCase { reviews: data.stays[&e.patient_id].reviews.clone(), model_probs: *p })
                    .collect();
                // same held-out physicians for every model of a split
                let mut rng = ChaCha8Rng::seed_from_u64(run.stage_seed(&format!("split{k}/physician")));
                if let Ok(c) = physician_comparison(&cases, &mut rng) {
                    for d in Diagnosis::ALL {
                        phys.push([
                            family.name().to_string(),
                            k.to_string(),
                            d.name().to_string(),
                            c.n_patients.to_string(),
                            opt(c.physician_auroc[d]),
                            opt(c.model_auroc[d]),
                        ]);
                    }
                    phys.push([
                        family.name().to_string(),
                        k.to_string(),
                        "macro".into(),
                        c.n_patients.to_string(),
                        opt(c.physician_macro),
                        opt(c.model_macro),
                    ]);
                }
            }
        }
    }
    let mut summary = Vec::new();
    for ((family, diagnosis, metric), values) in &per_model {
        let s = summarize_splits(values)?;
        summary.push([
            family.name().to_string(),
            diagnosis.clone(),
            metric.to_string(),
            values.len().to_string(),
            fmt_f64(s.median),
            fmt_f64(s.min),
            fmt_f64(s.max),
        ]);
    }
    run.write_csv(&run.path("metrics.csv"), &["model", "split", "diagnosis", "metric", "value"], metrics)?;
    run.write_csv(&run.path("summary.csv"), &["model", "diagnosis", "metric", "n_splits", "median", "min", "max"], summary)?;
    if run.cfg.plots {
        run.write_csv(&run.path("roc.csv"), &["model", "split", "diagnosis", "threshold", "fpr", "tpr"], roc)?;
        run.write_csv(
            &run.path("calibration.csv"),
            &["model", "split", "diagnosis", "bin", "mean_pred", "frac_pos", "count"],
            cal,
        )?;
    }
    if run.cfg.physician {
        run.write_csv(
            &run.path("physician.csv"),
            &["model", "split", "diagnosis", "n_patients", "physician_auroc", "model_auroc"],
            phys,
        )?;
    }
    Ok(())
}

fn run_explain(run: &Run) -> Result<(), CliError> {
    let data = Dataset::load(run)?;
    for k in 0..data.splits.len() {
        for &f in &run.cfg.explain_models {
            require(&run.checkpoint_path(k, f), "checkpoint")?;
        }
    }
    let split_data: Vec<SplitData> = (0..data.splits.len()).map(|k| data.split(run, k)).collect::<Result<_, _>>()?;
    let first = &split_data[0];
    let signals: Vec<Vec<f64>> = first
        .train
        .iter()
        .map(|e| {
            let fv = FeatureVector { bits: e.ehr.iter().map(|&x| x != 0.0).collect() };
            first.featurizer.variable_signals(&fv)
        })
        .collect();
    let groups: Vec<FeatureGroup> = correlation_groups(&signals, &first.featurizer.variable_names(), run.cfg.explain_threshold)?;
    run.write_csv(
        &run.path("groups.csv"),
        &["group", "members"],
        groups.iter().map(|g| [g.id.to_string(), g.label()]),
    )?;
    for &family in &run.cfg.explain_models {
        let per_split = split_data
            .par_iter()
            .enumerate()
            .map(|(k, sd)| {
                let model = run.checkpoint(k, family)?;
                let blocks = group_blocks(&sd.featurizer, &groups)?;
                let seed = run.stage_seed(&format!("split{k}/{}", family.name()));
                Ok(permutation_importance(&model, &sd.test, &blocks, run.cfg.explain_repeats, seed)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let report = ImportanceReport::from_splits(groups.clone(), &per_split)?;
        run.write_csv(
            &run.path(&format!("importance_{}.csv", family.name())),
            &["diagnosis", "group_members", "mean_rank", "mean_drop", "per_split_drops"],
            report.rows(),
        )?;
    }
    Ok(())
}

/// Runs one stage with a resolved configuration.
pub fn run(stage: Stage, cfg: &RunConfig) -> Result<(), CliError> {
    let seed = match cfg.seed {
        Some(s) => s,
        None if stage.needs_seed() => {
            return Err(CliError::config(format!("`{}` needs a seed: pass --seed or set [run] seed", stage.name())))
        }
        None => 0,
    };
    let run = Run { cfg, stage, seed, prov: Provenance::new(seed, &cfg.canonical) };
    match stage {
        Stage::Synth => run_synth(&run),
        Stage::Label => run_label(&run),
        Stage::Featurize => run_featurize(&run),
        Stage::Split => run_split(&run),
        Stage::Train => run_train(&run),
        Stage::Evaluate => run_evaluate(&run),
        Stage::Explain => run_explain(&run),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ARFDX_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("ARFDX_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::config(e.to_string()))
}

/// Entry point used by the binary.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> ExitCode {
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides { seed: args.seed, out: args.out };
    let result = configure_threads()
        .and_then(|()| RunConfig::load(&args.config, &overrides))
        .and_then(|cfg| run(args.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json(Some(args.command)));
            ExitCode::from(e.exit_code())
        }
    }
}
