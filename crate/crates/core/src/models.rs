//! EHR, image and late-fusion classifiers with three sigmoid outputs
//! (pneumonia, heart failure, COPD), trained with mini-batch SGD and momentum.
//!
//! Every architecture is an optional ReLU hidden layer over the EHR vector
//! followed by one dense output layer over `[embedding ‖ ehr part]`:
//!
//! | kind             | hidden      | output input            |
//! |------------------|-------------|-------------------------|
//! | `EhrLinear`      | none        | `x`                     |
//! | `EhrTwoLayer`    | `relu(W1 x)`| `h`                     |
//! | `ImageLinear`    | none        | `emb`                   |
//! | `CombinedDirect` | none        | `[emb ‖ x]`             |
//! | `CombinedHidden` | `relu(W1 x)`| `[emb ‖ h]`             |
//!
//! Parameters live in one flat vector: hidden weights (row-major, one row per
//! hidden unit), hidden bias, output weights (row-major, one row per output),
//! output bias.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::Diagnosis;
use crate::eval::auroc;

pub const OUTPUTS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 100;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite parameter update")]
    NonFiniteUpdate,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("validation set has no diagnosis with both classes")]
    NoValidationSignal,
    #[error("no sweep configuration trained successfully")]
    SweepFailed,
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    EhrLinear,
    EhrTwoLayer,
    ImageLinear,
    CombinedDirect,
    CombinedHidden,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::EhrLinear,
        ModelKind::EhrTwoLayer,
        ModelKind::ImageLinear,
        ModelKind::CombinedDirect,
        ModelKind::CombinedHidden,
    ];

    pub fn uses_ehr(self) -> bool {
        !matches!(self, ModelKind::ImageLinear)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, ModelKind::ImageLinear | ModelKind::CombinedDirect | ModelKind::CombinedHidden)
    }

    pub fn has_hidden(self) -> bool {
        matches!(self, ModelKind::EhrTwoLayer | ModelKind::CombinedHidden)
    }

    pub fn family(self) -> Family {
        match self {
            ModelKind::EhrLinear | ModelKind::EhrTwoLayer => Family::Ehr,
            ModelKind::ImageLinear => Family::Image,
            ModelKind::CombinedDirect | ModelKind::CombinedHidden => Family::Combined,
        }
    }
}

/// Model families compared in evaluation; architecture is swept within a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ehr,
    Image,
    Combined,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Ehr, Family::Image, Family::Combined];

    pub fn architectures(self) -> &'static [ModelKind] {
        match self {
            Family::Ehr => &[ModelKind::EhrLinear, ModelKind::EhrTwoLayer],
            Family::Image => &[ModelKind::ImageLinear],
            Family::Combined => &[ModelKind::CombinedDirect, ModelKind::CombinedHidden],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Ehr => "ehr",
            Family::Image => "image",
            Family::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s.trim().to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub ehr_dim: usize,
    pub emb_dim: usize,
    pub hidden: usize,
}

/// Index ranges of each parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub hidden_w: Range<usize>,
    pub hidden_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.out_b.end
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, ehr_dim: usize, emb_dim: usize) -> Self {
        Self { kind, ehr_dim, emb_dim, hidden: DEFAULT_HIDDEN }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kind.uses_ehr() && self.ehr_dim == 0 {
            return Err(ModelError::Shape(format!("{:?} needs ehr_dim > 0", self.kind)));
        }
        if self.kind.uses_image() && self.emb_dim == 0 {
            return Err(ModelError::Shape(format!("{:?} needs emb_dim > 0", self.kind)));
        }
        if self.kind.has_hidden() && self.hidden == 0 {
            return Err(ModelError::Shape("hidden layer needs at least one unit".into()));
        }
        Ok(())
    }

    fn hidden_units(&self) -> usize {
        if self.kind.has_hidden() {
            self.hidden
        } else {
            0
        }
    }

    /// Width of the EHR segment fed to the output layer.
    fn ehr_part(&self) -> usize {
        match (self.kind.uses_ehr(), self.kind.has_hidden()) {
            (false, _) => 0,
            (true, true) => self.hidden,
            (true, false) => self.ehr_dim,
        }
    }

    fn image_part(&self) -> usize {
        if self.kind.uses_image() {
            self.emb_dim
        } else {
            0
        }
    }

    /// Input width of the output layer.
    pub fn output_fan_in(&self) -> usize {
        self.image_part() + self.ehr_part()
    }

    pub fn layout(&self) -> Layout {
        let h = self.hidden_units();
        let hw = 0..h * if h > 0 { self.ehr_dim } else { 0 };
        let hb = hw.end..hw.end + h;
        let ow = hb.end..hb.end + OUTPUTS * self.output_fan_in();
        let ob = ow.end..ow.end + OUTPUTS;
        Layout { hidden_w: hw, hidden_b: hb, out_w: ow, out_b: ob }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self(vec![0.0; spec.n_params()])
    }

    /// Uniform in `±1/sqrt(fan_in)` for each layer's weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let l = spec.layout();
        let mut p = vec![0.0; l.total()];
        let mut fill = |range: Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut p[range] {
                *v = rng.gen_range(-bound..bound);
            }
        };
        fill(l.hidden_w.clone(), spec.ehr_dim);
        fill(l.hidden_b.clone(), spec.ehr_dim);
        fill(l.out_w.clone(), spec.output_fan_in());
        fill(l.out_b.clone(), spec.output_fan_in());
        Self(p)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Default)]
struct Activations {
    hidden_pre: Vec<f64>,
    /// Output-layer input `[emb ‖ ehr part]`.
    z: Vec<f64>,
    logits: [f64; OUTPUTS],
}

fn check_inputs(spec: &ModelSpec, ehr: Option<&[f64]>, emb: Option<&[f64]>) -> Result<(), ModelError> {
    if spec.kind.uses_ehr() {
        match ehr {
            Some(x) if x.len() == spec.ehr_dim => {}
            Some(x) => return Err(ModelError::Shape(format!("ehr input has {} features, expected {}", x.len(), spec.ehr_dim))),
            None => return Err(ModelError::Shape(format!("{:?} needs an EHR vector", spec.kind))),
        }
    }
    if spec.kind.uses_image() {
        match emb {
            Some(e) if e.len() == spec.emb_dim => {}
            Some(e) => return Err(ModelError::Shape(format!("embedding has width {}, expected {}", e.len(), spec.emb_dim))),
            None => return Err(ModelError::Shape(format!("{:?} needs an image embedding", spec.kind))),
        }
    }
    Ok(())
}

fn check_params(spec: &ModelSpec, params: &ModelParams) -> Result<(), ModelError> {
    if params.0.len() != spec.n_params() {
        return Err(ModelError::Shape(format!("{} parameters, spec needs {}", params.0.len(), spec.n_params())));
    }
    Ok(())
}

/// Inputs already checked.
fn forward_into(spec: &ModelSpec, params: &[f64], ehr: Option<&[f64]>, emb: Option<&[f64]>, act: &mut Activations) {
    let l = spec.layout();
    act.z.clear();
    if spec.kind.uses_image() {
        act.z.extend_from_slice(emb.expect("checked"));
    }
    if spec.kind.uses_ehr() {
        let x = ehr.expect("checked");
        if spec.kind.has_hidden() {
            let w1 = &params[l.hidden_w.clone()];
            let b1 = &params[l.hidden_b.clone()];
            act.hidden_pre.clear();
            for (j, row) in w1.chunks_exact(spec.ehr_dim).enumerate() {
                let pre = b1[j] + dot(row, x);
                act.hidden_pre.push(pre);
                act.z.push(pre.max(0.0));
            }
        } else {
            act.z.extend_from_slice(x);
        }
    }
    let w2 = &params[l.out_w.clone()];
    let b2 = &params[l.out_b];
    let fan_in = spec.output_fan_in();
    for (k, row) in w2.chunks_exact(fan_in).enumerate() {
        act.logits[k] = b2[k] + dot(row, &act.z);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-sigmoid outputs.
pub fn logits(spec: &ModelSpec, params: &ModelParams, ehr: Option<&[f64]>, emb: Option<&[f64]>) -> Result<[f64; OUTPUTS], ModelError> {
    check_params(spec, params)?;
    check_inputs(spec, ehr, emb)?;
    let mut act = Activations::default();
    forward_into(spec, &params.0, ehr, emb, &mut act);
    Ok(act.logits)
}

/// Output probabilities, clamped into `(0, 1)`.
pub fn forward(spec: &ModelSpec, params: &ModelParams, ehr: Option<&[f64]>, emb: Option<&[f64]>) -> Result<[f64; OUTPUTS], ModelError> {
    Ok(logits(spec, params, ehr, emb)?.map(|z| clamp_prob(sigmoid(z))))
}

/// Summed binary cross-entropy over the three outputs for one sample.
pub fn loss(probs: &[f64; OUTPUTS], targets: &[f64; OUTPUTS]) -> f64 {
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// One training example seen by the network.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub ehr: Option<&'a [f64]>,
    pub emb: Option<&'a [f64]>,
    pub targets: [f64; OUTPUTS],
}

/// Batch-mean loss (no L2 term).
pub fn batch_loss(spec: &ModelSpec, params: &ModelParams, batch: &[Sample<'_>]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in batch {
        total += loss(&forward(spec, params, s.ehr, s.emb)?, &s.targets);
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of the batch-mean cross-entropy. Returns the gradient and
/// the batch-mean loss.
pub fn backward(spec: &ModelSpec, params: &ModelParams, batch: &[Sample<'_>]) -> Result<(ModelParams, f64), ModelError> {
    check_params(spec, params)?;
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for s in batch {
        check_inputs(spec, s.ehr, s.emb)?;
    }
    let l = spec.layout();
    let p = &params.0;
    let mut grad = vec![0.0; p.len()];
    let scale = 1.0 / batch.len() as f64;
    let fan_in = spec.output_fan_in();
    let ehr_offset = spec.image_part();
    let mut act = Activations::default();
    let mut dhidden = vec![0.0; spec.hidden_units()];
    let mut total_loss = 0.0;

    for s in batch {
        forward_into(spec, p, s.ehr, s.emb, &mut act);
        let probs = act.logits.map(sigmoid);
        total_loss += loss(&probs, &s.targets);
        let delta: [f64; OUTPUTS] = std::array::from_fn(|k| (probs[k] - s.targets[k]) * scale);

        let (gw2, gb2) = {
            let (head, tail) = grad.split_at_mut(l.out_b.start);
            (&mut head[l.out_w.clone()], &mut tail[..OUTPUTS])
        };
        for k in 0..OUTPUTS {
            gb2[k] += delta[k];
            let row = &mut gw2[k * fan_in..(k + 1) * fan_in];
            for (g, &zj) in row.iter_mut().zip(&act.z) {
                *g += delta[k] * zj;
            }
        }

        if spec.kind.has_hidden() {
            let w2 = &p[l.out_w.clone()];
            for (j, dh) in dhidden.iter_mut().enumerate() {
                *dh = if act.hidden_pre[j] > 0.0 {
                    (0..OUTPUTS).map(|k| delta[k] * w2[k * fan_in + ehr_offset + j]).sum()
                } else {
                    0.0
                };
            }
            let x = s.ehr.expect("checked");
            let d = spec.ehr_dim;
            let (gw1, gb1) = {
                let (head, tail) = grad.split_at_mut(l.hidden_b.start);
                (&mut head[l.hidden_w.clone()], &mut tail[..spec.hidden])
            };
            for (j, &dh) in dhidden.iter().enumerate() {
                if dh == 0.0 {
                    continue;
                }
                gb1[j] += dh;
                for (g, &xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += dh * xi;
                }
            }
        }
    }
    Ok((ModelParams(grad), total_loss * scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { learning_rate: 0.1, momentum: 0.9, weight_decay: 1e-3, batch_size: 32, patience: 5, max_epochs: 100 }
    }
}

/// `v' = momentum * v + (g + weight_decay * theta)`, `theta' = theta - lr * v'`.
pub fn sgd_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], hp: &HyperParams) -> Result<(), ModelError> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(ModelError::Shape("parameter, velocity and gradient lengths differ".into()));
    }
    for ((theta, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let nv = hp.momentum * *v + (g + hp.weight_decay * *theta);
        let nt = *theta - hp.learning_rate * nv;
        if !nv.is_finite() || !nt.is_finite() {
            return Err(ModelError::NonFiniteUpdate);
        }
        *v = nv;
        *theta = nt;
    }
    Ok(())
}

/// Patience-based early stopping on a maximized metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records the metric for `epoch` (1-based); returns true on strict improvement.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_val_macro_auroc: f64,
}

/// A patient as seen by the models: EHR vector, every image embedding of the
/// selected study, and the three targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub patient_id: String,
    pub ehr: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    pub targets: [f64; OUTPUTS],
}

impl Example {
    pub fn label(&self, d: Diagnosis) -> bool {
        self.targets[d.index()] >= 0.5
    }
}

/// Image models train on one sample per image; EHR models on one per patient.
fn training_samples<'a>(kind: ModelKind, examples: &'a [Example]) -> Vec<Sample<'a>> {
    let mut out = Vec::new();
    for ex in examples {
        let ehr = kind.uses_ehr().then_some(ex.ehr.as_slice());
        if kind.uses_image() {
            for e in &ex.embeddings {
                out.push(Sample { ehr, emb: Some(e), targets: ex.targets });
            }
        } else {
            out.push(Sample { ehr, emb: None, targets: ex.targets });
        }
    }
    out
}

/// Mean of per-image probabilities. EHR-only models ignore the images.
pub fn predict_patient(
    spec: &ModelSpec,
    params: &ModelParams,
    embeddings: &[Vec<f64>],
    ehr: Option<&[f64]>,
) -> Result<[f64; OUTPUTS], ModelError> {
    if !spec.kind.uses_image() {
        return forward(spec, params, ehr, None);
    }
    if embeddings.is_empty() {
        return Err(ModelError::Shape("image model needs at least one embedding".into()));
    }
    let mut acc = [0.0; OUTPUTS];
    for e in embeddings {
        let p = forward(spec, params, ehr, Some(e))?;
        for k in 0..OUTPUTS {
            acc[k] += p[k];
        }
    }
    Ok(acc.map(|s| s / embeddings.len() as f64))
}

/// Per-patient probability source; lets evaluation and importance treat any
/// classifier uniformly.
pub trait Scorer: Sync {
    fn score(&self, ehr: &[f64], embeddings: &[Vec<f64>]) -> [f64; OUTPUTS];
}

/// Mean AUROC over the diagnoses whose labels contain both classes.
pub fn macro_auroc_defined(probs: &[[f64; OUTPUTS]], examples: &[Example]) -> Option<f64> {
    let mut vals = Vec::new();
    for d in Diagnosis::ALL {
        let scores: Vec<f64> = probs.iter().map(|p| p[d.index()]).collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.label(d)).collect();
        if let Ok(a) = auroc(&scores, &labels) {
            vals.push(a);
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Trains one configuration, keeping the parameters of the epoch with the
/// best validation macro-AUROC.
pub fn train(
    spec: &ModelSpec,
    hp: &HyperParams,
    train_set: &[Example],
    val_set: &[Example],
    seed: u64,
) -> Result<(ModelParams, TrainHistory), ModelError> {
    spec.validate()?;
    let samples = training_samples(spec.kind, train_set);
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(spec, &mut rng);
    let mut velocity = vec![0.0; params.0.len()];
    let mut best_params = params.clone();
    let mut stopper = EarlyStopping::new(hp.patience);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(hp.batch_size);
    let batch_size = hp.batch_size.max(1);

    for epoch in 1..=hp.max_epochs.max(1) {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let (grad, batch_mean) = backward(spec, &params, &batch)?;
            loss_sum += batch_mean * batch.len() as f64;
            sgd_step(&mut params.0, &mut velocity, &grad.0, hp).map_err(|_| ModelError::Diverged { epoch })?;
        }
        let val_probs = val_set
            .iter()
            .map(|ex| predict_patient(spec, &params, &ex.embeddings, Some(&ex.ehr)))
            .collect::<Result<Vec<_>, _>>()?;
        let metric = macro_auroc_defined(&val_probs, val_set).ok_or(ModelError::NoValidationSignal)?;
        let train_loss = loss_sum / samples.len() as f64;
        if !train_loss.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        epochs.push(EpochRecord { epoch, train_loss, val_macro_auroc: metric });
        if stopper.observe(epoch, metric) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let history = TrainHistory { epochs, best_epoch: stopper.best_epoch(), best_val_macro_auroc: stopper.best() };
    Ok((best_params, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub momenta: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for HyperGrid {
    /// The full sweep: 6 x 2 x 4 = 48 settings per architecture.
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 3.0],
            momenta: vec![0.8, 0.9],
            weight_decays: vec![1e-4, 1e-3, 1e-2, 1e-1],
            batch_size: 32,
            patience: 5,
            max_epochs: 100,
        }
    }
}

impl HyperGrid {
    /// Enumeration order: learning rate, then momentum, then weight decay,
    /// then architecture (last varies fastest).
    pub fn configs(&self, architectures: &[ModelKind]) -> Vec<(ModelKind, HyperParams)> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &momentum in &self.momenta {
                for &weight_decay in &self.weight_decays {
                    for &kind in architectures {
                        out.push((
                            kind,
                            HyperParams {
                                learning_rate,
                                momentum,
                                weight_decay,
                                batch_size: self.batch_size,
                                patience: self.patience,
                                max_epochs: self.max_epochs,
                            },
                        ));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub kind: ModelKind,
    pub hyperparams: HyperParams,
    /// `None` when the run failed (e.g. diverged).
    pub val_macro_auroc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub best: TrainedModel,
}

/// A trained configuration with its provenance; serializes as a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub hyperparams: HyperParams,
    pub params: ModelParams,
    pub history: TrainHistory,
    pub seed: u64,
}

impl Scorer for TrainedModel {
    fn score(&self, ehr: &[f64], embeddings: &[Vec<f64>]) -> [f64; OUTPUTS] {
        predict_patient(&self.spec, &self.params, embeddings, Some(ehr)).expect("inputs match the trained spec")
    }
}

impl TrainedModel {
    pub fn predict(&self, ex: &Example) -> Result<[f64; OUTPUTS], ModelError> {
        predict_patient(&self.spec, &self.params, &ex.embeddings, Some(&ex.ehr))
    }
}

/// Trains every (hyperparameters, architecture) combination of a family and
/// keeps the best by validation macro-AUROC; ties go to the earlier config.
/// Failed runs are recorded and skipped.
pub fn sweep(
    architectures: &[ModelKind],
    ehr_dim: usize,
    emb_dim: usize,
    grid: &HyperGrid,
    train_set: &[Example],
    val_set: &[Example],
    seed: u64,
) -> Result<SweepResult, ModelError> {
    let configs = grid.configs(architectures);
    if configs.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    let outcomes: Vec<_> = configs
        .par_iter()
        .map(|(kind, hp)| {
            let spec = ModelSpec::new(*kind, ehr_dim, emb_dim);
            train(&spec, hp, train_set, val_set, seed).map(|(params, history)| TrainedModel {
                spec,
                hyperparams: *hp,
                params,
                history,
                seed,
            })
        })
        .collect();
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut best: Option<TrainedModel> = None;
    for ((kind, hp), outcome) in configs.iter().zip(outcomes) {
        match outcome {
            Ok(model) => {
                let score = model.history.best_val_macro_auroc;
                runs.push(SweepRun { kind: *kind, hyperparams: *hp, val_macro_auroc: Some(score), error: None });
                if best.as_ref().is_none_or(|b| score > b.history.best_val_macro_auroc) {
                    best = Some(model);
                }
            }
            Err(e) => runs.push(SweepRun { kind: *kind, hyperparams: *hp, val_macro_auroc: None, error: Some(e.to_string()) }),
        }
    }
    Ok(SweepResult { runs, best: best.ok_or(ModelError::SweepFailed)? })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointParams {
    hidden_weights: Vec<f64>,
    hidden_bias: Vec<f64>,
    output_weights: Vec<f64>,
    output_bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    spec: ModelSpec,
    hyperparams: HyperParams,
    seed: u64,
    best_epoch: usize,
    best_val_macro_auroc: f64,
    history: Vec<EpochRecord>,
    params: CheckpointParams,
}

impl TrainedModel {
    pub fn to_checkpoint_json(&self, provenance: Option<serde_json::Value>) -> String {
        let l = self.spec.layout();
        let p = &self.params.0;
        let ck = Checkpoint {
            provenance,
            spec: self.spec,
            hyperparams: self.hyperparams,
            seed: self.seed,
            best_epoch: self.history.best_epoch,
            best_val_macro_auroc: self.history.best_val_macro_auroc,
            history: self.history.epochs.clone(),
            params: CheckpointParams {
                hidden_weights: p[l.hidden_w].to_vec(),
                hidden_bias: p[l.hidden_b].to_vec(),
                output_weights: p[l.out_w].to_vec(),
                output_bias: p[l.out_b].to_vec(),
            },
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    /// Parses a checkpoint and checks every tensor against the spec's shapes.
    pub fn from_checkpoint_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        ck.spec.validate()?;
        let l = ck.spec.layout();
        let parts = [
            ("hidden_weights", &ck.params.hidden_weights, l.hidden_w.len()),
            ("hidden_bias", &ck.params.hidden_bias, l.hidden_b.len()),
            ("output_weights", &ck.params.output_weights, l.out_w.len()),
            ("output_bias", &ck.params.output_bias, l.out_b.len()),
        ];
        let mut flat = Vec::with_capacity(l.total());
        for (name, values, want) in parts {
            if values.len() != want {
                return Err(ModelError::Checkpoint(format!("{name} has {} values, spec needs {want}", values.len())));
            }
            flat.extend_from_slice(values);
        }
        let params = ModelParams(flat);
        if !params.is_finite() {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            spec: ck.spec,
            hyperparams: ck.hyperparams,
            params,
            history: TrainHistory { epochs: ck.history, best_epoch: ck.best_epoch, best_val_macro_auroc: ck.best_val_macro_auroc },
            seed: ck.seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ModelKind, d: usize, e: usize, h: usize) -> ModelSpec {
        ModelSpec { kind, ehr_dim: d, emb_dim: e, hidden: h }
    }

    #[test]
    fn zero_params_give_half() {
        for kind in ModelKind::ALL {
            let s = spec(kind, 4, 3, 5);
            let p = ModelParams::zeros(&s);
            let out = forward(&s, &p, Some(&[1.0, 0.0, 1.0, 0.0]), Some(&[0.3, -2.0, 1.0])).unwrap();
            assert_eq!(out, [0.5; 3]);
        }
    }

    #[test]
    fn single_weight_gives_three_quarters() {
        let s = spec(ModelKind::EhrLinear, 4, 0, 0);
        let mut p = ModelParams::zeros(&s);
        let l = s.layout();
        p.0[l.out_w.start + 4 + 2] = 3f64.ln();
        let out = forward(&s, &p, Some(&[0.0, 0.0, 1.0, 0.0]), None).unwrap();
        assert!((out[1] - 0.75).abs() < 1e-12);
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn combined_direct_reduces_to_ehr_linear() {
        let lin = spec(ModelKind::EhrLinear, 3, 2, 0);
        let comb = spec(ModelKind::CombinedDirect, 3, 2, 0);
        let lp = ModelParams(vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.7, 0.0, 0.4, 0.9, 0.2, -0.1, 0.05]);
        let mut cp = ModelParams::zeros(&comb);
        for k in 0..3 {
            for j in 0..3 {
                cp.0[k * 5 + 2 + j] = lp.0[k * 3 + j];
            }
            cp.0[15 + k] = lp.0[9 + k];
        }
        let x = [1.0, 0.0, 1.0];
        let a = forward(&lin, &lp, Some(&x), None).unwrap();
        let b = forward(&comb, &cp, Some(&x), Some(&[7.0, -3.0])).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let s = spec(ModelKind::CombinedHidden, 3, 2, 4);
        let p = ModelParams::zeros(&s);
        assert!(forward(&s, &p, Some(&[1.0, 0.0, 1.0]), None).is_err());
        assert!(forward(&s, &p, Some(&[1.0]), Some(&[0.0, 0.0])).is_err());
        assert!(forward(&s, &ModelParams(vec![0.0; 3]), Some(&[1.0, 0.0, 1.0]), Some(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn loss_values() {
        let l = loss(&[0.5, 1e-9, 1e-9], &[1.0, 0.0, 0.0]);
        assert!((l - 2f64.ln()).abs() < 1e-6);
        assert!(loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]) < 1e-6);
        let l = loss(&[0.9, 0.5, 0.1], &[1.0, 0.0, 0.0]);
        let want = -(0.9f64.ln()) - 0.5f64.ln() - 0.9f64.ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.9039).abs() < 1e-4);
    }

    #[test]
    fn gradient_by_hand() {
        let s = spec(ModelKind::EhrLinear, 3, 0, 0);
        let p = ModelParams::zeros(&s);
        let x = [0.0, 1.0, 0.0];
        let batch = [Sample { ehr: Some(&x), emb: None, targets: [1.0, 0.0, 0.0] }];
        let (g, _) = backward(&s, &p, &batch).unwrap();
        let l = s.layout();
        assert_eq!(g.0[l.out_w.start + 1], -0.5);
        assert_eq!(g.0[l.out_w.start + 3 + 1], 0.5);
        assert_eq!(g.0[l.out_w.start], 0.0);
        assert_eq!(g.0[l.out_b.start], -0.5);
    }

    fn fd_check(s: &ModelSpec, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams(ModelParams::init(s, &mut rng).0.iter().map(|v| v * 3.0).collect());
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..s.ehr_dim).map(|_| rng.gen_range(0..2) as f64).collect()).collect();
        let es: Vec<Vec<f64>> = (0..3).map(|_| (0..s.emb_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<Sample> = (0..3)
            .map(|i| Sample {
                ehr: Some(&xs[i]),
                emb: Some(&es[i]),
                targets: [rng.gen_range(0..2) as f64, rng.gen_range(0..2) as f64, rng.gen_range(0..2) as f64],
            })
            .collect();
        let (g, _) = backward(s, &p, &batch).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..p.0.len() {
            let mut plus = p.clone();
            plus.0[i] += h;
            let mut minus = p.clone();
            minus.0[i] -= h;
            let num = (batch_loss(s, &plus, &batch).unwrap() - batch_loss(s, &minus, &batch).unwrap()) / (2.0 * h);
            let rel = (g.0[i] - num).abs() / g.0[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in ModelKind::ALL {
            let s = spec(kind, 5, 4, 6);
            for seed in 0..5 {
                let err = fd_check(&s, seed);
                assert!(err < 1e-4, "{kind:?} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn sgd_recurrence() {
        let hp = HyperParams { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0, ..HyperParams::default() };
        let (mut theta, mut v) = (vec![0.0], vec![0.0]);
        sgd_step(&mut theta, &mut v, &[1.0], &hp).unwrap();
        assert!((theta[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut theta, &mut v, &[1.0], &hp).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-12);
        assert!((theta[0] + 0.29).abs() < 1e-12);

        let hp = HyperParams { learning_rate: 1.0, momentum: 0.9, weight_decay: 0.1, ..HyperParams::default() };
        let (mut theta, mut v) = (vec![1.0], vec![0.0]);
        sgd_step(&mut theta, &mut v, &[0.0], &hp).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);

        let hp = HyperParams { learning_rate: 0.5, momentum: 0.0, weight_decay: 0.0, ..HyperParams::default() };
        let (mut theta, mut v) = (vec![2.0, -1.0], vec![0.3, 0.3]);
        sgd_step(&mut theta, &mut v, &[0.25, 1.5], &hp).unwrap();
        assert_eq!(theta, vec![2.0 - 0.5 * 0.25, -1.0 - 0.5 * 1.5]);

        let hp = HyperParams { learning_rate: f64::MAX, momentum: 0.0, weight_decay: 0.0, ..HyperParams::default() };
        assert_eq!(sgd_step(&mut [0.0], &mut [0.0], &[f64::MAX], &hp), Err(ModelError::NonFiniteUpdate));
    }

    #[test]
    fn early_stopping_counts_patience() {
        let mut es = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..=10 {
            es.observe(epoch, 0.7);
            if es.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(es.best_epoch(), 1);
    }

    fn toy_examples() -> (Vec<Example>, Vec<Example>) {
        // separable: label = x0 for every diagnosis
        let mk = |i: usize| {
            let y = (i % 2) as f64;
            let x = vec![y, 1.0 - y, ((i / 2) % 2) as f64, ((i / 4) % 2) as f64];
            Example { patient_id: format!("p{i}"), ehr: x, embeddings: vec![], targets: [y, y, 1.0 - y] }
        };
        ((0..20).map(mk).collect(), (20..30).map(mk).collect())
    }

    #[test]
    fn training_separable_toy_reaches_perfect_auroc() {
        let (tr, va) = toy_examples();
        let s = ModelSpec::new(ModelKind::EhrLinear, 4, 0);
        let hp = HyperParams { learning_rate: 0.5, ..HyperParams::default() };
        let (p, hist) = train(&s, &hp, &tr, &va, 7).unwrap();
        assert_eq!(hist.best_val_macro_auroc, 1.0);
        let (p2, hist2) = train(&s, &hp, &tr, &va, 7).unwrap();
        assert_eq!(p, p2);
        assert_eq!(hist, hist2);
        let best = hist.epochs.iter().map(|e| e.val_macro_auroc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(hist.best_val_macro_auroc, best);
        assert_eq!(hist.epochs[hist.best_epoch - 1].val_macro_auroc, best);
    }

    #[test]
    fn stationary_at_separable_optimum() {
        // weight large enough that sigmoid saturates: gradient vanishes
        let s = spec(ModelKind::EhrLinear, 1, 0, 0);
        let p = ModelParams(vec![80.0, 80.0, -80.0, -40.0, -40.0, 40.0]);
        let x1 = [1.0];
        let x0 = [0.0];
        let batch = [
            Sample { ehr: Some(&x1), emb: None, targets: [1.0, 1.0, 0.0] },
            Sample { ehr: Some(&x0), emb: None, targets: [0.0, 0.0, 1.0] },
        ];
        let (g, _) = backward(&s, &p, &batch).unwrap();
        let norm = g.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
    }

    #[test]
    fn grid_enumeration() {
        let g = HyperGrid::default();
        assert_eq!(g.configs(&[ModelKind::EhrLinear]).len(), 48);
        assert_eq!(g.configs(Family::Ehr.architectures()).len(), 96);
        let c = g.configs(Family::Combined.architectures());
        assert_eq!(c[0].0, ModelKind::CombinedDirect);
        assert_eq!(c[1].0, ModelKind::CombinedHidden);
        assert_eq!(c[2].1.weight_decay, 1e-3);
        assert_eq!(c[8].1.momentum, 0.9);
        assert_eq!(c[16].1.learning_rate, 1e-3);
    }

    #[test]
    fn sweep_picks_best_and_single_config() {
        let (tr, va) = toy_examples();
        let one = HyperGrid { learning_rates: vec![0.5], momenta: vec![0.9], weight_decays: vec![1e-4], max_epochs: 20, ..HyperGrid::default() };
        let r = sweep(&[ModelKind::EhrLinear], 4, 0, &one, &tr, &va, 1).unwrap();
        assert_eq!(r.runs.len(), 1);
        assert_eq!(r.best.hyperparams.learning_rate, 0.5);

        // a vanishing learning rate cannot move the random init far
        let two = HyperGrid { learning_rates: vec![1e-12, 0.5], ..one };
        let r = sweep(&[ModelKind::EhrLinear], 4, 0, &two, &tr, &va, 1).unwrap();
        assert_eq!(r.best.history.best_val_macro_auroc, 1.0);
        assert!(r.runs[0].val_macro_auroc.unwrap() <= r.runs[1].val_macro_auroc.unwrap());
    }

    #[test]
    fn predict_averages_images() {
        let s = spec(ModelKind::ImageLinear, 0, 1, 0);
        let mut p = ModelParams::zeros(&s);
        p.0[0] = 1.0;
        let a = (0.6f64 / 0.4).ln();
        let b = (0.8f64 / 0.2).ln();
        let out = predict_patient(&s, &p, &[vec![a], vec![b]], None).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-12);
        let one = predict_patient(&s, &p, &[vec![a]], None).unwrap();
        assert!((one[0] - 0.6).abs() < 1e-12);

        let e = spec(ModelKind::EhrLinear, 2, 0, 0);
        let pe = ModelParams::zeros(&e);
        assert_eq!(predict_patient(&e, &pe, &[], Some(&[1.0, 0.0])).unwrap(), [0.5; 3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = ModelSpec::new(ModelKind::CombinedHidden, 6, 3);
        let params = ModelParams::init(&s, &mut ChaCha8Rng::seed_from_u64(9));
        let m = TrainedModel {
            spec: s,
            hyperparams: HyperParams::default(),
            params,
            history: TrainHistory {
                epochs: vec![EpochRecord { epoch: 1, train_loss: 1.5, val_macro_auroc: 0.61 }],
                best_epoch: 1,
                best_val_macro_auroc: 0.61,
            },
            seed: 9,
        };
        let json = m.to_checkpoint_json(None);
        assert_eq!(TrainedModel::from_checkpoint_json(&json).unwrap(), m);
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["params"]["output_bias"] = serde_json::json!([0.0, 0.0]);
        assert!(TrainedModel::from_checkpoint_json(&v.to_string()).is_err());
    }
}
