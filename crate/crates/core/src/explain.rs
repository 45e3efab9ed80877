//! Grouped permutation importance over the EHR feature blocks.

use std::collections::BTreeMap;
use std::ops::Range;

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{Diagnosis, PerDiagnosis};
use crate::eval::{auroc, EvalError};
use crate::featurize::FittedFeaturizer;
use crate::models::{Example, Scorer};
use crate::stats::{average_ranks, pearson};

pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.6;
pub const DEFAULT_REPEATS: usize = 10;
pub const TOP_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("need at least 2 patients, got {0}")]
    TooFewPatients(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub id: usize,
    pub members: Vec<String>,
}

impl FeatureGroup {
    pub fn label(&self) -> String {
        self.members.join(";")
    }
}

/// Connected components of the graph linking variables whose per-patient
/// signals have `|r| > threshold`. Constant variables stay singletons.
/// `signals[p][v]` is patient `p`'s signal for `names[v]`. Group ids follow
/// the first member's position in `names`; members keep that order too.
pub fn correlation_groups(signals: &[Vec<f64>], names: &[String], threshold: f64) -> Result<Vec<FeatureGroup>, ExplainError> {
    if signals.len() < 2 {
        return Err(ExplainError::TooFewPatients(signals.len()));
    }
    let v = names.len();
    if let Some(row) = signals.iter().find(|r| r.len() != v) {
        return Err(ExplainError::Shape(format!("signal row has {} values for {v} variables", row.len())));
    }
    let columns: Vec<Vec<f64>> = (0..v).map(|j| signals.iter().map(|r| r[j]).collect()).collect();
    let mut uf = UnionFind::<usize>::new(v);
    for a in 0..v {
        for b in a + 1..v {
            if let Some(r) = pearson(&columns[a], &columns[b]) {
                if r.abs() > threshold {
                    uf.union(a, b);
                }
            }
        }
    }
    let mut by_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups: Vec<FeatureGroup> = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let root = uf.find(j);
        let gi = *by_root.entry(root).or_insert_with(|| {
            groups.push(FeatureGroup { id: groups.len(), members: Vec::new() });
            groups.len() - 1
        });
        groups[gi].members.push(name.clone());
    }
    Ok(groups)
}

/// Feature-vector index ranges covered by each group's variables.
pub fn group_blocks(featurizer: &FittedFeaturizer, groups: &[FeatureGroup]) -> Result<Vec<Vec<Range<usize>>>, ExplainError> {
    let blocks: BTreeMap<String, Range<usize>> = featurizer.blocks().into_iter().map(|b| (b.name, b.range)).collect();
    groups
        .iter()
        .map(|g| {
            g.members
                .iter()
                .map(|m| blocks.get(m).cloned().ok_or_else(|| ExplainError::UnknownVariable(m.clone())))
                .collect()
        })
        .collect()
}

/// Copies the group's blocks from `source[perm[i]]` into row `i`, leaving the
/// other features and the images untouched.
pub fn permute_blocks(test: &[Example], blocks: &[Range<usize>], perm: &[usize]) -> Vec<Example> {
    let mut out = test.to_vec();
    for (i, &src) in perm.iter().enumerate() {
        for r in blocks {
            out[i].ehr[r.clone()].copy_from_slice(&test[src].ehr[r.clone()]);
        }
    }
    out
}

fn scores<S: Scorer + ?Sized>(scorer: &S, set: &[Example]) -> Vec<[f64; 3]> {
    set.iter().map(|ex| scorer.score(&ex.ehr, &ex.embeddings)).collect()
}

fn labels(set: &[Example], d: Diagnosis) -> Vec<bool> {
    set.iter().map(|e| e.label(d)).collect()
}

fn auroc_for(probs: &[[f64; 3]], y: &[bool], d: Diagnosis) -> Result<f64, EvalError> {
    let s: Vec<f64> = probs.iter().map(|p| p[d.index()]).collect();
    auroc(&s, y)
}

/// AUROC drop for one explicit permutation of the test rows, per diagnosis.
pub fn drop_for_permutation<S: Scorer + ?Sized>(
    scorer: &S,
    test: &[Example],
    blocks: &[Range<usize>],
    perm: &[usize],
) -> Result<PerDiagnosis<f64>, ExplainError> {
    if perm.len() != test.len() {
        return Err(ExplainError::Shape("permutation length differs from the test set".into()));
    }
    let base = scores(scorer, test);
    let permuted = scores(scorer, &permute_blocks(test, blocks, perm));
    PerDiagnosis::try_from_fn(|d| {
        let y = labels(test, d);
        Ok(auroc_for(&base, &y, d)? - auroc_for(&permuted, &y, d)?)
    })
}

/// Mean AUROC drop per group over `repeats` seeded joint permutations.
/// Group `g` draws its permutations from stream `g` of the seed, so results
/// do not depend on scheduling. Diagnoses with a single class on the test
/// set are `Err(SingleClass)`.
pub fn permutation_importance<S: Scorer + ?Sized>(
    scorer: &S,
    test: &[Example],
    blocks: &[Vec<Range<usize>>],
    repeats: usize,
    seed: u64,
) -> Result<PerDiagnosis<Result<Vec<f64>, EvalError>>, ExplainError> {
    if test.len() < 2 {
        return Err(ExplainError::TooFewPatients(test.len()));
    }
    let base = scores(scorer, test);
    let ys = PerDiagnosis::from_fn(|d| labels(test, d));
    let baseline = PerDiagnosis::from_fn(|d| auroc_for(&base, &ys[d], d));
    let per_group: Vec<PerDiagnosis<f64>> = blocks
        .par_iter()
        .enumerate()
        .map(|(g, group_blocks)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(g as u64);
            let mut sum = PerDiagnosis::new(0.0, 0.0, 0.0);
            let mut perm: Vec<usize> = (0..test.len()).collect();
            for _ in 0..repeats.max(1) {
                perm.shuffle(&mut rng);
                let probs = scores(scorer, &permute_blocks(test, group_blocks, &perm));
                for d in Diagnosis::ALL {
                    if let (Ok(b), Ok(p)) = (&baseline[d], auroc_for(&probs, &ys[d], d)) {
                        sum[d] += b - p;
                    }
                }
                perm.sort_unstable();
            }
            sum.map(|_, s| s / repeats.max(1) as f64)
        })
        .collect();
    Ok(PerDiagnosis::from_fn(|d| match &baseline[d] {
        Ok(_) => Ok(per_group.iter().map(|g| g[d]).collect()),
        Err(e) => Err(e.clone()),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAggregate {
    /// `[split][group]`, 1 = largest drop, ties share the average rank.
    pub ranks: Vec<Vec<f64>>,
    pub mean_rank: Vec<f64>,
    pub mean_drop: Vec<f64>,
    /// Group indices with the smallest mean rank, ties by group index.
    pub top: Vec<usize>,
}

/// Ranks groups by drop within each split and averages across splits.
pub fn aggregate_ranks(drops: &[Vec<f64>]) -> Result<RankAggregate, ExplainError> {
    let g = drops.first().map(Vec::len).ok_or(ExplainError::Shape("no splits".into()))?;
    if drops.iter().any(|d| d.len() != g) {
        return Err(ExplainError::Shape("splits disagree on the number of groups".into()));
    }
    let ranks: Vec<Vec<f64>> = drops.iter().map(|d| average_ranks(&d.iter().map(|x| -x).collect::<Vec<_>>())).collect();
    let s = drops.len() as f64;
    let mean_rank: Vec<f64> = (0..g).map(|j| ranks.iter().map(|r| r[j]).sum::<f64>() / s).collect();
    let mean_drop: Vec<f64> = (0..g).map(|j| drops.iter().map(|r| r[j]).sum::<f64>() / s).collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| mean_rank[a].total_cmp(&mean_rank[b]).then(a.cmp(&b)));
    order.truncate(TOP_K);
    Ok(RankAggregate { ranks, mean_rank, mean_drop, top: order })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub groups: Vec<FeatureGroup>,
    /// `drops[d][split][group]`.
    pub drops: PerDiagnosis<Vec<Vec<f64>>>,
    pub aggregate: PerDiagnosis<Option<RankAggregate>>,
}

impl ImportanceReport {
    /// Builds the report from per-split drops; a diagnosis missing from any
    /// split (single class) gets no aggregate.
    pub fn from_splits(
        groups: Vec<FeatureGroup>,
        per_split: &[PerDiagnosis<Result<Vec<f64>, EvalError>>],
    ) -> Result<Self, ExplainError> {
        let mut drops = PerDiagnosis::new(Vec::new(), Vec::new(), Vec::new());
        let mut complete = PerDiagnosis::new(true, true, true);
        for split in per_split {
            for d in Diagnosis::ALL {
                match &split[d] {
                    Ok(v) => drops[d].push(v.clone()),
                    Err(_) => complete[d] = false,
                }
            }
        }
        let aggregate = PerDiagnosis::try_from_fn(|d| {
            if complete[d] && !drops[d].is_empty() {
                aggregate_ranks(&drops[d]).map(Some)
            } else {
                Ok(None)
            }
        })?;
        Ok(Self { groups, drops, aggregate })
    }

    /// Rows `(diagnosis, group_members, mean_rank, mean_drop, per_split_drops)`
    /// ordered by mean rank within each diagnosis.
    pub fn rows(&self) -> Vec<[String; 5]> {
        let mut out = Vec::new();
        for d in Diagnosis::ALL {
            let Some(agg) = &self.aggregate[d] else { continue };
            let mut order: Vec<usize> = (0..self.groups.len()).collect();
            order.sort_by(|&a, &b| agg.mean_rank[a].total_cmp(&agg.mean_rank[b]).then(a.cmp(&b)));
            for j in order {
                let per_split: Vec<String> = self.drops[d].iter().map(|s| format!("{}", s[j])).collect();
                out.push([
                    d.name().to_string(),
                    self.groups[j].label(),
                    format!("{}", agg.mean_rank[j]),
                    format!("{}", agg.mean_drop[j]),
                    per_split.join(";"),
                ]);
            }
        }
        out
    }
}
