//! Subject-disjoint evaluation: split plans, the probe protocol, data-efficiency
//! sweeps, the syntax probe and end-to-end finetuning.

mod finetune;
mod kmeans;
mod syntax;

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{confusion_matrix, fit_probe, macro_f1, ProbeConfig, WindowEmbedding};

pub use finetune::{finetune_end_to_end, FinetuneConfig, FinetuneExample, FinetuneOutcome};
pub use kmeans::{kmeans, silhouette, KMeans};
pub use syntax::{
    syntax_probe, BigramSplit, SyntaxConfig, SyntaxProbeResult, SyntaxProbeRun, TokenEmbeddingSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Losocv,
    Kfold5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

impl SplitPlan {
    /// Errors if any fold shares a subject between train and test.
    pub fn check_disjoint(&self) -> Result<()> {
        for (i, f) in self.folds.iter().enumerate() {
            let train: BTreeSet<&String> = f.train.iter().collect();
            if let Some(s) = f.test.iter().find(|s| train.contains(s)) {
                return Err(Error::Split(format!("subject {s} in both train and test of fold {i}")));
            }
        }
        Ok(())
    }
}

/// Leave-one-subject-out up to 10 subjects, otherwise seeded 5-fold.
pub fn make_split_plan(subjects: &[String], seed: u64) -> Result<SplitPlan> {
    let n = subjects.iter().collect::<BTreeSet<_>>().len();
    let mode = if n <= 10 { SplitMode::Losocv } else { SplitMode::Kfold5 };
    make_split_plan_with(subjects, mode, seed)
}

pub fn make_split_plan_with(subjects: &[String], mode: SplitMode, seed: u64) -> Result<SplitPlan> {
    let uniq: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if uniq.len() < 2 {
        return Err(Error::Split(format!("need at least 2 subjects, got {}", uniq.len())));
    }
    let groups: Vec<Vec<String>> = match mode {
        SplitMode::Losocv => uniq.iter().map(|s| vec![s.clone()]).collect(),
        SplitMode::Kfold5 => {
            if uniq.len() < 5 {
                return Err(Error::Split(format!("5-fold split needs 5 subjects, got {}", uniq.len())));
            }
            let mut shuffled = uniq.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (base, extra) = (shuffled.len() / 5, shuffled.len() % 5);
            let mut out = Vec::with_capacity(5);
            let mut start = 0;
            for f in 0..5 {
                let size = base + usize::from(f < extra);
                let mut g = shuffled[start..start + size].to_vec();
                g.sort();
                out.push(g);
                start += size;
            }
            out
        }
    };
    let folds = groups
        .into_iter()
        .map(|test| Fold {
            train: uniq.iter().filter(|s| !test.contains(s)).cloned().collect(),
            test,
        })
        .collect();
    let plan = SplitPlan { mode, folds, seed };
    plan.check_disjoint()?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub macro_f1: f64,
    pub n_test_windows: usize,
    pub c: f64,
    pub confusion: Vec<Vec<usize>>,
    pub train_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub folds: Vec<FoldResult>,
    pub skipped_folds: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation over evaluated folds.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn matrix(rows: &[&WindowEmbedding]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i].features[j])
}

/// One fold of the protocol with an explicit training-subject list.
fn run_fold(
    embeddings: &[WindowEmbedding],
    n_classes: usize,
    fold_idx: usize,
    train_subjects: &[String],
    test_subjects: &[String],
    cfg: &ProbeConfig,
) -> Result<Option<FoldResult>> {
    let train_set: BTreeSet<&String> = train_subjects.iter().collect();
    let test_set: BTreeSet<&String> = test_subjects.iter().collect();
    if train_set.iter().any(|s| test_set.contains(s)) {
        return Err(Error::Split(format!("fold {fold_idx} is not subject-disjoint")));
    }
    let labelled = embeddings.iter().filter(|e| e.label.is_some());
    let (train, test): (Vec<&WindowEmbedding>, Vec<&WindowEmbedding>) = labelled
        .filter(|e| train_set.contains(&e.subject_id) || test_set.contains(&e.subject_id))
        .partition(|e| train_set.contains(&e.subject_id));
    if test.is_empty() {
        log::warn!("fold {fold_idx} has no labelled test windows; skipped");
        return Ok(None);
    }
    let y_train: Vec<u32> = train.iter().map(|e| e.label.unwrap()).collect();
    if y_train.iter().collect::<BTreeSet<_>>().len() < 2 {
        log::warn!("fold {fold_idx} has single-class training data; skipped");
        return Ok(None);
    }
    let subj: Vec<String> = train.iter().map(|e| e.subject_id.clone()).collect();
    let model = fit_probe(matrix(&train).view(), &y_train, &subj, n_classes, cfg)?;
    let pred = model.predict(matrix(&test).view());
    let truth: Vec<u32> = test.iter().map(|e| e.label.unwrap()).collect();
    Ok(Some(FoldResult {
        fold: fold_idx,
        macro_f1: macro_f1(&pred, &truth, n_classes),
        n_test_windows: test.len(),
        c: model.c,
        confusion: confusion_matrix(&pred, &truth, n_classes),
        train_subjects: train_subjects.to_vec(),
    }))
}

fn aggregate(results: Vec<(usize, Option<FoldResult>)>) -> ProtocolResult {
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results {
        match r {
            Some(r) => folds.push(r),
            None => skipped.push(i),
        }
    }
    let scores: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
    let (mean, std) = mean_std(&scores);
    ProtocolResult {
        folds,
        skipped_folds: skipped,
        mean,
        std,
    }
}

/// Standardize, select `C` on training subjects, refit, score held-out subjects.
pub fn run_probe_protocol(
    embeddings: &[WindowEmbedding],
    n_classes: usize,
    plan: &SplitPlan,
    cfg: &ProbeConfig,
) -> Result<ProtocolResult> {
    plan.check_disjoint()?;
    let mut out = Vec::with_capacity(plan.folds.len());
    for (i, f) in plan.folds.iter().enumerate() {
        out.push((i, run_fold(embeddings, n_classes, i, &f.train, &f.test, cfg)?));
    }
    Ok(aggregate(out))
}

/// `round(f * n)`, at least one.
pub fn subsample_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).max(1).min(n)
}

fn subsample_seed(seed: u64, fold: usize, fraction: f64) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fraction.to_bits().rotate_left(17)
}

/// Re-runs the protocol with a seeded subset of each fold's training subjects.
pub fn data_efficiency_sweep(
    embeddings: &[WindowEmbedding],
    n_classes: usize,
    plan: &SplitPlan,
    fractions: &[f64],
    cfg: &ProbeConfig,
) -> Result<Vec<(f64, ProtocolResult)>> {
    plan.check_disjoint()?;
    let mut out = Vec::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let mut results = Vec::new();
        for (i, f) in plan.folds.iter().enumerate() {
            let k = subsample_count(fraction, f.train.len());
            if k == 0 {
                log::warn!("fraction {fraction} leaves no training subjects in fold {i}");
                results.push((i, None));
                continue;
            }
            let train: Vec<String> = if k == f.train.len() {
                f.train.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(subsample_seed(plan.seed, i, fraction));
                let mut picked: Vec<String> = f.train.choose_multiple(&mut rng, k).cloned().collect();
                picked.sort();
                picked
            };
            results.push((i, run_fold(embeddings, n_classes, i, &train, &f.test, cfg)?));
        }
        out.push((fraction, aggregate(results)));
    }
    Ok(out)
}
