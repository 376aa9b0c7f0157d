use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, silhouette, KMeans};
use crate::error::{Error, Result};
use crate::probe::{fit_logistic, ProbeConfig, Scaler};

/// Supplies per-token embeddings for windows presented in a given token order.
pub trait TokenEmbeddingSource: Sync {
    fn n_windows(&self) -> usize;
    fn window_len(&self, window: usize) -> usize;
    /// Non-contextual and contextual embeddings (rows follow `order`).
    fn embed(&self, window: usize, order: &[usize]) -> Result<(Array2<f64>, Array2<f64>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntaxConfig {
    pub k_sweep: Vec<usize>,
    pub kmeans_iters: usize,
    /// Token sample used to fit the vocabulary.
    pub fit_sample: usize,
    pub silhouette_sample: usize,
    pub test_fraction: f64,
    pub c: f64,
    pub seed: u64,
}

impl Default for SyntaxConfig {
    fn default() -> Self {
        Self {
            k_sweep: vec![16, 32, 64, 128, 256],
            kmeans_iters: 50,
            fit_sample: 20_000,
            silhouette_sample: 10_000,
            test_fraction: 0.2,
            c: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntaxProbeResult {
    pub k: usize,
    pub silhouette: f64,
    pub accuracy_contextual: f64,
    pub accuracy_noncontextual: f64,
    pub accuracy_markov: f64,
    pub accuracy_shuffle: f64,
    pub n_unique_bigrams: usize,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigramSplit {
    pub train: BTreeSet<(usize, usize)>,
    pub test: BTreeSet<(usize, usize)>,
}

/// Full output including the artefacts needed to audit the split.
#[derive(Debug, Clone)]
pub struct SyntaxProbeRun {
    pub result: SyntaxProbeResult,
    pub split: BigramSplit,
    /// Bigram types of the instances the contextual classifier trained on.
    pub trained_types: BTreeSet<(usize, usize)>,
    /// Per-window id multisets before and after shuffling.
    pub ids: Vec<Vec<usize>>,
    pub shuffled_ids: Vec<Vec<usize>>,
    pub vocabulary: KMeans,
}

struct Instances {
    rows: Vec<(usize, usize)>,
    next: Vec<usize>,
    types: Vec<(usize, usize)>,
}

fn instances(ids: &[Vec<usize>], keep: impl Fn(&(usize, usize)) -> bool) -> Instances {
    let mut out = Instances {
        rows: Vec::new(),
        next: Vec::new(),
        types: Vec::new(),
    };
    for (w, seq) in ids.iter().enumerate() {
        for i in 0..seq.len().saturating_sub(1) {
            let t = (seq[i], seq[i + 1]);
            if keep(&t) {
                out.rows.push((w, i));
                out.next.push(seq[i + 1]);
                out.types.push(t);
            }
        }
    }
    out
}

fn gather(emb: &[Array2<f64>], rows: &[(usize, usize)]) -> Array2<f64> {
    let dim = emb.first().map_or(0, |e| e.ncols());
    Array2::from_shape_fn((rows.len(), dim), |(r, c)| emb[rows[r].0][[rows[r].1, c]])
}

fn linear_accuracy(
    emb: &[Array2<f64>],
    train: &Instances,
    test: &Instances,
    k: usize,
    c: f64,
) -> Result<f64> {
    if test.rows.is_empty() {
        return Ok(0.0);
    }
    let labels: Vec<u32> = train.next.iter().map(|&v| v as u32).collect();
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Ok(0.0);
    }
    let xtr = gather(emb, &train.rows);
    let scaler = Scaler::fit(xtr.view());
    let (w, b, classes, _) = fit_logistic(
        scaler.transform(xtr.view()).view(),
        &labels,
        c,
        k,
        &ProbeConfig::default(),
    )?;
    let xte = scaler.transform(gather(emb, &test.rows).view());
    let scores = xte.dot(&w) + &b;
    let hits = scores
        .axis_iter(Axis(0))
        .zip(&test.next)
        .filter(|(row, &truth)| {
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            classes[best] as usize == truth
        })
        .count();
    Ok(hits as f64 / test.rows.len() as f64)
}

/// Vocabulary induction, held-out bigram split and next-type accuracies.
pub fn syntax_probe<S: TokenEmbeddingSource + ?Sized>(source: &S, cfg: &SyntaxConfig) -> Result<SyntaxProbeRun> {
    let n_windows = source.n_windows();
    let identity: Vec<Vec<usize>> = (0..n_windows).map(|w| (0..source.window_len(w)).collect()).collect();
    let mut z = Vec::with_capacity(n_windows);
    let mut u = Vec::with_capacity(n_windows);
    for (w, order) in identity.iter().enumerate() {
        let (zw, uw) = source.embed(w, order)?;
        z.push(zw);
        u.push(uw);
    }
    let total: usize = z.iter().map(|a| a.nrows()).sum();
    let dim = z.first().map_or(0, |a| a.ncols());
    let all_z = Array2::from_shape_vec(
        (total, dim),
        z.iter().flat_map(|a| a.iter().copied()).collect(),
    )
    .map_err(|e| Error::Contract(e.to_string()))?;

    // Vocabulary over non-contextual embeddings, K by silhouette.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fit_idx: Vec<usize> = {
        let mut v = sample(&mut rng, total, cfg.fit_sample.min(total)).into_vec();
        v.sort_unstable();
        v
    };
    let fit_rows = all_z.select(Axis(0), &fit_idx);
    let sil_idx: Vec<usize> = {
        let mut v = sample(&mut rng, fit_rows.nrows(), cfg.silhouette_sample.min(fit_rows.nrows())).into_vec();
        v.sort_unstable();
        v
    };
    let sil_rows = fit_rows.select(Axis(0), &sil_idx);
    let mut best: Option<(f64, usize, KMeans)> = None;
    for &k in &cfg.k_sweep {
        if total < 2 * k {
            continue;
        }
        let km = kmeans(fit_rows.view(), k, cfg.seed ^ k as u64, cfg.kmeans_iters)?;
        let labels: Vec<usize> = sil_idx.iter().map(|&i| km.assignments[i]).collect();
        let s = silhouette(sil_rows.view(), &labels, k);
        if best.as_ref().is_none_or(|(bs, _, _)| s > *bs) {
            best = Some((s, k, km));
        }
    }
    let Some((sil, k, vocab)) = best else {
        return Err(Error::Vocabulary(format!(
            "{total} tokens cannot support any K in {:?}",
            cfg.k_sweep
        )));
    };
    let ids: Vec<Vec<usize>> = z
        .iter()
        .map(|zw| zw.rows().into_iter().map(|r| vocab.assign(r)).collect())
        .collect();

    // Held-out bigram types.
    let all_types: BTreeSet<(usize, usize)> = instances(&ids, |_| true).types.into_iter().collect();
    let mut types: Vec<(usize, usize)> = all_types.iter().copied().collect();
    types.shuffle(&mut rng);
    let n_test = ((cfg.test_fraction * types.len() as f64).round() as usize).min(types.len());
    let split = BigramSplit {
        test: types[..n_test].iter().copied().collect(),
        train: types[n_test..].iter().copied().collect(),
    };
    let train = instances(&ids, |t| split.train.contains(t));
    let test = instances(&ids, |t| split.test.contains(t));
    let trained_types: BTreeSet<(usize, usize)> = train.types.iter().copied().collect();

    let acc_ctx = linear_accuracy(&u, &train, &test, k, cfg.c)?;
    let acc_nonctx = linear_accuracy(&z, &train, &test, k, cfg.c)?;

    // Markov: modal successor per type, then the global mode.
    let mut succ: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut global: BTreeMap<usize, usize> = BTreeMap::new();
    for &(a, b) in &train.types {
        *succ.entry(a).or_default().entry(b).or_default() += 1;
        *global.entry(b).or_default() += 1;
    }
    let modal = |m: &BTreeMap<usize, usize>| m.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0))).map(|(k, _)| *k);
    let global_mode = modal(&global);
    let markov_hits = test
        .types
        .iter()
        .filter(|(a, b)| succ.get(a).and_then(modal).or(global_mode) == Some(*b))
        .count();
    let acc_markov = if test.types.is_empty() { 0.0 } else { markov_hits as f64 / test.types.len() as f64 };

    // Shuffle control: permute tokens within each window and re-embed.
    let mut shuffled_u = Vec::with_capacity(n_windows);
    let mut shuffled_ids = Vec::with_capacity(n_windows);
    for (w, order) in identity.iter().enumerate() {
        let mut perm = order.clone();
        perm.shuffle(&mut rng);
        let (_, uw) = source.embed(w, &perm)?;
        shuffled_ids.push(perm.iter().map(|&i| ids[w][i]).collect::<Vec<_>>());
        shuffled_u.push(uw);
    }
    let strain = instances(&shuffled_ids, |t| split.train.contains(t));
    let stest = instances(&shuffled_ids, |t| split.test.contains(t));
    let acc_shuffle = linear_accuracy(&shuffled_u, &strain, &stest, k, cfg.c)?;

    Ok(SyntaxProbeRun {
        result: SyntaxProbeResult {
            k,
            silhouette: sil,
            accuracy_contextual: acc_ctx,
            accuracy_noncontextual: acc_nonctx,
            accuracy_markov: acc_markov,
            accuracy_shuffle: acc_shuffle,
            n_unique_bigrams: all_types.len(),
            chance: 1.0 / k as f64,
        },
        split,
        trained_types,
        ids,
        shuffled_ids,
        vocabulary: vocab,
    })
}
