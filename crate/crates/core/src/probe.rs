//! Frozen-feature linear probing.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::GravitySplitter;

pub const SEGMENT_REPR_DIM: usize = 128;
pub const GRAVITY_SAMPLES: usize = 300;
pub const GRAVITY_DIM: usize = 3 * GRAVITY_SAMPLES;

/// Mean then population standard deviation over tokens.
pub fn pool_window(u: ArrayView2<f64>) -> Result<Array1<f64>> {
    let n = u.nrows();
    if n == 0 {
        return Err(Error::Contract("cannot pool an empty window".into()));
    }
    let mean = u.mean_axis(Axis(0)).expect("nonempty");
    let var = u
        .rows()
        .into_iter()
        .fold(Array1::zeros(u.ncols()), |acc, r| acc + (&r - &mean).mapv(|v| v * v))
        / n as f64;
    Ok(concatenate![Axis(0), mean, var.mapv(f64::sqrt)])
}

/// Gradient of [`pool_window`] with respect to `u`.
pub fn pool_window_backward(u: ArrayView2<f64>, pooled: ArrayView1<f64>, d_pooled: ArrayView1<f64>) -> Array2<f64> {
    let (n, d) = u.dim();
    let mean = pooled.slice(s![..d]);
    let std = pooled.slice(s![d..]);
    let dmean = d_pooled.slice(s![..d]);
    let dstd = d_pooled.slice(s![d..]);
    let mut du = Array2::zeros((n, d));
    for (mut row, ur) in du.rows_mut().into_iter().zip(u.rows()) {
        for c in 0..d {
            let mut g = dmean[c] / n as f64;
            if std[c] > 0.0 {
                g += dstd[c] * (ur[c] - mean[c]) / (n as f64 * std[c]);
            }
            row[c] = g;
        }
    }
    du
}

/// Linear interpolation of `x` onto `m` evenly spaced points spanning it.
pub fn resample_linear(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return vec![0.0; m];
    }
    if n == 1 || m == 1 {
        return vec![x[0]; m];
    }
    (0..m)
        .map(|i| {
            let pos = i as f64 * (n - 1) as f64 / (m - 1) as f64;
            let lo = (pos.floor() as usize).min(n - 2);
            let frac = pos - lo as f64;
            x[lo] + (x[lo + 1] - x[lo]) * frac
        })
        .collect()
}

/// Lowpassed raw window resampled to 300 points per axis, axis-major.
pub fn gravity_features(splitter: &GravitySplitter, raw: &[[f64; 3]]) -> Result<Vec<f64>> {
    let g = splitter.gravity(raw)?;
    let mut out = Vec::with_capacity(GRAVITY_DIM);
    for a in 0..3 {
        let axis: Vec<f64> = g.iter().map(|s| s[a]).collect();
        out.extend(resample_linear(&axis, GRAVITY_SAMPLES));
    }
    Ok(out)
}

/// A window's frozen representation plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEmbedding {
    pub subject_id: String,
    pub window_index: u32,
    pub label: Option<u32>,
    pub features: Vec<f64>,
}

/// `[T_j | flat(g_j)]`.
pub fn fuse(segment_repr: &[f64], gravity: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(segment_repr.len() + gravity.len());
    f.extend_from_slice(segment_repr);
    f.extend_from_slice(gravity);
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Scaler {
    /// Zero-variance columns get unit scale.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(x.ncols());
        for r in x.rows() {
            var += &(&r - &mean).mapv(|v| v * v);
        }
        let std = (var / n).mapv(|v: f64| if v > 0.0 { v.sqrt() } else { 1.0 });
        Self { mean, std }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub c_grid: Vec<f64>,
    pub inner_folds: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            inner_folds: 3,
            max_iter: 500,
            grad_tol: 1e-5,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub scaler: Scaler,
    /// `dim x K_present`
    pub weights: Array2<f64>,
    pub intercepts: Array1<f64>,
    /// Global class id of each output column.
    pub classes: Vec<u32>,
    pub c: f64,
    pub n_classes: usize,
}

impl ProbeModel {
    pub fn decision(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let z = self.scaler.transform(x);
        z.dot(&self.weights) + &self.intercepts
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u32> {
        self.decision(x)
            .rows()
            .into_iter()
            .map(|r| self.classes[argmax(r)])
            .collect()
    }

    /// Learned parameter count, `dim * K + K`.
    pub fn num_parameters(&self) -> usize {
        self.weights.len() + self.intercepts.len()
    }
}

fn argmax(r: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in r.iter().enumerate() {
        if *v > r[best] {
            best = i;
        }
    }
    best
}

/// Trace of one L-BFGS solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub losses: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

struct Objective<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    k: usize,
    reg: f64,
}

impl Objective<'_> {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Loss and gradient; the parameter vector packs `W` (row-major `dim x K`) then `b`.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (d, k, n) = (self.dim(), self.k, self.x.nrows());
        let w = ArrayView2::from_shape((d, k), &theta[..d * k]).expect("packed weights");
        let b = ArrayView1::from(&theta[d * k..]);
        let mut logits = self.x.dot(&w) + &b;
        let mut loss = 0.0;
        for (mut row, &yi) in logits.rows_mut().into_iter().zip(self.y) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            loss -= (row[yi] / sum).ln();
            row.mapv_inplace(|v| v / sum);
            row[yi] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        logits.mapv_inplace(|v| v * inv_n);
        let mut gw = self.x.t().dot(&logits);
        let mut reg_term = 0.0;
        for (g, wv) in gw.iter_mut().zip(w.iter()) {
            *g += self.reg * wv;
            reg_term += wv * wv;
        }
        loss += 0.5 * self.reg * reg_term;
        let gb = logits.sum_axis(Axis(0));
        let mut grad = gw.into_raw_vec_and_offset().0;
        grad.extend(gb.iter());
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with monotone Armijo backtracking.
fn lbfgs(obj: &Objective, theta: &mut [f64], max_iter: usize, tol: f64) -> SolveTrace {
    const M: usize = 10;
    let (mut f, mut g) = obj.eval(theta);
    let mut losses = vec![f];
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut gnorm = dot(&g, &g).sqrt();
    for _ in 0..max_iter {
        if gnorm <= tol {
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..50 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (fc, gc) = obj.eval(&cand);
            if fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let s: Vec<f64> = cand.iter().zip(theta.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if hist.len() == M {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        theta.copy_from_slice(&cand);
        f = fc;
        g = gc;
        gnorm = dot(&g, &g).sqrt();
        losses.push(f);
    }
    SolveTrace {
        losses,
        grad_norm: gnorm,
        converged: gnorm <= tol,
    }
}

/// Fits the regression at a fixed `C` on already standardized rows.
pub fn fit_logistic(
    z: ArrayView2<f64>,
    labels: &[u32],
    c: f64,
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Array2<f64>, Array1<f64>, Vec<u32>, SolveTrace)> {
    let classes: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateProbe(format!(
            "training rows contain {} class(es)",
            classes.len()
        )));
    }
    if classes.iter().any(|&c| c as usize >= n_classes) {
        return Err(Error::Contract("label outside class range".into()));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("present class"))
        .collect();
    let k = classes.len();
    let d = z.ncols();
    let obj = Objective {
        x: z,
        y: &y,
        k,
        reg: 1.0 / (c * z.nrows() as f64),
    };
    let mut theta = vec![0.0; d * k + k];
    let trace = lbfgs(&obj, &mut theta, cfg.max_iter, cfg.grad_tol);
    let w = Array2::from_shape_vec((d, k), theta[..d * k].to_vec()).expect("packed weights");
    let b = Array1::from(theta[d * k..].to_vec());
    Ok((w, b, classes, trace))
}

fn rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Standardize, pick `C` by subject-wise inner CV, refit on all training rows.
pub fn fit_probe(
    x: ArrayView2<f64>,
    labels: &[u32],
    subjects: &[String],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    let distinct: BTreeSet<u32> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateProbe("single-class training data".into()));
    }
    let c = select_c(x, labels, subjects, n_classes, cfg)?;
    let scaler = Scaler::fit(x);
    let z = scaler.transform(x);
    let (weights, intercepts, classes, _) = fit_logistic(z.view(), labels, c, n_classes, cfg)?;
    Ok(ProbeModel {
        scaler,
        weights,
        intercepts,
        classes,
        c,
        n_classes,
    })
}

/// Subject-wise fold assignment: seeded shuffle of sorted subjects, dealt round-robin.
pub fn subject_folds(subjects: &[String], k: usize, seed: u64) -> Vec<Vec<String>> {
    let mut uniq: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniq.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, s) in uniq.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    folds
}

fn select_c(x: ArrayView2<f64>, labels: &[u32], subjects: &[String], n_classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    let n_subj = subjects.iter().collect::<BTreeSet<_>>().len();
    let k = cfg.inner_folds.min(n_subj);
    if cfg.c_grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    if k < 2 || cfg.c_grid.len() == 1 {
        log::warn!("inner CV needs at least two subjects; using C = {}", cfg.c_grid[0]);
        return Ok(cfg.c_grid[0]);
    }
    let folds = subject_folds(subjects, k, cfg.seed);
    let mut best = (f64::NEG_INFINITY, cfg.c_grid[0]);
    let mut grid = cfg.c_grid.clone();
    grid.sort_by(f64::total_cmp);
    for &c in &grid {
        let mut scores = Vec::new();
        for fold in &folds {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| !fold.contains(&subjects[i]));
            if te.is_empty() {
                continue;
            }
            let tr_labels: Vec<u32> = tr.iter().map(|&i| labels[i]).collect();
            if tr_labels.iter().collect::<BTreeSet<_>>().len() < 2 {
                continue;
            }
            let xtr = rows(x, &tr);
            let scaler = Scaler::fit(xtr.view());
            let (w, b, classes, _) = fit_logistic(scaler.transform(xtr.view()).view(), &tr_labels, c, n_classes, cfg)?;
            let model = ProbeModel {
                scaler,
                weights: w,
                intercepts: b,
                classes,
                c,
                n_classes,
            };
            let pred = model.predict(rows(x, &te).view());
            let truth: Vec<u32> = te.iter().map(|&i| labels[i]).collect();
            scores.push(macro_f1(&pred, &truth, n_classes));
        }
        if scores.is_empty() {
            continue;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        // Strict improvement keeps the smaller C on ties.
        if mean > best.0 {
            best = (mean, c);
        }
    }
    Ok(best.1)
}

pub fn confusion_matrix(pred: &[u32], labels: &[u32], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(labels) {
        m[t as usize][p as usize] += 1;
    }
    m
}

/// Unweighted mean of per-class F1 over classes that occur in either vector.
pub fn macro_f1(pred: &[u32], labels: &[u32], n_classes: usize) -> f64 {
    let cm = confusion_matrix(pred, labels, n_classes);
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let tp = cm[c][c] as f64;
        let actual: usize = cm[c].iter().sum();
        let predicted: usize = cm.iter().map(|r| r[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        counted += 1;
        if tp > 0.0 {
            let p = tp / predicted as f64;
            let r = tp / actual as f64;
            total += 2.0 * p * r / (p + r);
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
