//! Randomly initialized encoder trained end to end with a linear head.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encoder_backward, encoder_forward, ForwardOptions, ModelConfig, ModelParams, WindowInput};
use crate::pretrain::{adam_step, AdamState, PretrainConfig};
use crate::probe::{macro_f1, pool_window, pool_window_backward, Scaler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    /// Share of training subjects held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            max_steps: 2000,
            eval_interval: 50,
            patience: 5,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneExample {
    pub input: WindowInput,
    pub gravity: Option<Vec<f64>>,
    pub label: u32,
    pub subject_id: String,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParams,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub gravity_scaler: Option<Scaler>,
    pub steps_run: usize,
    pub best_val_f1: f64,
}

struct Head {
    w: Array2<f64>,
    b: Array1<f64>,
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
}

fn features(
    params: &ModelParams,
    ex: &FinetuneExample,
    scaler: Option<&Scaler>,
) -> Result<(Array1<f64>, crate::model::EncoderCache, Array1<f64>)> {
    let cache = encoder_forward(params, &ex.input, ForwardOptions::default())?;
    let pooled = pool_window(cache.u.view())?;
    let mut f = pooled.to_vec();
    if let (Some(g), Some(sc)) = (&ex.gravity, scaler) {
        let g = Array2::from_shape_vec((1, g.len()), g.clone()).expect("row");
        f.extend(sc.transform(g.view()).iter());
    }
    Ok((Array1::from(f), cache, pooled))
}

fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

impl FinetuneOutcome {
    pub fn predict(&self, examples: &[FinetuneExample]) -> Result<Vec<u32>> {
        examples
            .iter()
            .map(|ex| {
                let (f, _, _) = features(&self.params, ex, self.gravity_scaler.as_ref())?;
                let z = f.dot(&self.head_w) + &self.head_b;
                Ok((0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b }) as u32)
            })
            .collect()
    }
}

/// Cross-entropy finetuning with early stopping on held-out training subjects.
pub fn finetune_end_to_end(
    train: &[FinetuneExample],
    n_classes: usize,
    model_cfg: ModelConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if train.iter().map(|e| e.label).collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::DegenerateProbe("single-class training data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subjects: Vec<&String> = train.iter().map(|e| &e.subject_id).collect::<BTreeSet<_>>().into_iter().collect();
    subjects.shuffle(&mut rng);
    let n_val = if subjects.len() >= 2 {
        ((cfg.val_fraction * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1)
    } else {
        0
    };
    let val_subj: BTreeSet<&String> = subjects[..n_val].iter().copied().collect();
    let (val, fit): (Vec<&FinetuneExample>, Vec<&FinetuneExample>) =
        train.iter().partition(|e| val_subj.contains(&e.subject_id));

    let gravity_scaler = fit.first().and_then(|e| e.gravity.as_ref()).map(|g| {
        let rows = Array2::from_shape_fn((fit.len(), g.len()), |(i, j)| fit[i].gravity.as_ref().unwrap()[j]);
        Scaler::fit(rows.view())
    });
    let mut params = ModelParams::init(model_cfg, &mut rng);
    let dim = 2 * model_cfg.d_model + gravity_scaler.as_ref().map_or(0, |s| s.mean.len());
    let mut head = Head {
        w: Array2::zeros((dim, n_classes)),
        b: Array1::zeros(n_classes),
        mw: Array2::zeros((dim, n_classes)),
        vw: Array2::zeros((dim, n_classes)),
        mb: Array1::zeros(n_classes),
        vb: Array1::zeros(n_classes),
    };
    let opt = PretrainConfig {
        lr: cfg.lr,
        ..PretrainConfig::default()
    };
    let mut adam = AdamState::new(&params);

    let snapshot = |params: &ModelParams, head: &Head, scaler: &Option<Scaler>, steps: usize, f1: f64| FinetuneOutcome {
        params: params.clone(),
        head_w: head.w.clone(),
        head_b: head.b.clone(),
        gravity_scaler: scaler.clone(),
        steps_run: steps,
        best_val_f1: f1,
    };
    let mut best = snapshot(&params, &head, &gravity_scaler, 0, f64::NEG_INFINITY);
    let mut stale = 0;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.max_steps {
        let mut grads = params.zeros_like();
        let mut gw = Array2::<f64>::zeros(head.w.dim());
        let mut gb = Array1::<f64>::zeros(n_classes);
        let bs = cfg.batch_size.min(fit.len()).max(1);
        for _ in 0..bs {
            if cursor == order.len() {
                order = sample(&mut rng, fit.len(), fit.len()).into_vec();
                cursor = 0;
            }
            let ex = fit[order[cursor]];
            cursor += 1;
            let (f, cache, pooled) = features(&params, ex, gravity_scaler.as_ref())?;
            let mut p = softmax((f.dot(&head.w) + &head.b).view());
            p[ex.label as usize] -= 1.0;
            p /= bs as f64;
            for i in 0..dim {
                let mut row = gw.row_mut(i);
                row.scaled_add(f[i], &p);
            }
            gb += &p;
            let df = head.w.dot(&p);
            let dpool = df.slice(s![..2 * model_cfg.d_model]);
            let du = pool_window_backward(cache.u.view(), pooled.view(), dpool);
            encoder_backward(&params, &cache, du.view(), &mut grads);
        }
        adam_step(&mut params, &grads, &mut adam, &opt)?;
        let t = adam.t as i32;
        let (c1, c2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
        for ((w, g), (m, v)) in head
            .w
            .iter_mut()
            .chain(head.b.iter_mut())
            .zip(gw.iter().chain(gb.iter()))
            .zip(head.mw.iter_mut().chain(head.mb.iter_mut()).zip(head.vw.iter_mut().chain(head.vb.iter_mut())))
        {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            *w -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.adam_eps);
        }
        let done = step + 1;
        if done % cfg.eval_interval.max(1) == 0 || done == cfg.max_steps {
            let current = snapshot(&params, &head, &gravity_scaler, done, 0.0);
            let score = if val.is_empty() {
                0.0
            } else {
                let owned: Vec<FinetuneExample> = val.iter().map(|e| (*e).clone()).collect();
                let pred = current.predict(&owned)?;
                let truth: Vec<u32> = val.iter().map(|e| e.label).collect();
                macro_f1(&pred, &truth, n_classes)
            };
            if score > best.best_val_f1 || val.is_empty() {
                best = FinetuneOutcome {
                    best_val_f1: score,
                    ..current
                };
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(best)
}
