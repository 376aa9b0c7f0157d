//! Masked movement-segment reconstruction pretraining.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::Header;
use crate::ingest::Window;
use crate::model::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, write_checkpoint,
    ForwardOptions, HSource, ModelConfig, ModelParams, WindowInput,
};
use crate::signal::activity_index;
use crate::tokenizer::{TokenSequence, SEGMENT_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    Random,
    Contiguous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub scheme: MaskScheme,
    pub masked: Vec<bool>,
    /// `(target, source)` pairs; both are visible tokens.
    pub corrupted: Vec<(usize, usize)>,
}

impl MaskPlan {
    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    pub fn n_visible(&self) -> usize {
        self.masked.len() - self.n_masked()
    }

    /// Per-token embedding source for the encoder.
    pub fn h_sources(&self) -> Vec<HSource> {
        let mut src: Vec<HSource> = self
            .masked
            .iter()
            .map(|&m| if m { HSource::Mask } else { HSource::Own })
            .collect();
        for &(t, s) in &self.corrupted {
            src[t] = HSource::Copy(s);
        }
        src
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub corruption_rate: f64,
    pub masked_weight: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Linear warmup length, applied on top of the schedule.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub heldout_fraction: f64,
    pub ai_threshold: f64,
    pub ai_noise_variance: f64,
    pub strata_quantiles: [f64; 2],
    pub subsample_rates: [f64; 3],
    /// Number of time bins for the contiguous scheme (1 s bins on 10 s windows).
    pub time_bins: usize,
    /// Apply activity-index filtering and stratified subsampling to the corpus.
    pub select_windows: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.5,
            corruption_rate: 0.2,
            masked_weight: 100.0,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 5000,
            seed: 0,
            eval_interval: 250,
            checkpoint_interval: 1000,
            heldout_fraction: 0.02,
            ai_threshold: 50.0,
            ai_noise_variance: 0.0,
            strata_quantiles: [0.33, 0.9],
            subsample_rates: [0.25, 0.5, 1.0],
            time_bins: 10,
            select_windows: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::Config("corruption_rate outside [0, 1)".into()));
        }
        if self.masked_weight <= 0.0 {
            return Err(Error::Config("masked_weight must be positive".into()));
        }
        if self.batch_size == 0 || self.time_bins == 0 {
            return Err(Error::Config("batch_size and time_bins must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

const CONTIGUOUS_RETRIES: usize = 32;

fn round_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

fn random_mask<R: Rng>(n: usize, r: f64, rng: &mut R) -> Vec<bool> {
    let k = if n == 1 { 1 } else { round_count(r, n).clamp(1, n - 1) };
    let mut masked = vec![false; n];
    for i in sample(rng, n, k) {
        masked[i] = true;
    }
    masked
}

/// Draws the masking scheme and masked set for one window.
///
/// `spans` are `[start, end)` token extents in seconds. A single-token window
/// is fully masked since no split can leave a visible token.
pub fn sample_masking<R: Rng>(
    spans: &[(f64, f64)],
    window_duration_s: f64,
    r: f64,
    time_bins: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    let n = spans.len();
    if n == 0 {
        return Err(Error::Contract("cannot mask an empty window".into()));
    }
    if rng.random_bool(0.5) {
        let bin_w = window_duration_s / time_bins as f64;
        let k = round_count(r, time_bins).clamp(1, time_bins);
        for _ in 0..CONTIGUOUS_RETRIES {
            let mut bins = vec![false; time_bins];
            for b in sample(rng, time_bins, k) {
                bins[b] = true;
            }
            let masked: Vec<bool> = spans
                .iter()
                .map(|&(s, e)| {
                    bins.iter().enumerate().any(|(b, &on)| {
                        let (lo, hi) = (b as f64 * bin_w, (b + 1) as f64 * bin_w);
                        on && s < hi && e > lo
                    })
                })
                .collect();
            let m = masked.iter().filter(|v| **v).count();
            if m >= 1 && (m < n || n == 1) {
                return Ok(MaskPlan {
                    scheme: MaskScheme::Contiguous,
                    masked,
                    corrupted: Vec::new(),
                });
            }
        }
    }
    Ok(MaskPlan {
        scheme: MaskScheme::Random,
        masked: random_mask(n, r, rng),
        corrupted: Vec::new(),
    })
}

/// Picks `round(rate * |visible|)` visible tokens and a distinct visible source for each.
pub fn sample_corruption<R: Rng>(plan: &mut MaskPlan, rate: f64, rng: &mut R) {
    let visible: Vec<usize> = (0..plan.masked.len()).filter(|&i| !plan.masked[i]).collect();
    plan.corrupted.clear();
    if visible.len() < 2 {
        return;
    }
    let k = round_count(rate, visible.len());
    let mut targets: Vec<usize> = sample(rng, visible.len(), k).into_iter().collect();
    targets.sort_unstable();
    for ti in targets {
        let mut si = rng.random_range(0..visible.len() - 1);
        if si >= ti {
            si += 1;
        }
        plan.corrupted.push((visible[ti], visible[si]));
    }
}

/// Applies a plan to assembled token features (`N x 64`): masked rows get
/// `mask_embed` in the `h` slots, corrupted rows get their source's original `h`.
pub fn apply_corruption(features: ArrayView2<f64>, plan: &MaskPlan, mask_embed: &[f64]) -> Array2<f64> {
    let hd = mask_embed.len();
    let mut out = features.to_owned();
    for (i, &m) in plan.masked.iter().enumerate() {
        if m {
            for (o, v) in out.row_mut(i).iter_mut().zip(mask_embed) {
                *o = *v;
            }
        }
    }
    for &(t, s) in &plan.corrupted {
        for c in 0..hd {
            out[[t, c]] = features[[s, c]];
        }
    }
    out
}

/// Weighted-mean L1 over a padded batch. Returns the loss and `dL/dpred`.
pub fn reconstruction_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    masked: &Array2<bool>,
    pad: &Array2<bool>,
    masked_weight: f64,
) -> Result<(f64, Array3<f64>)> {
    if pred.dim() != target.dim() || masked.dim() != pad.dim() || pred.dim().0 != pad.dim().0 {
        return Err(Error::Contract("shape mismatch in reconstruction loss".into()));
    }
    let (b, n, l) = pred.dim();
    let mut grad = Array3::zeros((b, n, l));
    let mut total_w = 0.0;
    let mut acc = 0.0;
    for bi in 0..b {
        for ni in 0..n {
            if pad[[bi, ni]] {
                continue;
            }
            let w = if masked[[bi, ni]] { masked_weight } else { 1.0 };
            let mut mae = 0.0;
            for k in 0..l {
                let d = pred[[bi, ni, k]] - target[[bi, ni, k]];
                mae += d.abs();
                grad[[bi, ni, k]] = w * sign(d) / l as f64;
            }
            acc += w * mae / l as f64;
            total_w += w;
        }
    }
    if total_w == 0.0 {
        return Err(Error::Contract("no valid tokens in batch".into()));
    }
    grad.mapv_inplace(|g| g / total_w);
    Ok((acc / total_w, grad))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any change.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &PretrainConfig) -> Result<()> {
    adam_step_with_lr(params, grads, state, cfg, cfg.lr)
}

pub fn adam_step_with_lr(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &PretrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in params
        .tensors_mut()
        .into_iter()
        .zip(gs)
        .zip(ms.into_iter().zip(vs))
    {
        ndarray::Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
    Ok(())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Activity-index filter plus stratified subsampling. Output keeps input order.
pub fn select_upstream_windows(windows: &[Window], cfg: &PretrainConfig, seed: u64) -> Vec<Window> {
    let ai: Vec<f64> = windows
        .iter()
        .map(|w| activity_index(w, cfg.ai_noise_variance))
        .collect();
    let kept: Vec<usize> = (0..windows.len()).filter(|&i| ai[i] >= cfg.ai_threshold).collect();
    if kept.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = kept.iter().map(|&i| ai[i]).collect();
    sorted.sort_by(f64::total_cmp);
    let cuts = [
        quantile(&sorted, cfg.strata_quantiles[0]),
        quantile(&sorted, cfg.strata_quantiles[1]),
    ];
    let mut strata: [Vec<usize>; 3] = Default::default();
    for &i in &kept {
        let s = if ai[i] <= cuts[0] {
            0
        } else if ai[i] <= cuts[1] {
            1
        } else {
            2
        };
        strata[s].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (s, members) in strata.iter().enumerate() {
        let rate = if s == 2 { 1.0 } else { cfg.subsample_rates[s] };
        let k = round_count(rate, members.len()).min(members.len());
        chosen.extend(sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| windows[i].clone()).collect()
}

/// Stable hash-based held-out assignment for a window.
pub fn is_heldout(subject_id: &str, window_index: u32, fraction: f64) -> bool {
    let mut h = Sha256::new();
    h.update(subject_id.as_bytes());
    h.update([0u8]);
    h.update(window_index.to_le_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().unwrap());
    (v % 1_000_000) as f64 / 1_000_000.0 < fraction
}

fn spans(seq: &TokenSequence) -> Vec<(f64, f64)> {
    seq.tokens.iter().map(|t| t.span_s(seq.sample_rate_hz)).collect()
}

fn input_for(seq: &TokenSequence, plan: Option<&MaskPlan>) -> WindowInput {
    let mut input = WindowInput::from_tokens(&seq.tokens, seq.sample_rate_hz, seq.window_duration_s);
    if let Some(p) = plan {
        input.h_source = p.h_sources();
    }
    input
}

/// Training loss and gradient for one window, normalized by `total_weight`.
fn window_gradient(
    params: &ModelParams,
    seq: &TokenSequence,
    plan: &MaskPlan,
    masked_weight: f64,
    total_weight: f64,
) -> Result<(f64, ModelParams)> {
    let input = input_for(seq, Some(plan));
    let cache = encoder_forward(params, &input, ForwardOptions::default())?;
    let (y, dcache) = decoder_forward(params, cache.u.view());
    let mut dy = Array2::zeros(y.dim());
    let mut acc = 0.0;
    for i in 0..y.nrows() {
        let w = if plan.masked[i] { masked_weight } else { 1.0 };
        let mut mae = 0.0;
        for k in 0..SEGMENT_LEN {
            let d = y[[i, k]] - input.waveforms[[i, k]];
            mae += d.abs();
            dy[[i, k]] = w * sign(d) / (SEGMENT_LEN as f64 * total_weight);
        }
        acc += w * mae / SEGMENT_LEN as f64;
    }
    let mut grads = params.zeros_like();
    let du = decoder_backward(params, &dcache, dy.view(), &mut grads);
    encoder_backward(params, &cache, du.view(), &mut grads);
    Ok((acc / total_weight, grads))
}

/// Weighted L1 loss and summed gradient over a batch. Per-window gradients are
/// reduced in batch order, so the result does not depend on the thread count.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[(&TokenSequence, MaskPlan)],
    masked_weight: f64,
) -> Result<(f64, ModelParams)> {
    let total: f64 = batch
        .iter()
        .map(|(_, p)| p.n_masked() as f64 * masked_weight + p.n_visible() as f64)
        .sum();
    if total == 0.0 {
        return Err(Error::Contract("no valid tokens in batch".into()));
    }
    let parts: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|(seq, plan)| window_gradient(params, seq, plan, masked_weight, total))
        .collect();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub masked_mae: f64,
    pub masked_mse: f64,
    pub masked_rmse: f64,
    pub pearson_r: f64,
    pub nrmse: f64,
}

impl ReconstructionMetrics {
    pub fn from_pairs(pred: &[f64], target: &[f64]) -> Self {
        let n = pred.len().max(1) as f64;
        let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
        let rmse = mse.sqrt();
        let (mp, mt) = (pred.iter().sum::<f64>() / n, target.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(target) {
            sxy += (p - mp) * (t - mt);
            sxx += (p - mp).powi(2);
            syy += (t - mt).powi(2);
        }
        let r = if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
        let range = target.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - target.iter().cloned().fold(f64::INFINITY, f64::min);
        let nrmse = if range > 0.0 { rmse / range } else { f64::NAN };
        Self {
            masked_mae: mae,
            masked_mse: mse,
            masked_rmse: rmse,
            pearson_r: r,
            nrmse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub masked_mae: f64,
    pub masked_mse: f64,
    pub masked_rmse: f64,
    pub pearson_r: f64,
    pub nrmse: f64,
}

/// Fixed masking plans for held-out evaluation.
pub fn eval_plans(shard: &[&TokenSequence], cfg: &PretrainConfig) -> Result<Vec<MaskPlan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    shard
        .iter()
        .map(|s| sample_masking(&spans(s), s.window_duration_s, cfg.mask_rate, cfg.time_bins, &mut rng))
        .collect()
}

/// Masked-token reconstruction metrics of the model on a shard.
pub fn evaluate_masked(params: &ModelParams, shard: &[&TokenSequence], plans: &[MaskPlan]) -> Result<ReconstructionMetrics> {
    let per: Vec<Result<(Vec<f64>, Vec<f64>)>> = shard
        .par_iter()
        .zip(plans)
        .map(|(seq, plan)| {
            let input = input_for(seq, Some(plan));
            let cache = encoder_forward(params, &input, ForwardOptions::default())?;
            let (y, _) = decoder_forward(params, cache.u.view());
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for i in (0..y.nrows()).filter(|&i| plan.masked[i]) {
                p.extend(y.row(i).iter());
                t.extend(input.waveforms.row(i).iter());
            }
            Ok((p, t))
        })
        .collect();
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    for r in per {
        let (p, t) = r?;
        pred.extend(p);
        target.extend(t);
    }
    Ok(ReconstructionMetrics::from_pairs(&pred, &target))
}

/// Baseline that predicts each masked token as the nearest preceding visible
/// token (or the first visible one when none precedes it).
pub fn copy_last_visible_metrics(shard: &[&TokenSequence], plans: &[MaskPlan]) -> ReconstructionMetrics {
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    for (seq, plan) in shard.iter().zip(plans) {
        let first_visible = plan.masked.iter().position(|m| !m);
        let mut last = None;
        for (i, tok) in seq.tokens.iter().enumerate() {
            if !plan.masked[i] {
                last = Some(i);
                continue;
            }
            let src = last.or(first_visible);
            match src {
                Some(j) => pred.extend(seq.tokens[j].waveform.iter()),
                None => pred.extend(std::iter::repeat_n(0.0, SEGMENT_LEN)),
            }
            target.extend(tok.waveform.iter());
        }
    }
    ReconstructionMetrics::from_pairs(&pred, &target)
}

pub struct PretrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    pub step_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub baseline: Option<ReconstructionMetrics>,
}

/// Where to persist checkpoints and the metrics log.
pub struct PretrainOutput<'a> {
    pub dir: &'a Path,
    pub metrics_file: &'a Path,
    /// Recorded in every checkpoint header.
    pub config_hash: u64,
}

/// Full pretraining run over a tokenized corpus.
pub fn pretrain_loop(
    corpus: &[TokenSequence],
    model_cfg: ModelConfig,
    cfg: &PretrainConfig,
    output: Option<PretrainOutput<'_>>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let usable: Vec<&TokenSequence> = corpus.iter().filter(|s| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let (heldout, mut train): (Vec<&TokenSequence>, Vec<&TokenSequence>) = usable
        .iter()
        .partition(|s| is_heldout(&s.subject_id, s.window_index, cfg.heldout_fraction));
    if train.is_empty() {
        train = heldout.clone();
    }
    let plans = eval_plans(&heldout, cfg)?;
    let baseline = (!heldout.is_empty()).then(|| copy_last_visible_metrics(&heldout, &plans));

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_cfg, &mut init_rng);
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let mut metrics_out = match &output {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            Some(std::fs::File::create(o.metrics_file).map_err(|e| Error::io(o.metrics_file, e))?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut record = |step: usize, loss: f64, params: &ModelParams, metrics: &mut Vec<MetricsRecord>| -> Result<()> {
        if heldout.is_empty() {
            return Ok(());
        }
        let m = evaluate_masked(params, &heldout, &plans)?;
        let rec = MetricsRecord {
            step,
            loss,
            masked_mae: m.masked_mae,
            masked_mse: m.masked_mse,
            masked_rmse: m.masked_rmse,
            pearson_r: m.pearson_r,
            nrmse: m.nrmse,
        };
        log::info!("step {step} loss {loss:.5} masked_mae {:.5}", m.masked_mae);
        if let (Some(f), Some(o)) = (metrics_out.as_mut(), output.as_ref()) {
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(o.metrics_file, e))?;
        }
        metrics.push(rec);
        Ok(())
    };

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = sample(&mut rng, train.len(), train.len()).into_vec();
                cursor = 0;
            }
            let seq = train[order[cursor]];
            cursor += 1;
            let mut plan = sample_masking(&spans(seq), seq.window_duration_s, cfg.mask_rate, cfg.time_bins, &mut rng)?;
            sample_corruption(&mut plan, cfg.corruption_rate, &mut rng);
            batch.push((seq, plan));
        }
        let (loss, grads) = batch_gradient(&params, &batch, cfg.masked_weight)?;
        if step == 0 {
            record(0, loss, &params, &mut metrics)?;
        }
        let warmup = if step < cfg.warmup_steps { (step + 1) as f64 / cfg.warmup_steps as f64 } else { 1.0 };
        let lr = cfg.lr * warmup * cfg.lr_schedule.factor(step, cfg.steps);
        adam_step_with_lr(&mut params, &grads, &mut adam, cfg, lr)?;
        step_losses.push(loss);
        let done = step + 1;
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 || done == cfg.steps {
            record(done, loss, &params, &mut metrics)?;
        }
        if let Some(o) = &output {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 || done == cfg.steps {
                let path = o.dir.join(format!("step_{done:06}.ckpt"));
                let header = Header {
                    config_hash: o.config_hash,
                    seed: cfg.seed,
                };
                write_checkpoint(&path, &params, done as u64, header)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(PretrainOutcome {
        params,
        metrics,
        step_losses,
        checkpoints,
        baseline,
    })
}
