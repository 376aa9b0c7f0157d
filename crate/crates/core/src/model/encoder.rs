//! Forward and backward passes for one window.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis as NdAxis};

use super::ops::{
    col2im, gelu, gelu_grad, im2col, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_backward_params, linear_forward, softmax_rows, LnCache,
};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::tokenizer::{Axis, MovementSegment, SEGMENT_LEN};

/// Where a token's CNN embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HSource {
    /// Its own waveform.
    Own,
    /// The learned mask embedding.
    Mask,
    /// Another token's waveform embedding (visible-token corruption).
    Copy(usize),
}

/// Model input for the valid tokens of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    pub waveforms: Array2<f64>,
    pub axes: Vec<Axis>,
    pub durations_s: Vec<f64>,
    pub times_s: Vec<f64>,
    pub window_duration_s: f64,
    pub h_source: Vec<HSource>,
}

impl WindowInput {
    pub fn from_tokens(tokens: &[MovementSegment], sample_rate_hz: f64, window_duration_s: f64) -> Self {
        let n = tokens.len();
        let mut waveforms = Array2::zeros((n, SEGMENT_LEN));
        for (mut row, t) in waveforms.rows_mut().into_iter().zip(tokens) {
            row.assign(&ArrayView1::from(&t.waveform[..]));
        }
        Self {
            waveforms,
            axes: tokens.iter().map(|t| t.axis).collect(),
            durations_s: tokens
                .iter()
                .map(|t| t.duration_samples as f64 / sample_rate_hz)
                .collect(),
            times_s: tokens.iter().map(|t| t.midpoint_time_s).collect(),
            window_duration_s,
            h_source: vec![HSource::Own; n],
        }
    }

    pub fn len(&self) -> usize {
        self.axes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// When false, both the absolute time embedding and the relative bias are
    /// zeroed (inference-time ablation; weights are untouched).
    pub positional: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { positional: true }
    }
}

struct ConvCache {
    col: Array2<f64>,
    pre: Array2<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

struct TimeCache {
    t: Array2<f64>,
    a1: Array2<f64>,
    g1: Array2<f64>,
}

/// Everything the backward pass needs from one encoder forward.
pub struct EncoderCache {
    conv: Vec<ConvCache>,
    /// Row of each token's waveform in the convolution batch, if it was encoded.
    conv_slot: Vec<Option<usize>>,
    h_source: Vec<HSource>,
    axes: Vec<Axis>,
    time: Option<TimeCache>,
    embed_ln: LnCache,
    buckets: Array2<usize>,
    positional: bool,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    /// Token features `z` (after masking/corruption), `N x d_model`.
    pub z: Array2<f64>,
    /// Contextual embeddings, `N x d_model`.
    pub u: Array2<f64>,
}

fn conv_stack(params: &ModelParams, waveforms: ArrayView2<f64>) -> (Array2<f64>, Vec<ConvCache>) {
    let n = waveforms.nrows();
    let kernel = params.config.kernel;
    let mut x = waveforms
        .to_owned()
        .into_shape_with_order((n * SEGMENT_LEN, 1))
        .expect("contiguous waveforms");
    let mut caches = Vec::with_capacity(params.conv.len());
    for conv in &params.conv {
        let col = im2col(x.view(), SEGMENT_LEN, kernel);
        let pre = linear_forward(col.view(), conv);
        x = pre.mapv(gelu);
        caches.push(ConvCache { col, pre });
    }
    let c_out = x.ncols();
    let h = x
        .into_shape_with_order((n, SEGMENT_LEN, c_out))
        .expect("token-major layout")
        .mean_axis(NdAxis(1))
        .expect("nonempty segment");
    (h, caches)
}

/// CNN embeddings `h` (`N x h_dim`) for a batch of resampled waveforms.
pub fn encode_segments(params: &ModelParams, waveforms: ArrayView2<f64>) -> Array2<f64> {
    conv_stack(params, waveforms).0
}

/// `[h | e(axis) | duration_s]`.
pub fn assemble_token(params: &ModelParams, h: ArrayView1<f64>, axis: Axis, duration_s: f64) -> Array1<f64> {
    let mut z = Array1::zeros(params.config.d_model);
    let hd = params.config.h_dim();
    z.slice_mut(s![..hd]).assign(&h);
    z.slice_mut(s![hd..hd + 3])
        .assign(&params.axis_embed.row(axis.index()));
    z[hd + 3] = duration_s;
    z
}

/// Median-interval relative buckets, `N x N` ids in `[0, 2 * max_rel]`.
pub fn relative_buckets(times_s: &[f64], window_duration_s: f64, max_rel: i64) -> Array2<usize> {
    let n = times_s.len();
    let mut gaps: Vec<f64> = times_s.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let median = match gaps.len() {
        0 => 0.0,
        m if m % 2 == 1 => gaps[m / 2],
        m => 0.5 * (gaps[m / 2 - 1] + gaps[m / 2]),
    };
    let step = if median > 0.0 {
        median
    } else {
        window_duration_s / n.max(1) as f64
    };
    Array2::from_shape_fn((n, n), |(i, k)| {
        let offset = ((times_s[i] - times_s[k]) / step).round() as i64;
        (offset.clamp(-max_rel, max_rel) + max_rel) as usize
    })
}

/// Relative attention bias, `N x N x heads`.
pub fn relative_bias_matrix(params: &ModelParams, times_s: &[f64], window_duration_s: f64) -> Array3<f64> {
    let buckets = relative_buckets(times_s, window_duration_s, params.config.max_rel);
    let (n, heads) = (times_s.len(), params.config.n_heads);
    Array3::from_shape_fn((n, n, heads), |(i, k, h)| params.rel_bias[[buckets[[i, k]], h]])
}

/// `LN(z + p(t_norm))` for a single token.
pub fn absolute_time_embed(params: &ModelParams, z: ArrayView1<f64>, t_norm: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&t_norm) {
        return Err(Error::Contract(format!("normalized time {t_norm} outside [0, 1]")));
    }
    let t = Array2::from_elem((1, 1), t_norm);
    let p = linear_forward(linear_forward(t.view(), &params.time_fc1).mapv(gelu).view(), &params.time_fc2);
    let sum = &z.insert_axis(NdAxis(0)) + &p;
    let (y, _) = layer_norm_forward(sum.view(), &params.embed_norm, params.config.ln_eps);
    Ok(y.row(0).to_owned())
}

fn check_finite(x: &Array2<f64>, layer: usize, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            what: what.to_string(),
        })
    }
}

/// Encoder forward pass producing contextual embeddings `u`.
pub fn encoder_forward(params: &ModelParams, input: &WindowInput, opts: ForwardOptions) -> Result<EncoderCache> {
    let cfg = params.config;
    let n = input.len();
    if n == 0 {
        return Err(Error::Contract("window has no tokens".into()));
    }
    let d = cfg.d_model;
    let hd = cfg.h_dim();

    // Masked tokens never read their own waveform, so only referenced rows
    // go through the CNN.
    let mut conv_slot = vec![None; n];
    for src in &input.h_source {
        match *src {
            HSource::Own | HSource::Mask => {}
            HSource::Copy(j) if j < n => conv_slot[j] = Some(0),
            HSource::Copy(j) => return Err(Error::Contract(format!("corruption source {j} out of range"))),
        }
    }
    for (i, src) in input.h_source.iter().enumerate() {
        if *src == HSource::Own {
            conv_slot[i] = Some(0);
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| conv_slot[i].is_some()).collect();
    for (r, &i) in rows.iter().enumerate() {
        conv_slot[i] = Some(r);
    }
    let (h, conv) = conv_stack(params, input.waveforms.select(NdAxis(0), &rows).view());
    let mut z = Array2::zeros((n, d));
    for i in 0..n {
        let src = match input.h_source[i] {
            HSource::Own => h.row(conv_slot[i].unwrap()),
            HSource::Mask => params.mask_embed.view(),
            HSource::Copy(j) => h.row(conv_slot[j].unwrap()),
        };
        let mut row = z.row_mut(i);
        row.slice_mut(s![..hd]).assign(&src);
        row.slice_mut(s![hd..hd + 3])
            .assign(&params.axis_embed.row(input.axes[i].index()));
        row[hd + 3] = input.durations_s[i];
    }

    let mut x = z.clone();
    let time = if opts.positional {
        let mut t = Array2::zeros((n, 1));
        for (i, &ts) in input.times_s.iter().enumerate() {
            let tn = ts / input.window_duration_s;
            if !(0.0..=1.0).contains(&tn) {
                return Err(Error::Contract(format!("normalized time {tn} outside [0, 1]")));
            }
            t[[i, 0]] = tn;
        }
        let a1 = linear_forward(t.view(), &params.time_fc1);
        let g1 = a1.mapv(gelu);
        x += &linear_forward(g1.view(), &params.time_fc2);
        Some(TimeCache { t, a1, g1 })
    } else {
        None
    };
    let (mut x, embed_ln) = layer_norm_forward(x.view(), &params.embed_norm, cfg.ln_eps);
    check_finite(&x, 0, "token embedding")?;

    let buckets = relative_buckets(&input.times_s, input.window_duration_s, cfg.max_rel);
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (l, b) in params.blocks.iter().enumerate() {
        let (a, ln1) = layer_norm_forward(x.view(), &b.ln1, cfg.ln_eps);
        let q = linear_forward(a.view(), &b.q);
        let k = linear_forward(a.view(), &b.k);
        let v = linear_forward(a.view(), &b.v);
        let mut o = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let cols = s![.., hi * dh..(hi + 1) * dh];
            let mut logits = q.slice(cols).dot(&k.slice(cols).t());
            logits.mapv_inplace(|v| v * scale);
            if opts.positional {
                for ((i, kk), lg) in logits.indexed_iter_mut() {
                    *lg += params.rel_bias[[buckets[[i, kk]], hi]];
                }
            }
            softmax_rows(&mut logits);
            o.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
            probs.push(logits);
        }
        x += &linear_forward(o.view(), &b.o);
        let (c, ln2) = layer_norm_forward(x.view(), &b.ln2, cfg.ln_eps);
        let f1 = linear_forward(c.view(), &b.ff1);
        let g = f1.mapv(gelu);
        x += &linear_forward(g.view(), &b.ff2);
        check_finite(&x, l + 1, "transformer block output")?;
        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            c,
            f1,
            g,
        });
    }
    let (u, final_ln) = layer_norm_forward(x.view(), &params.final_norm, cfg.ln_eps);
    Ok(EncoderCache {
        conv,
        conv_slot,
        h_source: input.h_source.clone(),
        axes: input.axes.clone(),
        time,
        embed_ln,
        buckets,
        positional: opts.positional,
        blocks,
        final_ln,
        z,
        u,
    })
}

/// Backpropagates `du` (`N x d_model`) through the encoder, accumulating into `grads`.
pub fn encoder_backward(params: &ModelParams, cache: &EncoderCache, du: ArrayView2<f64>, grads: &mut ModelParams) {
    let cfg = params.config;
    let n = du.nrows();
    let hd = cfg.h_dim();
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dx = layer_norm_backward(du, &cache.final_ln, &params.final_norm, &mut grads.final_norm);
    for l in (0..params.blocks.len()).rev() {
        let b = &params.blocks[l];
        let bc = &cache.blocks[l];
        let gb = &mut grads.blocks[l];

        // Feed-forward branch.
        let dg = linear_backward(bc.g.view(), dx.view(), &b.ff2, &mut gb.ff2);
        let mut df1 = dg;
        df1.zip_mut_with(&bc.f1, |g, &f| *g *= gelu_grad(f));
        let dc = linear_backward(bc.c.view(), df1.view(), &b.ff1, &mut gb.ff1);
        dx += &layer_norm_backward(dc.view(), &bc.ln2, &b.ln2, &mut gb.ln2);

        // Attention branch.
        let d_o = linear_backward(bc.o.view(), dx.view(), &b.o, &mut gb.o);
        let mut dq = Array2::zeros((n, cfg.d_model));
        let mut dk = Array2::zeros((n, cfg.d_model));
        let mut dv = Array2::zeros((n, cfg.d_model));
        for hi in 0..heads {
            let cols = s![.., hi * dh..(hi + 1) * dh];
            let p = &bc.probs[hi];
            let d_oh = d_o.slice(cols);
            let dp = d_oh.dot(&bc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot));
            }
            if cache.positional {
                for ((i, k), g) in ds.indexed_iter() {
                    grads.rel_bias[[cache.buckets[[i, k]], hi]] += g;
                }
            }
            dq.slice_mut(cols).assign(&(ds.dot(&bc.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&bc.q.slice(cols)) * scale));
        }
        let mut da = linear_backward(bc.a.view(), dq.view(), &b.q, &mut gb.q);
        da += &linear_backward(bc.a.view(), dk.view(), &b.k, &mut gb.k);
        da += &linear_backward(bc.a.view(), dv.view(), &b.v, &mut gb.v);
        dx += &layer_norm_backward(da.view(), &bc.ln1, &b.ln1, &mut gb.ln1);
    }

    let dsum = layer_norm_backward(dx.view(), &cache.embed_ln, &params.embed_norm, &mut grads.embed_norm);
    if let Some(tc) = &cache.time {
        let dg1 = linear_backward(tc.g1.view(), dsum.view(), &params.time_fc2, &mut grads.time_fc2);
        let mut da1 = dg1;
        da1.zip_mut_with(&tc.a1, |g, &a| *g *= gelu_grad(a));
        linear_backward_params(tc.t.view(), da1.view(), &mut grads.time_fc1);
    }

    let m = cache.conv_slot.iter().filter(|s| s.is_some()).count();
    let mut dh_own = Array2::<f64>::zeros((m, hd));
    for i in 0..n {
        let row = dsum.row(i);
        let mut ax = grads.axis_embed.row_mut(cache.axes[i].index());
        ax += &row.slice(s![hd..hd + 3]);
        let dhi = row.slice(s![..hd]);
        match cache.h_source[i] {
            HSource::Own => {
                let mut t = dh_own.row_mut(cache.conv_slot[i].unwrap());
                t += &dhi;
            }
            HSource::Mask => grads.mask_embed += &dhi,
            HSource::Copy(j) => {
                let mut t = dh_own.row_mut(cache.conv_slot[j].unwrap());
                t += &dhi;
            }
        }
    }

    // Global average pooling, then the convolution stack in reverse.
    if m == 0 {
        return;
    }
    let mut dact = Array2::zeros((m * SEGMENT_LEN, hd));
    let inv_len = 1.0 / SEGMENT_LEN as f64;
    for i in 0..m {
        let src = dh_own.row(i);
        for p in 0..SEGMENT_LEN {
            dact.row_mut(i * SEGMENT_LEN + p).assign(&(&src * inv_len));
        }
    }
    for c in (0..params.conv.len()).rev() {
        let cc = &cache.conv[c];
        let mut dpre = dact;
        dpre.zip_mut_with(&cc.pre, |g, &x| *g *= gelu_grad(x));
        if c == 0 {
            linear_backward_params(cc.col.view(), dpre.view(), &mut grads.conv[c]);
            break;
        }
        let dcol = linear_backward(cc.col.view(), dpre.view(), &params.conv[c], &mut grads.conv[c]);
        let c_in = params.conv[c].w.nrows() / cfg.kernel;
        dact = col2im(dcol.view(), SEGMENT_LEN, cfg.kernel, c_in);
    }
}

pub struct DecoderCache {
    u: Array2<f64>,
    a1: Array2<f64>,
    g1: Array2<f64>,
}

/// Waveform reconstruction `N x 32` from contextual embeddings.
pub fn decoder_forward(params: &ModelParams, u: ArrayView2<f64>) -> (Array2<f64>, DecoderCache) {
    let a1 = linear_forward(u, &params.dec_fc1);
    let g1 = a1.mapv(gelu);
    let y = linear_forward(g1.view(), &params.dec_fc2);
    (
        y,
        DecoderCache {
            u: u.to_owned(),
            a1,
            g1,
        },
    )
}

/// Single-token decode.
pub fn decode(params: &ModelParams, u: ArrayView1<f64>) -> Array1<f64> {
    let (y, _) = decoder_forward(params, u.insert_axis(NdAxis(0)));
    y.row(0).to_owned()
}

pub fn decoder_backward(
    params: &ModelParams,
    cache: &DecoderCache,
    dy: ArrayView2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let dg1 = linear_backward(cache.g1.view(), dy, &params.dec_fc2, &mut grads.dec_fc2);
    let mut da1 = dg1;
    da1.zip_mut_with(&cache.a1, |g, &a| *g *= gelu_grad(a));
    linear_backward(cache.u.view(), da1.view(), &params.dec_fc1, &mut grads.dec_fc1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            decoder_hidden: 32,
            ..ModelConfig::default()
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> WindowInput {
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        times.sort_by(f64::total_cmp);
        WindowInput {
            waveforms: Array2::from_shape_simple_fn((n, SEGMENT_LEN), || rng.random_range(-1.0..1.0)),
            axes: (0..n).map(|i| Axis::ALL[i % 3]).collect(),
            durations_s: (0..n).map(|_| rng.random_range(0.05..1.0)).collect(),
            times_s: times,
            window_duration_s: 10.0,
            h_source: vec![HSource::Own; n],
        }
    }

    #[test]
    fn cnn_output_shape_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(ModelConfig::default(), &mut rng);
        let w = Array2::from_shape_fn((2, SEGMENT_LEN), |(i, j)| (i + j) as f64 * 0.01);
        let h = encode_segments(&p, w.view());
        assert_eq!(h.dim(), (2, 60));
        assert_eq!(encode_segments(&p, w.view()), h);
        let zero = ModelParams::zeros(ModelConfig::default());
        assert!(encode_segments(&zero, w.view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn assemble_token_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(ModelConfig::default(), &mut rng);
        let h = Array1::zeros(60);
        let z = assemble_token(&p, h.view(), Axis::X, 40.0 / 80.0);
        assert_eq!(z.len(), 64);
        assert!(z.slice(s![..60]).iter().all(|v| *v == 0.0));
        assert_eq!(z.slice(s![60..]).to_vec(), vec![1.0, 0.0, 0.0, 0.5]);
        let zy = assemble_token(&p, h.view(), Axis::Y, 0.5);
        let diff: Vec<usize> = (0..64).filter(|&i| z[i] != zy[i]).collect();
        assert!(diff.iter().all(|&i| (60..63).contains(&i)));
    }

    #[test]
    fn absolute_time_embed_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ModelParams::init(ModelConfig::default(), &mut rng);
        let z = Array1::from_shape_fn(64, |i| (i as f64 * 0.37).sin());
        assert!(absolute_time_embed(&p, z.view(), 1.5).is_err());
        let a = absolute_time_embed(&p, z.view(), 0.2).unwrap();
        let b = absolute_time_embed(&p, z.view(), 0.8).unwrap();
        assert_ne!(a, b);
        let mean = a.sum() / 64.0;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        // p == 0 reduces to a plain layer norm of z.
        p.time_fc1 = super::super::Linear::zeros(1, 64);
        p.time_fc2 = super::super::Linear::zeros(64, 64);
        let c = absolute_time_embed(&p, z.view(), 0.3).unwrap();
        let (ln, _) = super::super::layer_norm_rows(z.view().insert_axis(NdAxis(0)), p.config.ln_eps);
        for (x, y) in c.iter().zip(ln.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bucket_examples() {
        let b = relative_buckets(&[1.0, 2.0, 3.0, 4.0], 10.0, 16);
        for i in 0..4 {
            for k in 0..4 {
                assert_eq!(b[[i, k]] as i64 - 16, i as i64 - k as i64);
            }
        }
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let b = relative_buckets(&times, 10.0, 16);
        assert_eq!(b[[0, 0]], 16);
        assert_eq!(b[[39, 0]], 32);
        assert_eq!(b[[0, 39]], 0);
        assert_eq!(b[[20, 0]], 32);
        assert_eq!(b[[16, 0]], 32);
        assert_eq!(b[[15, 0]], 31);
        // Coincident times fall back to duration / N.
        let b = relative_buckets(&[2.0, 2.0, 2.0, 7.0], 10.0, 16);
        assert_eq!(b[[3, 0]] as i64 - 16, 2);
        // Translation leaves buckets unchanged.
        let shifted: Vec<f64> = times.iter().map(|t| t + 3.3).collect();
        assert_eq!(relative_buckets(&shifted, 10.0, 16), relative_buckets(&times, 10.0, 16));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ModelParams::init(tiny(), &mut rng);
        let input = random_input(&mut rng, 1);
        let cache = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        for b in &cache.blocks {
            for pr in &b.probs {
                assert_eq!(pr[[0, 0]], 1.0);
            }
        }
    }

    #[test]
    fn attention_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ModelParams::init(ModelConfig::default(), &mut rng);
        let input = random_input(&mut rng, 25);
        let cache = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        for b in &cache.blocks {
            for pr in &b.probs {
                for row in pr.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
        let mean = cache.u.row(0).sum() / 64.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn forward_is_deterministic_and_window_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(ModelConfig::default(), &mut rng);
        let input = random_input(&mut rng, 12);
        let a = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        let b = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn decoder_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(ModelConfig::default(), &mut rng);
        let u1 = Array1::from_shape_fn(64, |i| (i as f64).sin());
        let u2 = Array1::from_shape_fn(64, |i| (i as f64).cos());
        let y1 = decode(&p, u1.view());
        assert_eq!(y1.len(), 32);
        assert_ne!(y1, decode(&p, u2.view()));
        let zero = ModelParams::zeros(ModelConfig::default());
        assert!(decode(&zero, u1.view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn positional_ablation_is_inference_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ModelParams::init(tiny(), &mut rng);
        p.rel_bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let before = p.clone();
        let input = random_input(&mut rng, 8);
        let on = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        let off = encoder_forward(&p, &input, ForwardOptions { positional: false }).unwrap();
        assert_ne!(on.u, off.u);
        assert_eq!(p, before);
        // Without positions the time stamps are irrelevant.
        let mut moved = input.clone();
        moved.times_s = moved.times_s.iter().map(|t| t * 0.5).collect();
        let off2 = encoder_forward(&p, &moved, ForwardOptions { positional: false }).unwrap();
        assert_eq!(off.u, off2.u);
    }

    fn probe_loss(p: &ModelParams, input: &WindowInput, coef: &Array2<f64>) -> f64 {
        let cache = encoder_forward(p, input, ForwardOptions::default()).unwrap();
        let (y, _) = decoder_forward(p, cache.u.view());
        (&y * coef).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ModelParams::init(tiny(), &mut rng);
        for (_, mut t) in p.tensors_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        let mut input = random_input(&mut rng, 6);
        input.h_source = vec![
            HSource::Own,
            HSource::Mask,
            HSource::Copy(0),
            HSource::Own,
            HSource::Mask,
            HSource::Own,
        ];
        let coef = Array2::from_shape_simple_fn((6, SEGMENT_LEN), || rng.random_range(-1.0..1.0));

        let cache = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        let (_, dcache) = decoder_forward(&p, cache.u.view());
        let mut grads = p.zeros_like();
        let du = decoder_backward(&p, &dcache, coef.view(), &mut grads);
        encoder_backward(&p, &cache, du.view(), &mut grads);

        let eps = 1e-4;
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            let mut fd = vec![0.0; len];
            let mut q = p.clone();
            for (e, slot) in fd.iter_mut().enumerate() {
                let orig = q.tensors()[ti].1.iter().nth(e).copied().unwrap();
                *q.tensors_mut()[ti].1.iter_mut().nth(e).unwrap() = orig + eps;
                let up = probe_loss(&q, &input, &coef);
                *q.tensors_mut()[ti].1.iter_mut().nth(e).unwrap() = orig - eps;
                let down = probe_loss(&q, &input, &coef);
                *q.tensors_mut()[ti].1.iter_mut().nth(e).unwrap() = orig;
                *slot = (up - down) / (2.0 * eps);
            }
            let diff: f64 = fd.iter().zip(&analytic[ti]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt()
                + analytic[ti].iter().map(|v| v * v).sum::<f64>().sqrt();
            // Key biases have an exactly zero true gradient (softmax shift
            // invariance), so floor the denominator to avoid dividing noise by noise.
            let scale = scale.max(1e-6);
            assert!(diff / scale < 1e-4, "{name}: relative error {}", diff / scale);
        }

        // Buckets never indexed by this window receive exactly zero gradient.
        let used: std::collections::HashSet<usize> = cache.buckets.iter().copied().collect();
        for b in 0..p.config.n_buckets() {
            if !used.contains(&b) {
                assert!(grads.rel_bias.row(b).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = ModelParams::init(tiny(), &mut rng);
        let input = random_input(&mut rng, 5);
        let cache = encoder_forward(&p, &input, ForwardOptions::default()).unwrap();
        let (_, dcache) = decoder_forward(&p, cache.u.view());
        let mut grads = p.zeros_like();
        let du = decoder_backward(&p, &dcache, Array2::zeros((5, SEGMENT_LEN)).view(), &mut grads);
        encoder_backward(&p, &cache, du.view(), &mut grads);
        assert_eq!(grads.sq_norm(), 0.0);
    }
}
