//! Segment encoder, time-aware Transformer and waveform decoder.
//!
//! All arithmetic is `f64`; checkpoints store `f32`. Forward passes run one
//! window at a time over its valid tokens only, which is equivalent to a
//! padded batch with padded keys masked out of attention.

mod checkpoint;
mod encoder;
mod ops;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use encoder::{
    absolute_time_embed, assemble_token, decode, decoder_backward, decoder_forward,
    encode_segments, encoder_backward, encoder_forward, relative_bias_matrix, relative_buckets,
    DecoderCache, EncoderCache, ForwardOptions, HSource,
    WindowInput,
};
pub use ops::{gelu, layer_norm_rows};

use crate::tokenizer::SEGMENT_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub cnn_channels: [usize; 2],
    pub kernel: usize,
    /// Relative offsets are clamped to `[-max_rel, max_rel]`.
    pub max_rel: i64,
    pub decoder_hidden: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 5,
            n_heads: 4,
            ff_mult: 4,
            cnn_channels: [16, 32],
            kernel: 5,
            max_rel: 16,
            decoder_hidden: 128,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Width of the CNN embedding `h` (model width minus 3 axis + 1 duration).
    pub fn h_dim(&self) -> usize {
        self.d_model - 4
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_buckets(&self) -> usize {
        (2 * self.max_rel + 1) as usize
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model <= 4 || self.d_model % self.n_heads != 0 {
            return Err(crate::Error::Config(format!(
                "d_model {} must exceed 4 and divide into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.kernel % 2 == 0 || self.n_layers == 0 || self.max_rel < 0 {
            return Err(crate::Error::Config(
                "kernel must be odd, layers positive, max_rel nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Dense layer stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Array2::zeros((inp, out)),
            b: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Every learnable tensor. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Convolution weights stored as `(kernel * c_in) x c_out`.
    pub conv: Vec<Linear>,
    pub axis_embed: Array2<f64>,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub embed_norm: LayerNormParams,
    /// `n_buckets x n_heads`, shared by all layers.
    pub rel_bias: Array2<f64>,
    pub mask_embed: Array1<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNormParams,
    pub dec_fc1: Linear,
    pub dec_fc2: Linear,
}

macro_rules! tensor_list {
    ($self:ident, $view:ident, $push:ident) => {{
        let mut out = Vec::new();
        for (i, c) in $self.conv.$view().enumerate() {
            out.push((format!("cnn.conv{i}.weight"), c.w.$push().into_dyn()));
            out.push((format!("cnn.conv{i}.bias"), c.b.$push().into_dyn()));
        }
        out.push(("axis_embed".to_string(), $self.axis_embed.$push().into_dyn()));
        out.push(("time_mlp.fc1.weight".to_string(), $self.time_fc1.w.$push().into_dyn()));
        out.push(("time_mlp.fc1.bias".to_string(), $self.time_fc1.b.$push().into_dyn()));
        out.push(("time_mlp.fc2.weight".to_string(), $self.time_fc2.w.$push().into_dyn()));
        out.push(("time_mlp.fc2.bias".to_string(), $self.time_fc2.b.$push().into_dyn()));
        out.push(("embed_norm.gamma".to_string(), $self.embed_norm.gamma.$push().into_dyn()));
        out.push(("embed_norm.beta".to_string(), $self.embed_norm.beta.$push().into_dyn()));
        out.push(("rel_bias".to_string(), $self.rel_bias.$push().into_dyn()));
        out.push(("mask_embed".to_string(), $self.mask_embed.$push().into_dyn()));
        for (l, b) in $self.blocks.$view().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), b.ln1.gamma.$push().into_dyn()));
            out.push((format!("layers.{l}.ln1.beta"), b.ln1.beta.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.q.weight"), b.q.w.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.q.bias"), b.q.b.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.k.weight"), b.k.w.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.k.bias"), b.k.b.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.v.weight"), b.v.w.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.v.bias"), b.v.b.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.o.weight"), b.o.w.$push().into_dyn()));
            out.push((format!("layers.{l}.attn.o.bias"), b.o.b.$push().into_dyn()));
            out.push((format!("layers.{l}.ln2.gamma"), b.ln2.gamma.$push().into_dyn()));
            out.push((format!("layers.{l}.ln2.beta"), b.ln2.beta.$push().into_dyn()));
            out.push((format!("layers.{l}.ff1.weight"), b.ff1.w.$push().into_dyn()));
            out.push((format!("layers.{l}.ff1.bias"), b.ff1.b.$push().into_dyn()));
            out.push((format!("layers.{l}.ff2.weight"), b.ff2.w.$push().into_dyn()));
            out.push((format!("layers.{l}.ff2.bias"), b.ff2.b.$push().into_dyn()));
        }
        out.push(("final_norm.gamma".to_string(), $self.final_norm.gamma.$push().into_dyn()));
        out.push(("final_norm.beta".to_string(), $self.final_norm.beta.$push().into_dyn()));
        out.push(("decoder.fc1.weight".to_string(), $self.dec_fc1.w.$push().into_dyn()));
        out.push(("decoder.fc1.bias".to_string(), $self.dec_fc1.b.$push().into_dyn()));
        out.push(("decoder.fc2.weight".to_string(), $self.dec_fc2.w.$push().into_dyn()));
        out.push(("decoder.fc2.bias".to_string(), $self.dec_fc2.b.$push().into_dyn()));
        out
    }};
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64, shape: (usize, usize)) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let h = config.h_dim();
        let chans = [1, config.cnn_channels[0], config.cnn_channels[1], h];
        let ff = d * config.ff_mult;
        Self {
            config,
            conv: (0..3)
                .map(|i| Linear::zeros(config.kernel * chans[i], chans[i + 1]))
                .collect(),
            axis_embed: Array2::zeros((3, 3)),
            time_fc1: Linear::zeros(1, d),
            time_fc2: Linear::zeros(d, d),
            embed_norm: LayerNormParams::zeros(d),
            rel_bias: Array2::zeros((config.n_buckets(), config.n_heads)),
            mask_embed: Array1::zeros(h),
            blocks: (0..config.n_layers)
                .map(|_| Block {
                    ln1: LayerNormParams::zeros(d),
                    q: Linear::zeros(d, d),
                    k: Linear::zeros(d, d),
                    v: Linear::zeros(d, d),
                    o: Linear::zeros(d, d),
                    ln2: LayerNormParams::zeros(d),
                    ff1: Linear::zeros(d, ff),
                    ff2: Linear::zeros(ff, d),
                })
                .collect(),
            final_norm: LayerNormParams::zeros(d),
            dec_fc1: Linear::zeros(d, config.decoder_hidden),
            dec_fc2: Linear::zeros(config.decoder_hidden, SEGMENT_LEN),
        }
    }

    /// Random initialization.
    ///
    /// Dense projections draw from a normal truncated at two standard
    /// deviations; convolutions use the uniform fan-in bound; biases start at
    /// zero, layer norms at identity and the axis table at the identity basis.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let std = config.init_std;
        for c in &mut p.conv {
            let bound = 1.0 / (c.w.nrows() as f64).sqrt();
            c.w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        p.axis_embed = Array2::eye(3);
        for lin in [&mut p.time_fc1, &mut p.time_fc2, &mut p.dec_fc1, &mut p.dec_fc2] {
            lin.w = truncated_normal(rng, std, lin.w.dim());
        }
        p.mask_embed = truncated_normal(rng, std, (1, config.h_dim())).row(0).to_owned();
        for ln in p.norms_mut() {
            ln.gamma.fill(1.0);
        }
        for b in &mut p.blocks {
            for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.ff1, &mut b.ff2] {
                lin.w = truncated_normal(rng, std, lin.w.dim());
            }
        }
        p
    }

    fn norms_mut(&mut self) -> Vec<&mut LayerNormParams> {
        let mut v = vec![&mut self.embed_norm, &mut self.final_norm];
        for b in &mut self.blocks {
            v.push(&mut b.ln1);
            v.push(&mut b.ln2);
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        tensor_list!(self, iter, view)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        tensor_list!(self, iter_mut, view_mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Sum of squares over all tensors.
    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}
