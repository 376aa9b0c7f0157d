//! Movement-segment tokenization of gravity-reduced acceleration.
//!
//! Boundaries are acceleration zero-crossings per axis, cleaned by a
//! temporal (minimum gap) and an amplitude (merge quiet neighbours) pass.
//! Each segment is resampled to [`SEGMENT_LEN`] samples and the three axis
//! streams are merged by midpoint time.

use serde::{Deserialize, Serialize};

/// Resampled waveform length of every token.
pub const SEGMENT_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Axis> {
        match i {
            0 => Some(Axis::X),
            1 => Some(Axis::Y),
            2 => Some(Axis::Z),
            _ => None,
        }
    }
}

/// One token.
#[derive(Debug, Clone, PartialEq)]
pub struct MovementSegment {
    pub axis: Axis,
    pub start_idx: usize,
    pub end_idx: usize,
    pub duration_samples: usize,
    /// Midpoint within the window, seconds.
    pub midpoint_time_s: f64,
    pub waveform: [f64; SEGMENT_LEN],
    /// Set when amplitude hysteresis joined quiet neighbours into this segment.
    pub merged: bool,
}

impl MovementSegment {
    /// `[start, end)` span in seconds, derived from midpoint and duration.
    pub fn span_s(&self, sample_rate_hz: f64) -> (f64, f64) {
        let half = self.duration_samples as f64 / (2.0 * sample_rate_hz);
        (self.midpoint_time_s - half, self.midpoint_time_s + half)
    }
}

/// Ordered tokens of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub subject_id: String,
    pub window_index: u32,
    pub label: Option<u32>,
    pub sample_rate_hz: f64,
    pub window_duration_s: f64,
    pub tokens: Vec<MovementSegment>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub sample_rate_hz: f64,
    pub window_duration_s: f64,
    pub min_gap_s: f64,
    pub amp_threshold_g: f64,
    pub max_tokens: usize,
    /// Chunk length of the equal-chunk baseline.
    pub chunk_s: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 80.0,
            window_duration_s: 10.0,
            min_gap_s: 0.050,
            amp_threshold_g: 0.01,
            max_tokens: 512,
            chunk_s: 0.5,
        }
    }
}

#[inline]
fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Indices where the signal changes sign.
///
/// A run of exact zeros belongs to the segment that follows it: the crossing
/// is placed on the first zero when the next nonzero sample has the opposite
/// sign of the sample before the run.
pub fn detect_zero_crossings(signal: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = signal.len();
    let mut i = 1;
    while i < n {
        let prev = sign(signal[i - 1]);
        let cur = sign(signal[i]);
        if prev != 0 && cur == -prev {
            out.push(i);
        } else if prev != 0 && cur == 0 {
            let mut j = i + 1;
            while j < n && signal[j] == 0.0 {
                j += 1;
            }
            if j < n && sign(signal[j]) == -prev {
                out.push(i);
            }
            i = j;
            continue;
        }
        i += 1;
    }
    out
}

/// Crossings surviving hysteresis, with one merge flag per resulting segment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Boundaries {
    pub crossings: Vec<usize>,
    /// `merged[k]` describes the segment `[crossings[k], crossings[k + 1])`.
    pub merged: Vec<bool>,
}

/// Two-stage hysteresis.
///
/// Temporal stage: scanning left to right, a crossing closer than `min_gap_s`
/// to the last accepted one is dropped. Amplitude stage: every maximal run of
/// consecutive segments whose peak |signal| is below `amp_threshold_g`
/// collapses into one segment, which is the fixpoint of pairwise merging.
pub fn apply_hysteresis(
    crossings: &[usize],
    signal: &[f64],
    sample_rate_hz: f64,
    min_gap_s: f64,
    amp_threshold_g: f64,
) -> Boundaries {
    let min_gap = min_gap_s * sample_rate_hz - 1e-9;
    let mut accepted: Vec<usize> = Vec::with_capacity(crossings.len());
    for &c in crossings {
        match accepted.last() {
            Some(&last) if ((c - last) as f64) < min_gap => {}
            _ => accepted.push(c),
        }
    }
    if accepted.len() < 2 {
        return Boundaries {
            merged: Vec::new(),
            crossings: accepted,
        };
    }

    let quiet: Vec<bool> = accepted
        .windows(2)
        .map(|w| {
            signal[w[0]..w[1]]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                < amp_threshold_g
        })
        .collect();

    let mut kept = Vec::with_capacity(accepted.len());
    let mut merged = Vec::with_capacity(quiet.len());
    kept.push(accepted[0]);
    let mut k = 0;
    while k < quiet.len() {
        let mut end = k;
        if quiet[k] {
            while end + 1 < quiet.len() && quiet[end + 1] {
                end += 1;
            }
        }
        kept.push(accepted[end + 1]);
        merged.push(end > k);
        k = end + 1;
    }
    Boundaries {
        crossings: kept,
        merged,
    }
}

/// Boundaries of one segment before waveform resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    pub axis: Axis,
    pub start_idx: usize,
    pub end_idx: usize,
    pub merged: bool,
}

/// One span per consecutive pair of accepted crossings; samples outside the
/// first and last crossing are dropped.
pub fn segment_axis(axis: Axis, boundaries: &Boundaries) -> Vec<SegmentSpan> {
    boundaries
        .crossings
        .windows(2)
        .zip(&boundaries.merged)
        .map(|(w, &merged)| SegmentSpan {
            axis,
            start_idx: w[0],
            end_idx: w[1],
            merged,
        })
        .collect()
}

/// Linear interpolation of `samples` onto [`SEGMENT_LEN`] evenly spaced points.
pub fn resample_segment(samples: &[f64]) -> [f64; SEGMENT_LEN] {
    let mut out = [0.0; SEGMENT_LEN];
    let d = samples.len();
    if d == 0 {
        return out;
    }
    if d == 1 {
        return [samples[0]; SEGMENT_LEN];
    }
    let last = (d - 1) as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let pos = (k as f64 * last) / (SEGMENT_LEN - 1) as f64;
        let i0 = pos.floor() as usize;
        if i0 >= d - 1 {
            *o = samples[d - 1];
            continue;
        }
        let frac = pos - i0 as f64;
        *o = if frac == 0.0 {
            samples[i0]
        } else {
            samples[i0] + frac * (samples[i0 + 1] - samples[i0])
        };
    }
    out
}

fn build_segment(span: SegmentSpan, signal: &[f64], sample_rate_hz: f64) -> MovementSegment {
    MovementSegment {
        axis: span.axis,
        start_idx: span.start_idx,
        end_idx: span.end_idx,
        duration_samples: span.end_idx - span.start_idx,
        midpoint_time_s: (span.start_idx + span.end_idx) as f64 / 2.0 / sample_rate_hz,
        waveform: resample_segment(&signal[span.start_idx..span.end_idx]),
        merged: span.merged,
    }
}

fn merge_axes(per_axis: [Vec<MovementSegment>; 3], max_tokens: usize) -> Vec<MovementSegment> {
    // Each axis is already ordered by midpoint, so a three-way merge suffices;
    // ties go to the lower axis.
    let total = per_axis.iter().map(Vec::len).sum::<usize>().min(max_tokens);
    let mut all = Vec::with_capacity(total);
    let mut iters = per_axis.map(|v| v.into_iter().peekable());
    while all.len() < total {
        let mut best: Option<(usize, f64)> = None;
        for (a, it) in iters.iter_mut().enumerate() {
            if let Some(t) = it.peek() {
                if best.is_none_or(|(_, m)| t.midpoint_time_s < m) {
                    best = Some((a, t.midpoint_time_s));
                }
            }
        }
        match best.and_then(|(b, _)| iters[b].next()) {
            Some(t) => all.push(t),
            None => break,
        }
    }
    all
}

/// Tokenizes a gravity-reduced `T x 3` window into movement segments.
pub fn tokenize_window(linear: &[[f64; 3]], cfg: &TokenizerConfig) -> Vec<MovementSegment> {
    let mut axis_buf = vec![0.0; linear.len()];
    let per_axis = Axis::ALL.map(|axis| {
        for (dst, s) in axis_buf.iter_mut().zip(linear) {
            *dst = s[axis.index()];
        }
        let crossings = detect_zero_crossings(&axis_buf);
        let bounds = apply_hysteresis(
            &crossings,
            &axis_buf,
            cfg.sample_rate_hz,
            cfg.min_gap_s,
            cfg.amp_threshold_g,
        );
        segment_axis(axis, &bounds)
            .into_iter()
            .map(|span| build_segment(span, &axis_buf, cfg.sample_rate_hz))
            .collect()
    });
    merge_axes(per_axis, cfg.max_tokens)
}

/// Equal-length chunk tokens: boundaries every `round(chunk_s * fs)` samples.
pub fn equal_chunk_tokenize(linear: &[[f64; 3]], cfg: &TokenizerConfig) -> Vec<MovementSegment> {
    let chunk = ((cfg.chunk_s * cfg.sample_rate_hz).round() as usize).max(1);
    let n_chunks = linear.len() / chunk;
    let mut axis_buf = vec![0.0; linear.len()];
    let per_axis = Axis::ALL.map(|axis| {
        for (dst, s) in axis_buf.iter_mut().zip(linear) {
            *dst = s[axis.index()];
        }
        (0..n_chunks)
            .map(|c| {
                let span = SegmentSpan {
                    axis,
                    start_idx: c * chunk,
                    end_idx: (c + 1) * chunk,
                    merged: false,
                };
                build_segment(span, &axis_buf, cfg.sample_rate_hz)
            })
            .collect()
    });
    merge_axes(per_axis, cfg.max_tokens)
}

/// Which tokenizer feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    MovementSegments,
    EqualChunks,
}

impl TokenizerKind {
    pub fn tokenize(self, linear: &[[f64; 3]], cfg: &TokenizerConfig) -> Vec<MovementSegment> {
        match self {
            TokenizerKind::MovementSegments => tokenize_window(linear, cfg),
            TokenizerKind::EqualChunks => equal_chunk_tokenize(linear, cfg),
        }
    }
}
