//! Butterworth filtering for gravity separation and window intensity statistics.
//!
//! Filters are realized as cascades of second-order sections obtained from the
//! analog Butterworth prototype through a prewarped bilinear transform. The
//! gravity split runs each cascade forward and backward (zero phase), so the
//! effective magnitude response is the single-pass response squared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Highpass,
    Lowpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub cutoff_hz: f64,
    pub kind: FilterKind,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        Self {
            order,
            cutoff_hz,
            kind,
            sample_rate_hz,
        }
    }
}

/// One biquad, `a[0]` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Steady-state transposed direct-form II state for a unit step.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * g;
        let z1 = self.b[1] - self.a[1] * g + z2;
        [z1, z2]
    }

    fn response(&self, omega: f64) -> (f64, f64) {
        let (c1, s1) = (omega.cos(), omega.sin());
        let (c2, s2) = ((2.0 * omega).cos(), (2.0 * omega).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -(self.b[1] * s1 + self.b[2] * s2);
        let dr = self.a[0] + self.a[1] * c1 + self.a[2] * c2;
        let di = -(self.a[1] * s1 + self.a[2] * s2);
        let den = dr * dr + di * di;
        ((nr * dr + ni * di) / den, (ni * dr - nr * di) / den)
    }
}

/// A designed filter: cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosCascade {
    pub sections: Vec<Biquad>,
    pub sample_rate_hz: f64,
}

/// Designs an even-order Butterworth filter as a biquad cascade.
pub fn design_butterworth(spec: &FilterSpec) -> Result<SosCascade> {
    let nyquist = spec.sample_rate_hz / 2.0;
    if !(spec.sample_rate_hz > 0.0) {
        return Err(Error::FilterDesign(format!(
            "sample rate {} must be positive",
            spec.sample_rate_hz
        )));
    }
    if !(spec.cutoff_hz > 0.0 && spec.cutoff_hz < nyquist) {
        return Err(Error::FilterDesign(format!(
            "cutoff {} Hz must lie in (0, {nyquist}) Hz",
            spec.cutoff_hz
        )));
    }
    if spec.order == 0 || spec.order % 2 != 0 {
        return Err(Error::FilterDesign(format!(
            "order {} must be even and positive",
            spec.order
        )));
    }
    let k = (std::f64::consts::PI * spec.cutoff_hz / spec.sample_rate_hz).tan();
    let k2 = k * k;
    let n = spec.order as f64;
    let sections = (0..spec.order / 2)
        .map(|i| {
            // Pole pair quality factor of the analog prototype.
            let theta = std::f64::consts::PI * (2.0 * i as f64 + 1.0) / (2.0 * n);
            let q = 1.0 / (2.0 * theta.sin());
            let norm = 1.0 / (1.0 + k / q + k2);
            let a = [1.0, 2.0 * (k2 - 1.0) * norm, (1.0 - k / q + k2) * norm];
            let b = match spec.kind {
                FilterKind::Lowpass => {
                    let b0 = k2 * norm;
                    [b0, 2.0 * b0, b0]
                }
                FilterKind::Highpass => [norm, -2.0 * norm, norm],
            };
            Biquad { b, a }
        })
        .collect();
    Ok(SosCascade {
        sections,
        sample_rate_hz: spec.sample_rate_hz,
    })
}

impl SosCascade {
    /// Single-pass magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / self.sample_rate_hz;
        let (mut re, mut im) = (1.0, 0.0);
        for s in &self.sections {
            let (r, i) = s.response(omega);
            let nr = re * r - im * i;
            im = re * i + im * r;
            re = nr;
        }
        (re * re + im * im).sqrt()
    }

    /// Edge extension used by [`SosCascade::filtfilt`] for an `n`-sample input:
    /// three times the per-pass filter length, capped by the input.
    pub fn pad_len(&self, n: usize) -> usize {
        (3 * (2 * self.sections.len() + 1)).min(n.saturating_sub(1))
    }

    fn run(&self, x: &mut [f64]) {
        if x.is_empty() {
            return;
        }
        let mut scale = x[0];
        for s in &self.sections {
            let zi = s.step_state();
            let (mut z1, mut z2) = (zi[0] * scale, zi[1] * scale);
            scale *= s.dc_gain();
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Zero-phase forward-backward filtering with odd reflective padding and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = self.pad_len(n);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Gravity-reduced and low-frequency components of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitWindow {
    pub linear: Vec<[f64; 3]>,
    pub gravity: Vec<[f64; 3]>,
}

/// Matched highpass/lowpass pair used to separate voluntary motion from gravity.
#[derive(Debug, Clone)]
pub struct GravitySplitter {
    pub highpass: SosCascade,
    pub lowpass: SosCascade,
    pub order: usize,
}

impl GravitySplitter {
    pub fn new(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        Ok(Self {
            highpass: design_butterworth(&FilterSpec::new(
                FilterKind::Highpass,
                order,
                cutoff_hz,
                sample_rate_hz,
            ))?,
            lowpass: design_butterworth(&FilterSpec::new(
                FilterKind::Lowpass,
                order,
                cutoff_hz,
                sample_rate_hz,
            ))?,
            order,
        })
    }

    fn check_len(&self, data: &[[f64; 3]]) -> Result<()> {
        if data.len() < 3 * self.order {
            return Err(Error::TooShort(format!(
                "window of {} samples is shorter than {} (3 x filter order)",
                data.len(),
                3 * self.order
            )));
        }
        Ok(())
    }

    fn apply(cascade: &SosCascade, data: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; data.len()];
        let mut axis = vec![0.0; data.len()];
        for a in 0..3 {
            for (dst, s) in axis.iter_mut().zip(data) {
                *dst = s[a];
            }
            for (o, v) in out.iter_mut().zip(cascade.filtfilt(&axis)) {
                o[a] = v;
            }
        }
        out
    }

    /// Zero-phase highpass of each axis only.
    pub fn linear(&self, data: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        self.check_len(data)?;
        Ok(Self::apply(&self.highpass, data))
    }

    /// Zero-phase lowpass of each axis only.
    pub fn gravity(&self, data: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        self.check_len(data)?;
        Ok(Self::apply(&self.lowpass, data))
    }

    pub fn split(&self, window: &Window) -> Result<SplitWindow> {
        Ok(SplitWindow {
            linear: self.linear(&window.data)?,
            gravity: self.gravity(&window.data)?,
        })
    }
}

/// Splits a window with the default 6th-order, 0.5 Hz filter pair.
pub fn split_gravity(window: &Window) -> Result<SplitWindow> {
    GravitySplitter::new(6, 0.5, window.sample_rate_hz)?.split(window)
}

/// Epoch-wise activity index of a raw window in g.
///
/// Each complete 1 s epoch contributes `sqrt(max(0, mean_axis(var - noise)))`
/// with variances taken in milli-g². A trailing partial epoch is ignored.
pub fn activity_index(window: &Window, noise_variance: f64) -> f64 {
    let epoch = window.sample_rate_hz.round().max(1.0) as usize;
    window
        .data
        .chunks_exact(epoch)
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mut excess = 0.0;
            for a in 0..3 {
                let mean = chunk.iter().map(|s| s[a] * 1000.0).sum::<f64>() / n;
                let var = chunk
                    .iter()
                    .map(|s| {
                        let d = s[a] * 1000.0 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                excess += var - noise_variance;
            }
            (excess / 3.0).max(0.0).sqrt()
        })
        .sum()
}

/// Mean absolute deviation of the per-sample acceleration magnitude.
pub fn mad_magnitude(data: &[[f64; 3]]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mags: Vec<f64> = data
        .iter()
        .map(|s| (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt())
        .collect();
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    mags.iter().map(|m| (m - mean).abs()).sum::<f64>() / n
}
