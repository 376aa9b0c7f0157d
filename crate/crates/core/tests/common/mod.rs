//! Independent, deliberately naive re-implementations used as test oracles.

#![allow(dead_code)]

/// A token as produced by the reference tokenizer.
#[derive(Debug, Clone)]
pub struct RefToken {
    pub axis: u8,
    pub start: usize,
    pub end: usize,
    pub midpoint_s: f64,
    pub waveform: [f64; 32],
    pub merged: bool,
}

fn sgn(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn peak(x: &[f64], start: usize, end: usize) -> f64 {
    let mut m = 0.0f64;
    for &v in &x[start..end] {
        if v.abs() > m {
            m = v.abs();
        }
    }
    m
}

fn resample32(x: &[f64], start: usize, end: usize) -> [f64; 32] {
    let d = end - start;
    let mut w = [0.0; 32];
    for (k, slot) in w.iter_mut().enumerate() {
        if d == 1 {
            *slot = x[start];
            continue;
        }
        let pos = (k * (d - 1)) as f64 / 31.0;
        let i = pos.floor() as usize;
        if i >= d - 1 {
            *slot = x[end - 1];
            continue;
        }
        let f = pos - i as f64;
        *slot = if f == 0.0 {
            x[start + i]
        } else {
            x[start + i] + f * (x[start + i + 1] - x[start + i])
        };
    }
    w
}

/// Crossings by the literal sign rule, temporal rejection, then pairwise
/// amplitude merging repeated until nothing changes.
pub fn reference_axis(x: &[f64], axis: u8, fs: f64, min_gap_s: f64, amp_g: f64) -> Vec<RefToken> {
    let n = x.len();
    let mut crossings = Vec::new();
    for i in 1..n {
        let a = sgn(x[i - 1]);
        let b = sgn(x[i]);
        if a * b < 0 {
            crossings.push(i);
        } else if a != 0 && b == 0 {
            let mut k = i;
            while k < n && sgn(x[k]) == 0 {
                k += 1;
            }
            if k < n && sgn(x[k]) == -a {
                crossings.push(i);
            }
        }
    }

    let mut accepted: Vec<usize> = Vec::new();
    for c in crossings {
        if let Some(&last) = accepted.last() {
            if ((c - last) as f64) / fs < min_gap_s {
                continue;
            }
        }
        accepted.push(c);
    }

    let mut segs: Vec<(usize, usize, bool)> = Vec::new();
    for k in 1..accepted.len() {
        segs.push((accepted[k - 1], accepted[k], false));
    }
    loop {
        let mut changed = false;
        let mut k = 0;
        while k + 1 < segs.len() {
            let (s0, e0, _) = segs[k];
            let (s1, e1, _) = segs[k + 1];
            if peak(x, s0, e0) < amp_g && peak(x, s1, e1) < amp_g {
                segs[k] = (s0, e1, true);
                segs.remove(k + 1);
                changed = true;
            } else {
                k += 1;
            }
        }
        if !changed {
            break;
        }
    }

    segs.into_iter()
        .map(|(s, e, merged)| RefToken {
            axis,
            start: s,
            end: e,
            midpoint_s: (s + e) as f64 / 2.0 / fs,
            waveform: resample32(x, s, e),
            merged,
        })
        .collect()
}

pub fn reference_tokenize(linear: &[[f64; 3]], fs: f64, min_gap_s: f64, amp_g: f64, max_tokens: usize) -> Vec<RefToken> {
    let mut all: Vec<RefToken> = Vec::new();
    for axis in 0..3u8 {
        let x: Vec<f64> = linear.iter().map(|s| s[axis as usize]).collect();
        all.extend(reference_axis(&x, axis, fs, min_gap_s, amp_g));
    }
    // Insertion sort on (midpoint, axis).
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&all[j - 1], &all[j]);
            let out_of_order = a.midpoint_s > b.midpoint_s || (a.midpoint_s == b.midpoint_s && a.axis > b.axis);
            if !out_of_order {
                break;
            }
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    all.truncate(max_tokens);
    all
}

/// Macro-F1 from per-class counts, averaging over classes seen in either vector.
pub fn brute_force_macro_f1(pred: &[u32], truth: &[u32], n_classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut classes = 0;
    for c in 0..n_classes as u32 {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for i in 0..truth.len() {
            match (pred[i] == c, truth[i] == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp + fp + fneg == 0 {
            continue;
        }
        classes += 1;
        if tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fneg) as f64;
        sum += 2.0 * precision * recall / (precision + recall);
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}
