//! Recording ingestion: CSV loading, unit normalization, resampling and windowing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravity in m/s².
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// Pipeline sampling rate shared by every dataset.
pub const PIPELINE_RATE_HZ: f64 = 80.0;

/// One subject's continuous triaxial acceleration stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<[f64; 3]>,
    /// Per-sample class ids; `None` entries are null/transition/unknown samples.
    pub labels: Option<Vec<Option<u32>>>,
    pub source_name: String,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Contract(format!(
                "recording {} has non-positive sample rate {}",
                self.subject_id, self.sample_rate_hz
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.samples.len() {
                return Err(Error::Contract(format!(
                    "recording {} has {} labels for {} samples",
                    self.subject_id,
                    labels.len(),
                    self.samples.len()
                )));
            }
        }
        Ok(())
    }
}

/// A fixed-duration triaxial slice of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub index: u32,
    pub data: Vec<[f64; 3]>,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub label: Option<u32>,
    pub start_time_s: f64,
}

impl Window {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.data.iter().map(|s| s[axis]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// Metres per second squared.
    MS2,
    G,
}

/// Column mapping for a CSV source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub subject: String,
    pub x: String,
    pub y: String,
    pub z: String,
    #[serde(default)]
    pub label: Option<String>,
}

/// A dataset as declared in the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub path: String,
    pub schema: CsvSchema,
    pub units: Units,
    pub native_hz: f64,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Label values treated as null/transition/unknown.
    #[serde(default)]
    pub null_labels: Vec<String>,
}

impl DatasetManifest {
    pub fn class_id(&self, label: &str) -> Option<u32> {
        let label = label.trim();
        if label.is_empty() || self.null_labels.iter().any(|n| n == label) {
            return None;
        }
        self.class_names
            .iter()
            .position(|c| c == label)
            .map(|i| i as u32)
    }
}

/// Reads a CSV file into one recording per subject.
///
/// Subjects appear in order of first occurrence and each keeps its rows in
/// file order. Label cells are mapped through `class_names`; anything else
/// (including entries of `null_labels` and blanks) becomes a null label.
pub fn load_csv_dataset(path: &Path, manifest: &DatasetManifest) -> Result<Vec<RawRecording>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_dataset(file, manifest)
}

pub fn read_csv_dataset<R: std::io::Read>(
    reader: R,
    manifest: &DatasetManifest,
) -> Result<Vec<RawRecording>> {
    let schema = &manifest.schema;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let subj_col = column(&schema.subject)?;
    let axis_cols = [column(&schema.x)?, column(&schema.y)?, column(&schema.z)?];
    let label_col = schema.label.as_deref().map(column).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, (Vec<[f64; 3]>, Vec<Option<u32>>)> = BTreeMap::new();
    let mut unknown_labels = 0usize;
    for (i, record) in rdr.records().enumerate() {
        // Row 1 is the header.
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        let subject = record
            .get(subj_col)
            .ok_or_else(|| Error::Parse {
                row,
                msg: "missing subject cell".into(),
            })?
            .to_string();
        let mut sample = [0.0; 3];
        for (a, &col) in axis_cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            sample[a] = cell.parse::<f64>().map_err(|_| Error::Parse {
                row,
                msg: format!("non-numeric value {cell:?} in column {:?}", &headers[col]),
            })?;
        }
        let label = match label_col {
            Some(col) => {
                let cell = record.get(col).unwrap_or("");
                let id = manifest.class_id(cell);
                if id.is_none() && !cell.is_empty() && !manifest.null_labels.iter().any(|n| n == cell) {
                    unknown_labels += 1;
                }
                id
            }
            None => None,
        };
        let entry = by_subject.entry(subject.clone()).or_insert_with(|| {
            order.push(subject);
            (Vec::new(), Vec::new())
        });
        entry.0.push(sample);
        entry.1.push(label);
    }
    if unknown_labels > 0 {
        log::warn!(
            "{}: {unknown_labels} rows carry labels outside class_names; treated as null",
            manifest.dataset_name
        );
    }

    Ok(order
        .into_iter()
        .map(|subject| {
            let (samples, labels) = by_subject.remove(&subject).unwrap_or_default();
            RawRecording {
                subject_id: subject,
                sample_rate_hz: manifest.native_hz,
                samples,
                labels: label_col.map(|_| labels),
                source_name: manifest.dataset_name.clone(),
            }
        })
        .collect())
}

/// Expresses every sample in g.
pub fn convert_units_to_g(mut rec: RawRecording, input_units: Units) -> RawRecording {
    if input_units == Units::MS2 {
        for s in &mut rec.samples {
            for v in s.iter_mut() {
                *v /= STANDARD_GRAVITY;
            }
        }
    }
    rec
}

/// Linear-interpolation resampling onto a uniform grid at `target_hz`.
///
/// The output starts at the first input sample and covers the input span.
/// Labels use nearest-neighbour lookup, with exact half-way ties going to
/// the later sample.
pub fn resample_stream(rec: &RawRecording, target_hz: f64) -> Result<RawRecording> {
    if rec.samples.len() < 2 {
        return Err(Error::TooShort(format!(
            "recording {} has {} samples; resampling needs at least 2",
            rec.subject_id,
            rec.samples.len()
        )));
    }
    if !(target_hz > 0.0) {
        return Err(Error::Contract(format!("target rate {target_hz} must be positive")));
    }
    let n = rec.samples.len();
    let last = (n - 1) as f64;
    let ratio = rec.sample_rate_hz / target_hz;
    let span_s = last / rec.sample_rate_hz;
    let n_out = (span_s * target_hz + 1e-9).floor() as usize + 1;

    let mut samples = Vec::with_capacity(n_out);
    let mut labels = rec.labels.as_ref().map(|_| Vec::with_capacity(n_out));
    for k in 0..n_out {
        let pos = (k as f64 * ratio).min(last);
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let s = if frac == 0.0 || i0 + 1 >= n {
            rec.samples[i0.min(n - 1)]
        } else {
            let a = rec.samples[i0];
            let b = rec.samples[i0 + 1];
            [
                a[0] + frac * (b[0] - a[0]),
                a[1] + frac * (b[1] - a[1]),
                a[2] + frac * (b[2] - a[2]),
            ]
        };
        samples.push(s);
        if let (Some(out), Some(src)) = (labels.as_mut(), rec.labels.as_ref()) {
            let nearest = if frac >= 0.5 { i0 + 1 } else { i0 };
            out.push(src[nearest.min(n - 1)]);
        }
    }
    Ok(RawRecording {
        subject_id: rec.subject_id.clone(),
        sample_rate_hz: target_hz,
        samples,
        labels,
        source_name: rec.source_name.clone(),
    })
}

/// Windowing and quality-control settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub duration_s: f64,
    pub overlap_fraction: f64,
    /// Minimum share of samples carrying the majority label.
    pub min_majority_fraction: f64,
    /// Windows whose null-label share reaches this value are dropped.
    pub max_null_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            overlap_fraction: 0.5,
            min_majority_fraction: 0.5,
            max_null_fraction: 0.1,
        }
    }
}

impl WindowConfig {
    pub fn non_overlapping(duration_s: f64) -> Self {
        Self {
            duration_s,
            overlap_fraction: 0.0,
            ..Self::default()
        }
    }

    pub fn window_samples(&self, sample_rate_hz: f64) -> usize {
        (self.duration_s * sample_rate_hz).round() as usize
    }

    pub fn step_samples(&self, sample_rate_hz: f64) -> usize {
        let t = self.window_samples(sample_rate_hz);
        ((t as f64 * (1.0 - self.overlap_fraction)).round() as usize).max(1)
    }
}

/// Majority vote over non-null labels; ties go to the lowest class id.
///
/// Returns the winning class with its count and the number of null labels.
pub fn majority_label(labels: &[Option<u32>]) -> (Option<(u32, usize)>, usize) {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut nulls = 0;
    for l in labels {
        match l {
            Some(c) => *counts.entry(*c).or_default() += 1,
            None => nulls += 1,
        }
    }
    let mut best: Option<(u32, usize)> = None;
    for (&c, &n) in &counts {
        if best.map_or(true, |(_, bn)| n > bn) {
            best = Some((c, n));
        }
    }
    (best, nulls)
}

/// Cuts a recording into fixed-length windows and applies label/quality control.
///
/// Window indices count candidate positions, so discarded windows leave gaps.
pub fn make_windows(rec: &RawRecording, cfg: &WindowConfig) -> Result<Vec<Window>> {
    if !(0.0..1.0).contains(&cfg.overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap fraction {} outside [0, 1)",
            cfg.overlap_fraction
        )));
    }
    let t = cfg.window_samples(rec.sample_rate_hz);
    if t == 0 {
        return Err(Error::Config(format!("window duration {} s is empty", cfg.duration_s)));
    }
    let step = cfg.step_samples(rec.sample_rate_hz);
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut index = 0u32;
    while start + t <= rec.samples.len() {
        let data = &rec.samples[start..start + t];
        let finite = data.iter().all(|s| s.iter().all(|v| v.is_finite()));
        let label = match &rec.labels {
            Some(labels) => {
                let (best, nulls) = majority_label(&labels[start..start + t]);
                let null_ok = (nulls as f64) < cfg.max_null_fraction * t as f64;
                match best {
                    Some((c, n)) if null_ok && n as f64 >= cfg.min_majority_fraction * t as f64 => {
                        Ok(Some(c))
                    }
                    _ => Err(()),
                }
            }
            None => Ok(None),
        };
        if let (true, Ok(label)) = (finite, label) {
            out.push(Window {
                subject_id: rec.subject_id.clone(),
                index,
                data: data.to_vec(),
                sample_rate_hz: rec.sample_rate_hz,
                duration_s: cfg.duration_s,
                label,
                start_time_s: start as f64 / rec.sample_rate_hz,
            });
        }
        start += step;
        index += 1;
    }
    Ok(out)
}

/// Full preprocessing for one recording: units, pipeline rate, windowing.
pub fn prepare_recording(
    rec: RawRecording,
    units: Units,
    target_hz: f64,
    cfg: &WindowConfig,
) -> Result<Vec<Window>> {
    rec.validate()?;
    let rec = convert_units_to_g(rec, units);
    let rec = if rec.sample_rate_hz == target_hz {
        rec
    } else {
        resample_stream(&rec, target_hz)?
    };
    make_windows(&rec, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(label: bool) -> DatasetManifest {
        DatasetManifest {
            dataset_name: "toy".into(),
            path: String::new(),
            schema: CsvSchema {
                subject: "subj".into(),
                x: "x".into(),
                y: "y".into(),
                z: "z".into(),
                label: label.then(|| "label".to_string()),
            },
            units: Units::G,
            native_hz: 80.0,
            class_names: vec!["walk".into(), "run".into()],
            null_labels: vec!["transition".into()],
        }
    }

    fn rec(samples: Vec<[f64; 3]>, labels: Option<Vec<Option<u32>>>, hz: f64) -> RawRecording {
        RawRecording {
            subject_id: "s".into(),
            sample_rate_hz: hz,
            samples,
            labels,
            source_name: "t".into(),
        }
    }

    #[test]
    fn three_row_csv_single_subject() {
        let csv = "subj,x,y,z\na,1,2,3\na,4,5,6\na,7,8,9\n";
        let recs = read_csv_dataset(csv.as_bytes(), &manifest(false)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].samples.len(), 3);
        assert_eq!(recs[0].samples[2], [7.0, 8.0, 9.0]);
        assert!(recs[0].labels.is_none());
    }

    #[test]
    fn interleaved_subjects_keep_row_order() {
        let csv = "subj,x,y,z,label\na,1,0,0,walk\nb,2,0,0,run\na,3,0,0,transition\nb,4,0,0,walk\na,5,0,0,run\n";
        let recs = read_csv_dataset(csv.as_bytes(), &manifest(true)).unwrap();
        // Line-by-line reference reader.
        let mut expected: Vec<(String, Vec<f64>)> = Vec::new();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            match expected.iter_mut().find(|(s, _)| s == f[0]) {
                Some((_, xs)) => xs.push(f[1].parse().unwrap()),
                None => expected.push((f[0].to_string(), vec![f[1].parse().unwrap()])),
            }
        }
        assert_eq!(recs.len(), expected.len());
        for (r, (s, xs)) in recs.iter().zip(&expected) {
            assert_eq!(&r.subject_id, s);
            let got: Vec<f64> = r.samples.iter().map(|v| v[0]).collect();
            assert_eq!(&got, xs);
        }
        assert_eq!(recs[0].labels.as_ref().unwrap(), &vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn blank_cell_names_row() {
        let csv = "subj,x,y,z\na,1,2,3\na,,5,6\n";
        match read_csv_dataset(csv.as_bytes(), &manifest(false)) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "subj,x,y\na,1,2\n";
        assert!(matches!(
            read_csv_dataset(csv.as_bytes(), &manifest(false)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn unit_conversion_examples() {
        let r = rec(
            vec![[9.80665, 0.0, 0.0], [0.0, 0.0, 0.0], [19.6133, -9.80665, 4.903325]],
            None,
            80.0,
        );
        let g = convert_units_to_g(r, Units::MS2);
        assert_eq!(g.samples[0], [1.0, 0.0, 0.0]);
        assert_eq!(g.samples[1], [0.0, 0.0, 0.0]);
        let expect = [2.0, -1.0, 0.5];
        for a in 0..3 {
            assert!((g.samples[2][a] - expect[a]).abs() < 1e-15);
        }
        let same = convert_units_to_g(g.clone(), Units::G);
        assert_eq!(same, g);
    }

    #[test]
    fn resample_identity_and_ramp() {
        let r = rec((0..20).map(|i| [i as f64, -(i as f64), 0.5]).collect(), None, 80.0);
        assert_eq!(resample_stream(&r, 80.0).unwrap().samples, r.samples);

        let ramp = rec(vec![[0.0; 3], [1.0; 3]], None, 2.0);
        let up = resample_stream(&ramp, 4.0).unwrap();
        let xs: Vec<f64> = up.samples.iter().map(|s| s[0]).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn resample_labels_nearest_neighbour() {
        let r = rec(vec![[0.0; 3]; 3], Some(vec![Some(0), Some(0), Some(1)]), 2.0);
        let up = resample_stream(&r, 4.0).unwrap();
        // Reference: nearest source time with ties to the later sample.
        let src_t = [0.0, 0.5, 1.0];
        let expected: Vec<Option<u32>> = (0..up.samples.len())
            .map(|k| {
                let t = k as f64 / 4.0;
                let mut best = 0;
                for j in 0..3 {
                    if (src_t[j] - t).abs() <= (src_t[best] - t).abs() {
                        best = j;
                    }
                }
                r.labels.as_ref().unwrap()[best]
            })
            .collect();
        assert_eq!(up.labels.unwrap(), expected);
    }

    #[test]
    fn resample_needs_two_samples() {
        let r = rec(vec![[0.0; 3]], None, 2.0);
        assert!(matches!(resample_stream(&r, 4.0), Err(Error::TooShort(_))));
    }

    #[test]
    fn windows_tile_stream() {
        let r = rec(vec![[0.0; 3]; 30 * 80], None, 80.0);
        let w = make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|w| w.data.len() == 800));

        let r = rec(vec![[0.0; 3]; 25 * 80], None, 80.0);
        let w = make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].start_time_s, 10.0);

        let r = rec(vec![[0.0; 3]; 5 * 80], None, 80.0);
        assert!(make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap().is_empty());
    }

    #[test]
    fn window_majority_label() {
        let mut labels = vec![Some(0); 480];
        labels.extend(vec![Some(1); 320]);
        let r = rec(vec![[0.0; 3]; 800], Some(labels), 80.0);
        let w = make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].label, Some(0));
    }

    #[test]
    fn window_qc_discards() {
        // Too many null labels.
        let mut labels = vec![Some(0); 700];
        labels.extend(vec![None; 100]);
        let r = rec(vec![[0.0; 3]; 800], Some(labels), 80.0);
        assert!(make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap().is_empty());
        // Non-finite sample.
        let mut samples = vec![[0.0; 3]; 800];
        samples[10][1] = f64::NAN;
        let r = rec(samples, None, 80.0);
        assert!(make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap().is_empty());
        // Fragmented labels with no majority.
        let labels = (0..800).map(|i| Some((i % 3) as u32)).collect();
        let r = rec(vec![[0.0; 3]; 800], Some(labels), 80.0);
        assert!(make_windows(&r, &WindowConfig::non_overlapping(10.0)).unwrap().is_empty());
    }

    #[test]
    fn overlap_step() {
        let r = rec(vec![[0.0; 3]; 30 * 80], None, 80.0);
        let cfg = WindowConfig {
            overlap_fraction: 0.5,
            ..WindowConfig::default()
        };
        let w = make_windows(&r, &cfg).unwrap();
        assert_eq!(w.len(), 5);
        for pair in w.windows(2) {
            assert_eq!(((pair[1].start_time_s - pair[0].start_time_s) * 80.0).round(), 400.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unit_round_trip(v in proptest::array::uniform3(-100.0f64..100.0)) {
                let r = rec(vec![v], None, 80.0);
                let g = convert_units_to_g(r, Units::MS2);
                for a in 0..3 {
                    let back = g.samples[0][a] * STANDARD_GRAVITY;
                    prop_assert!((back - v[a]).abs() <= 1e-12 * v[a].abs().max(1e-300));
                }
            }

            #[test]
            fn majority_matches_histogram(labels in proptest::collection::vec(proptest::option::weighted(0.9, 0u32..4), 1..200)) {
                let (best, nulls) = majority_label(&labels);
                let mut hist = [0usize; 4];
                for l in labels.iter().flatten() { hist[*l as usize] += 1; }
                let max = *hist.iter().max().unwrap();
                let expected = if max == 0 { None } else {
                    Some((hist.iter().position(|&h| h == max).unwrap() as u32, max))
                };
                prop_assert_eq!(best, expected);
                prop_assert_eq!(nulls, labels.iter().filter(|l| l.is_none()).count());
            }

            #[test]
            fn window_starts_follow_step(n in 800usize..4000, overlap in 0.0f64..0.9) {
                let r = rec(vec![[0.0; 3]; n], None, 80.0);
                let cfg = WindowConfig { overlap_fraction: overlap, ..WindowConfig::default() };
                let w = make_windows(&r, &cfg).unwrap();
                let step = (800.0 * (1.0 - overlap)).round() as usize;
                for (k, win) in w.iter().enumerate() {
                    prop_assert_eq!((win.start_time_s * 80.0).round() as usize, k * step);
                    prop_assert_eq!(win.data.len(), 800);
                }
                prop_assert_eq!(w.len(), (n - 800) / step + 1);
            }
        }
    }
}
