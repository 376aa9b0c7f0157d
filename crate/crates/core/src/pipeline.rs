//! Stage orchestration over persisted artefacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! windows/<dataset>.bwin
//! tokens/<dataset>.<tokenizer>.bseg
//! models/<variant>/{step_*.ckpt, model.ckpt, metrics.jsonl, summary.json}
//! embeddings/<dataset>/<representation>.bemb
//! results/{probe,sweep,syntax,ablate}.jsonl and results/confusion/*.csv
//! report/*
//! ```
//!
//! Each stage checks the config hash recorded by its inputs and skips work
//! whose output already carries the expected hash and seed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelVariant, RunConfig, SyntheticKind, SyntheticSource};
use crate::error::{Error, Result};
use crate::eval::{
    data_efficiency_sweep, finetune_end_to_end, make_split_plan, make_split_plan_with, mean_std, syntax_probe,
    FinetuneExample, FoldResult, ProtocolResult, SplitPlan, SyntaxProbeResult, TokenEmbeddingSource,
};
use crate::formats::{
    decode_embeddings, decode_tokens, decode_windows, encode_embeddings, encode_tokens, encode_windows, peek_header,
    read_file, write_file, Header, EMBEDDINGS_MAGIC, TOKENS_MAGIC, WINDOWS_MAGIC,
};
use crate::ingest::{load_csv_dataset, prepare_recording, RawRecording, Units, Window};
use crate::model::{encoder_forward, read_checkpoint, Checkpoint, ForwardOptions, ModelParams, WindowInput};
use crate::pretrain::{pretrain_loop, select_upstream_windows, MetricsRecord, PretrainConfig, PretrainOutput};
use crate::probe::{confusion_matrix, fuse, gravity_features, macro_f1, pool_window, WindowEmbedding, GRAVITY_DIM};
use crate::signal::GravitySplitter;
use crate::synth::{default_activities, labelled_recordings, ordering_programs};
use crate::tokenizer::{TokenSequence, TokenizerKind};

/// Controlled ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoGravity,
    NaiveTokenization,
    NoPositional,
    NoPretraining,
    /// One checkpoint per configured mask rate.
    MaskRate,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoGravity,
        Ablation::NaiveTokenization,
        Ablation::NoPositional,
        Ablation::NoPretraining,
        Ablation::MaskRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoGravity => "no_gravity",
            Ablation::NaiveTokenization => "naive_tokenization",
            Ablation::NoPositional => "no_positional",
            Ablation::NoPretraining => "no_pretraining",
            Ablation::MaskRate => "mask_rate",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag {s}")))
    }
}

/// Which frozen features a probe sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Representation {
    pub variant: ModelVariant,
    pub no_gravity: bool,
    pub no_positional: bool,
}

impl Representation {
    pub fn name(&self) -> String {
        let mut s = self.variant.tag();
        if self.no_gravity {
            s.push_str("+no_gravity");
        }
        if self.no_positional {
            s.push_str("+no_positional");
        }
        s
    }

    /// Pooled width `2 * d_model`, plus the flattened gravity residual unless ablated.
    pub fn dim(&self, d_model: usize) -> usize {
        2 * d_model + if self.no_gravity { 0 } else { GRAVITY_DIM }
    }
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub representation: String,
    pub flag: String,
    pub fold: usize,
    pub fraction: f64,
    pub macro_f1: f64,
    pub n_test_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntaxRecord {
    pub dataset: String,
    pub representation: String,
    #[serde(flatten)]
    pub result: SyntaxProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config_hash: u64,
    pub seed: u64,
    pub variant: String,
    pub steps: usize,
    pub corpus_windows: usize,
    pub metrics: Vec<MetricsRecord>,
    pub baseline_masked_mae: Option<f64>,
}

/// Per-dataset outcome of a probe run.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub dataset: String,
    pub plan: SplitPlan,
    pub result: ProtocolResult,
}

/// Optional overrides shared by the model-consuming stages.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub checkpoint: Option<PathBuf>,
}

pub struct Pipeline {
    cfg: RunConfig,
}

fn tokenizer_tag(kind: TokenizerKind) -> &'static str {
    match kind {
        TokenizerKind::MovementSegments => "segments",
        TokenizerKind::EqualChunks => "chunks",
    }
}

fn stamp_matches(path: &Path, magic: &[u8; 5], expected: Header) -> bool {
    peek_header(path, magic).is_ok_and(|h| h == expected)
}

fn check_header(what: &str, path: &Path, found: Header, expected: Header) -> Result<()> {
    if found.config_hash != expected.config_hash {
        return Err(Error::Consistency(format!(
            "{what} {} was produced with config hash {:016x}, expected {:016x}; re-run the upstream stage",
            path.display(),
            found.config_hash,
            expected.config_hash
        )));
    }
    if found.seed != expected.seed {
        return Err(Error::Consistency(format!(
            "{what} {} was produced with seed {}, expected {}",
            path.display(),
            found.seed,
            expected.seed
        )));
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() }))
        .collect()
}

fn confusion_csv(confusion: &[Vec<usize>], class_names: &[String]) -> String {
    let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
    let mut out = String::from("true\\pred");
    for j in 0..confusion.len() {
        out.push(',');
        out.push_str(&name(j));
    }
    out.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        out.push_str(&name(i));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Time-slot-preserving reorder: token content follows `order`, midpoints stay put.
fn reorder_input(base: &WindowInput, order: &[usize]) -> WindowInput {
    WindowInput {
        waveforms: base.waveforms.select(ndarray::Axis(0), order),
        axes: order.iter().map(|&i| base.axes[i]).collect(),
        durations_s: order.iter().map(|&i| base.durations_s[i]).collect(),
        times_s: base.times_s.clone(),
        window_duration_s: base.window_duration_s,
        h_source: base.h_source.clone(),
    }
}

/// Per-token `z` and `u` from a frozen encoder.
pub struct ModelTokenSource<'a> {
    pub params: &'a ModelParams,
    pub inputs: Vec<WindowInput>,
    pub options: ForwardOptions,
}

impl TokenEmbeddingSource for ModelTokenSource<'_> {
    fn n_windows(&self) -> usize {
        self.inputs.len()
    }

    fn window_len(&self, window: usize) -> usize {
        self.inputs[window].len()
    }

    fn embed(&self, window: usize, order: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let input = reorder_input(&self.inputs[window], order);
        let cache = encoder_forward(self.params, &input, self.options)?;
        Ok((cache.z, cache.u))
    }
}

/// Pooled `T_j` for one window; a window without tokens maps to zeros.
pub fn segment_representation(params: &ModelParams, seq: &TokenSequence, options: ForwardOptions) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Ok(vec![0.0; 2 * params.config.d_model]);
    }
    let input = WindowInput::from_tokens(&seq.tokens, seq.sample_rate_hz, seq.window_duration_s);
    let cache = encoder_forward(params, &input, options)?;
    Ok(pool_window(cache.u.view())?.to_vec())
}

pub fn synthetic_recordings(src: &SyntheticSource) -> Vec<RawRecording> {
    let programs = match src.kind {
        SyntheticKind::Activities => default_activities(),
        SyntheticKind::Ordering => ordering_programs(),
    };
    let mut recs = labelled_recordings(&programs, src.subjects, src.blocks_per_class, src.block_s, src.native_hz, src.seed);
    for r in &mut recs {
        r.source_name = src.name.clone();
    }
    recs
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn header(&self, config_hash: u64) -> Header {
        Header {
            config_hash,
            seed: self.cfg.seed,
        }
    }

    pub fn windows_path(&self, dataset: &str) -> PathBuf {
        self.out().join("windows").join(format!("{dataset}.bwin"))
    }

    pub fn tokens_path(&self, dataset: &str, kind: TokenizerKind) -> PathBuf {
        self.out().join("tokens").join(format!("{dataset}.{}.bseg", tokenizer_tag(kind)))
    }

    pub fn model_dir(&self, variant: ModelVariant) -> PathBuf {
        self.out().join("models").join(variant.tag())
    }

    pub fn checkpoint_path(&self, variant: ModelVariant) -> PathBuf {
        self.model_dir(variant).join("model.ckpt")
    }

    pub fn embeddings_path(&self, dataset: &str, rep: &Representation) -> PathBuf {
        self.out().join("embeddings").join(dataset).join(format!("{}.bemb", rep.name()))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.out().join("results")
    }

    fn splitter(&self) -> Result<GravitySplitter> {
        GravitySplitter::new(
            self.cfg.signal.filter_order,
            self.cfg.signal.cutoff_hz,
            self.cfg.ingest.pipeline_rate_hz,
        )
    }

    fn n_classes(&self, dataset: &str) -> usize {
        self.cfg.class_names(dataset).map_or(0, |c| c.len())
    }

    pub fn default_representation(&self) -> Representation {
        Representation {
            variant: self.cfg.default_variant(),
            no_gravity: false,
            no_positional: false,
        }
    }

    // ---- ingest ----

    /// Loads, converts and windows every configured dataset.
    pub fn ingest(&self) -> Result<()> {
        self.cfg.check_paths()?;
        for name in self.cfg.dataset_names() {
            let path = self.windows_path(name);
            let header = self.header(self.cfg.ingest_hash(name));
            if stamp_matches(&path, WINDOWS_MAGIC, header) {
                log::info!("{} is up to date", path.display());
                continue;
            }
            let (recs, units) = match self.cfg.datasets.iter().find(|d| d.dataset_name == name) {
                Some(m) => (load_csv_dataset(Path::new(&m.path), m)?, m.units),
                None => {
                    let src = self.cfg.synthetic.iter().find(|s| s.name == name).expect("configured");
                    (synthetic_recordings(src), Units::G)
                }
            };
            let per: Vec<Result<Vec<Window>>> = recs
                .into_par_iter()
                .map(|r| prepare_recording(r, units, self.cfg.ingest.pipeline_rate_hz, &self.cfg.ingest.window))
                .collect();
            let mut windows = Vec::new();
            for w in per {
                windows.extend(w?);
            }
            log::info!("{name}: {} windows", windows.len());
            write_file(&path, &encode_windows(&windows, header)?)?;
        }
        Ok(())
    }

    pub fn load_windows(&self, dataset: &str) -> Result<Vec<Window>> {
        let path = self.windows_path(dataset);
        let (h, w) = decode_windows(&read_file(&path)?)?;
        check_header("windows file", &path, h, self.header(self.cfg.ingest_hash(dataset)))?;
        Ok(w)
    }

    // ---- tokenize ----

    pub fn tokenize_windows(&self, windows: &[Window], kind: TokenizerKind) -> Result<Vec<TokenSequence>> {
        let splitter = self.splitter()?;
        windows
            .par_iter()
            .map(|w| {
                let linear = splitter.linear(&w.data)?;
                Ok(TokenSequence {
                    subject_id: w.subject_id.clone(),
                    window_index: w.index,
                    label: w.label,
                    sample_rate_hz: w.sample_rate_hz,
                    window_duration_s: w.duration_s,
                    tokens: kind.tokenize(&linear, &self.cfg.tokenizer),
                })
            })
            .collect()
    }

    pub fn tokenize(&self, kind: TokenizerKind) -> Result<()> {
        for name in self.cfg.dataset_names() {
            let path = self.tokens_path(name, kind);
            let header = self.header(self.cfg.tokenize_hash(name, kind));
            if stamp_matches(&path, TOKENS_MAGIC, header) {
                log::info!("{} is up to date", path.display());
                continue;
            }
            let windows = self.load_windows(name)?;
            let seqs = self.tokenize_windows(&windows, kind)?;
            let n_tok: usize = seqs.iter().map(|s| s.len()).sum();
            log::info!("{name}: {n_tok} tokens over {} windows", seqs.len());
            write_file(&path, &encode_tokens(&seqs, header)?)?;
        }
        Ok(())
    }

    pub fn load_tokens(&self, dataset: &str, kind: TokenizerKind) -> Result<Vec<TokenSequence>> {
        let path = self.tokens_path(dataset, kind);
        let (h, s) = decode_tokens(&read_file(&path)?)?;
        check_header("tokens file", &path, h, self.header(self.cfg.tokenize_hash(dataset, kind)))?;
        Ok(s)
    }

    // ---- pretrain ----

    fn pretrain_corpus(&self, variant: ModelVariant) -> Result<Vec<TokenSequence>> {
        let mut corpus = Vec::new();
        for name in self.cfg.pretrain_sources() {
            let seqs = self.load_tokens(name, variant.tokenizer)?;
            if self.cfg.pretrain.select_windows {
                let windows = self.load_windows(name)?;
                let keep: HashSet<(String, u32)> = select_upstream_windows(&windows, &self.cfg.pretrain, self.cfg.seed)
                    .into_iter()
                    .map(|w| (w.subject_id, w.index))
                    .collect();
                corpus.extend(
                    seqs.into_iter()
                        .filter(|s| keep.contains(&(s.subject_id.clone(), s.window_index))),
                );
            } else {
                corpus.extend(seqs);
            }
        }
        Ok(corpus)
    }

    /// Trains one encoder variant and writes its checkpoints and metrics.
    pub fn pretrain(&self, variant: ModelVariant) -> Result<PretrainSummary> {
        let dir = self.model_dir(variant);
        let hash = self.cfg.pretrain_hash(variant);
        let summary_path = dir.join("summary.json");
        if let Ok(text) = fs::read_to_string(&summary_path) {
            if let Ok(s) = serde_json::from_str::<PretrainSummary>(&text) {
                let ckpt_ok = read_checkpoint(&self.checkpoint_path(variant), self.cfg.model)
                    .is_ok_and(|c| c.header == self.header(hash) && c.step == self.cfg.pretrain.steps as u64);
                if s.config_hash == hash && s.seed == self.cfg.seed && ckpt_ok {
                    log::info!("{} is up to date", dir.display());
                    return Ok(s);
                }
            }
        }
        let corpus = self.pretrain_corpus(variant)?;
        if corpus.is_empty() {
            return Err(Error::Config(format!("pretraining corpus for {} is empty", variant.tag())));
        }
        log::info!("pretraining {} on {} windows", variant.tag(), corpus.len());
        let cfg = PretrainConfig {
            mask_rate: variant.mask_rate,
            ..self.cfg.pretrain.clone()
        };
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let metrics_file = dir.join("metrics.jsonl");
        let outcome = pretrain_loop(
            &corpus,
            self.cfg.model,
            &cfg,
            Some(PretrainOutput {
                dir: &dir,
                metrics_file: &metrics_file,
                config_hash: hash,
            }),
        )?;
        let last = outcome.checkpoints.last().ok_or_else(|| Error::Config("pretraining ran zero steps".into()))?;
        let bytes = read_file(last)?;
        write_file(&self.checkpoint_path(variant), &bytes)?;
        let summary = PretrainSummary {
            config_hash: hash,
            seed: self.cfg.seed,
            variant: variant.tag(),
            steps: cfg.steps,
            corpus_windows: corpus.len(),
            metrics: outcome.metrics,
            baseline_masked_mae: outcome.baseline.map(|b| b.masked_mae),
        };
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_file(&summary_path, text.as_bytes())?;
        Ok(summary)
    }

    /// Loads a variant's checkpoint, or an explicit one, and checks its provenance.
    pub fn load_model(&self, variant: ModelVariant, explicit: Option<&Path>) -> Result<Checkpoint> {
        let path = explicit.map_or_else(|| self.checkpoint_path(variant), Path::to_path_buf);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing checkpoint {} for {}; run pretrain for this variant first",
                path.display(),
                variant.tag()
            )));
        }
        let ckpt = read_checkpoint(&path, self.cfg.model)?;
        check_header("checkpoint", &path, ckpt.header, self.header(self.cfg.pretrain_hash(variant)))?;
        Ok(ckpt)
    }

    // ---- embed ----

    fn embed_header(&self, dataset: &str, rep: &Representation, step: u64) -> Header {
        let base = self.cfg.embed_hash(dataset, rep.variant, rep.no_gravity, rep.no_positional);
        self.header(base ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn compute_embeddings(
        &self,
        params: &ModelParams,
        dataset: &str,
        rep: &Representation,
    ) -> Result<Vec<WindowEmbedding>> {
        let seqs = self.load_tokens(dataset, rep.variant.tokenizer)?;
        let windows = if rep.no_gravity { Vec::new() } else { self.load_windows(dataset)? };
        if !rep.no_gravity && windows.len() != seqs.len() {
            return Err(Error::Consistency(format!("{dataset}: windows and tokens disagree in count")));
        }
        let splitter = self.splitter()?;
        let options = ForwardOptions {
            positional: !rep.no_positional,
        };
        seqs.par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let t = segment_representation(params, seq, options)?;
                let features = if rep.no_gravity {
                    t
                } else {
                    let w = &windows[i];
                    if w.subject_id != seq.subject_id || w.index != seq.window_index {
                        return Err(Error::Consistency(format!("{dataset}: window order mismatch at {i}")));
                    }
                    fuse(&t, &gravity_features(&splitter, &w.data)?)
                };
                Ok(WindowEmbedding {
                    subject_id: seq.subject_id.clone(),
                    window_index: seq.window_index,
                    label: seq.label,
                    features,
                })
            })
            .collect()
    }

    /// Frozen-encoder embeddings for every dataset.
    pub fn embed(&self, rep: &Representation, opts: &StageOptions) -> Result<Vec<PathBuf>> {
        let ckpt = self.load_model(rep.variant, opts.checkpoint.as_deref())?;
        let mut out = Vec::new();
        for name in self.cfg.dataset_names() {
            let path = self.embeddings_path(name, rep);
            let header = self.embed_header(name, rep, ckpt.step);
            if !stamp_matches(&path, EMBEDDINGS_MAGIC, header) {
                let emb = self.compute_embeddings(&ckpt.params, name, rep)?;
                write_file(&path, &encode_embeddings(&emb, rep.dim(self.cfg.model.d_model), header)?)?;
            } else {
                log::info!("{} is up to date", path.display());
            }
            out.push(path);
        }
        Ok(out)
    }

    pub fn load_embeddings(&self, dataset: &str, rep: &Representation, opts: &StageOptions) -> Result<Vec<WindowEmbedding>> {
        let path = self.embeddings_path(dataset, rep);
        if !path.exists() {
            return Err(Error::Config(format!("missing embeddings {}; run embed first", path.display())));
        }
        let step = match &opts.checkpoint {
            Some(p) => read_checkpoint(p, self.cfg.model)?.step,
            None => self.cfg.pretrain.steps as u64,
        };
        let (h, dim, emb) = decode_embeddings(&read_file(&path)?)?;
        check_header("embeddings file", &path, h, self.embed_header(dataset, rep, step))?;
        if dim != rep.dim(self.cfg.model.d_model) {
            return Err(Error::Consistency(format!("{} has dim {dim}, expected {}", path.display(), rep.dim(self.cfg.model.d_model))));
        }
        Ok(emb)
    }

    // ---- probe / sweep ----

    fn labelled_datasets(&self) -> Vec<&str> {
        self.cfg
            .dataset_names()
            .into_iter()
            .filter(|d| self.n_classes(d) >= 2)
            .collect()
    }

    pub fn split_plan(&self, embeddings: &[WindowEmbedding]) -> Result<SplitPlan> {
        let subjects: Vec<String> = embeddings
            .iter()
            .filter(|e| e.label.is_some())
            .map(|e| e.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        match self.cfg.eval.split {
            Some(mode) => make_split_plan_with(&subjects, mode, self.cfg.seed),
            None => make_split_plan(&subjects, self.cfg.seed),
        }
    }

    fn fold_records(&self, dataset: &str, rep: &str, flag: &str, fraction: f64, r: &ProtocolResult) -> Vec<ResultRecord> {
        r.folds
            .iter()
            .map(|f| ResultRecord {
                dataset: dataset.to_string(),
                representation: rep.to_string(),
                flag: flag.to_string(),
                fold: f.fold,
                fraction,
                macro_f1: f.macro_f1,
                n_test_windows: f.n_test_windows,
            })
            .collect()
    }

    fn write_confusions(&self, stage: &str, dataset: &str, rep: &str, flag: &str, r: &ProtocolResult) -> Result<()> {
        let names = self.cfg.class_names(dataset).unwrap_or_default();
        let dir = self.results_dir().join("confusion").join(stage);
        for f in &r.folds {
            let path = dir.join(format!("{dataset}__{rep}__{flag}__fold{}.csv", f.fold));
            write_file(&path, confusion_csv(&f.confusion, &names).as_bytes())?;
        }
        Ok(())
    }

    /// Linear probe on one representation for every labelled dataset.
    pub fn probe_representation(&self, rep: &Representation, opts: &StageOptions) -> Result<Vec<ProbeRun>> {
        let mut runs = Vec::new();
        for name in self.labelled_datasets() {
            let emb = self.load_embeddings(name, rep, opts)?;
            let plan = self.split_plan(&emb)?;
            let result = crate::eval::run_probe_protocol(&emb, self.n_classes(name), &plan, &self.cfg.probe)?;
            log::info!("{name} {}: macro-F1 {:.4} ± {:.4}", rep.name(), result.mean, result.std);
            runs.push(ProbeRun {
                dataset: name.to_string(),
                plan,
                result,
            });
        }
        Ok(runs)
    }

    pub fn probe(&self, opts: &StageOptions) -> Result<Vec<ProbeRun>> {
        let rep = self.default_representation();
        let runs = self.probe_representation(&rep, opts)?;
        let mut records = Vec::new();
        for r in &runs {
            records.extend(self.fold_records(&r.dataset, &rep.name(), "none", 1.0, &r.result));
            self.write_confusions("probe", &r.dataset, &rep.name(), "none", &r.result)?;
        }
        write_jsonl(&self.results_dir().join("probe.jsonl"), &records)?;
        Ok(runs)
    }

    pub fn sweep(&self, opts: &StageOptions) -> Result<Vec<(String, Vec<(f64, ProtocolResult)>)>> {
        let rep = self.default_representation();
        let mut out = Vec::new();
        let mut records = Vec::new();
        for name in self.labelled_datasets() {
            let emb = self.load_embeddings(name, &rep, opts)?;
            let plan = self.split_plan(&emb)?;
            let res = data_efficiency_sweep(&emb, self.n_classes(name), &plan, &self.cfg.eval.fractions, &self.cfg.probe)?;
            for (fraction, r) in &res {
                records.extend(self.fold_records(name, &rep.name(), "none", *fraction, r));
            }
            out.push((name.to_string(), res));
        }
        write_jsonl(&self.results_dir().join("sweep.jsonl"), &records)?;
        Ok(out)
    }

    // ---- syntax ----

    pub fn syntax(&self, opts: &StageOptions) -> Result<Vec<SyntaxRecord>> {
        let rep = self.default_representation();
        let ckpt = self.load_model(rep.variant, opts.checkpoint.as_deref())?;
        let mut records = Vec::new();
        for name in self.cfg.dataset_names() {
            let seqs = self.load_tokens(name, rep.variant.tokenizer)?;
            let source = ModelTokenSource {
                params: &ckpt.params,
                inputs: seqs
                    .iter()
                    .filter(|s| !s.is_empty())
                    .map(|s| WindowInput::from_tokens(&s.tokens, s.sample_rate_hz, s.window_duration_s))
                    .collect(),
                options: ForwardOptions::default(),
            };
            let run = syntax_probe(&source, &self.cfg.eval.syntax)?;
            log::info!(
                "{name}: K={} contextual {:.3} shuffle {:.3}",
                run.result.k,
                run.result.accuracy_contextual,
                run.result.accuracy_shuffle
            );
            records.push(SyntaxRecord {
                dataset: name.to_string(),
                representation: rep.name(),
                result: run.result,
            });
        }
        write_jsonl(&self.results_dir().join("syntax.jsonl"), &records)?;
        Ok(records)
    }

    // ---- ablations ----

    fn frozen_probe(&self, rep: &Representation, flag: &str, records: &mut Vec<ResultRecord>) -> Result<()> {
        let ckpt = self.load_model(rep.variant, None)?;
        for name in self.labelled_datasets() {
            let emb = self.compute_embeddings(&ckpt.params, name, rep)?;
            let plan = self.split_plan(&emb)?;
            let r = crate::eval::run_probe_protocol(&emb, self.n_classes(name), &plan, &self.cfg.probe)?;
            log::info!("{name} {flag}: macro-F1 {:.4} ± {:.4}", r.mean, r.std);
            records.extend(self.fold_records(name, &rep.name(), flag, 1.0, &r));
            self.write_confusions("ablate", name, &rep.name(), flag, &r)?;
        }
        Ok(())
    }

    /// Randomly initialized encoder finetuned per fold on the training subjects.
    pub fn finetune_protocol(&self, dataset: &str) -> Result<ProtocolResult> {
        let kind = TokenizerKind::MovementSegments;
        let seqs = self.load_tokens(dataset, kind)?;
        let windows = self.load_windows(dataset)?;
        let splitter = self.splitter()?;
        let mut examples = Vec::new();
        for (s, w) in seqs.iter().zip(&windows) {
            let (Some(label), false) = (s.label, s.is_empty()) else { continue };
            examples.push(FinetuneExample {
                input: WindowInput::from_tokens(&s.tokens, s.sample_rate_hz, s.window_duration_s),
                gravity: Some(gravity_features(&splitter, &w.data)?),
                label,
                subject_id: s.subject_id.clone(),
            });
        }
        let n_classes = self.n_classes(dataset);
        let pseudo: Vec<WindowEmbedding> = examples
            .iter()
            .map(|e| WindowEmbedding {
                subject_id: e.subject_id.clone(),
                window_index: 0,
                label: Some(e.label),
                features: Vec::new(),
            })
            .collect();
        let plan = self.split_plan(&pseudo)?;
        plan.check_disjoint()?;
        let mut folds = Vec::new();
        let mut skipped = Vec::new();
        for (i, fold) in plan.folds.iter().enumerate() {
            let train_set: BTreeSet<&String> = fold.train.iter().collect();
            let test_set: BTreeSet<&String> = fold.test.iter().collect();
            let train: Vec<FinetuneExample> = examples.iter().filter(|e| train_set.contains(&e.subject_id)).cloned().collect();
            let test: Vec<FinetuneExample> = examples.iter().filter(|e| test_set.contains(&e.subject_id)).cloned().collect();
            if test.is_empty() || train.iter().map(|e| e.label).collect::<BTreeSet<_>>().len() < 2 {
                log::warn!("finetune fold {i} skipped: empty test set or single-class training data");
                skipped.push(i);
                continue;
            }
            let model = finetune_end_to_end(&train, n_classes, self.cfg.model, &self.cfg.eval.finetune)?;
            let pred = model.predict(&test)?;
            let truth: Vec<u32> = test.iter().map(|e| e.label).collect();
            folds.push(FoldResult {
                fold: i,
                macro_f1: macro_f1(&pred, &truth, n_classes),
                n_test_windows: test.len(),
                c: f64::NAN,
                confusion: confusion_matrix(&pred, &truth, n_classes),
                train_subjects: fold.train.clone(),
            });
        }
        let scores: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
        let (mean, std) = mean_std(&scores);
        Ok(ProtocolResult {
            folds,
            skipped_folds: skipped,
            mean,
            std,
        })
    }

    /// Runs the reference probe plus the requested ablations.
    pub fn ablate(&self, flags: &[Ablation]) -> Result<Vec<ResultRecord>> {
        let base = self.default_representation();
        // Fail fast on missing checkpoints before any work.
        for v in self.variants_for(flags) {
            self.load_model(v, None)?;
        }
        if flags.contains(&Ablation::NaiveTokenization) {
            self.tokenize(TokenizerKind::EqualChunks)?;
        }

        let mut records = Vec::new();
        self.frozen_probe(&base, "none", &mut records)?;
        for &flag in flags {
            match flag {
                Ablation::NoGravity => self.frozen_probe(
                    &Representation {
                        no_gravity: true,
                        ..base
                    },
                    flag.name(),
                    &mut records,
                )?,
                Ablation::NoPositional => self.frozen_probe(
                    &Representation {
                        no_positional: true,
                        ..base
                    },
                    flag.name(),
                    &mut records,
                )?,
                Ablation::NaiveTokenization => self.frozen_probe(
                    &Representation {
                        variant: ModelVariant {
                            tokenizer: TokenizerKind::EqualChunks,
                            ..base.variant
                        },
                        ..base
                    },
                    flag.name(),
                    &mut records,
                )?,
                Ablation::MaskRate => {
                    for &r in &self.cfg.eval.mask_rates {
                        let rep = Representation {
                            variant: ModelVariant {
                                mask_rate: r,
                                ..base.variant
                            },
                            ..base
                        };
                        self.frozen_probe(&rep, &format!("mask_rate_{r}"), &mut records)?;
                    }
                }
                Ablation::NoPretraining => {
                    for name in self.labelled_datasets() {
                        let r = self.finetune_protocol(name)?;
                        log::info!("{name} no_pretraining: macro-F1 {:.4} ± {:.4}", r.mean, r.std);
                        records.extend(self.fold_records(name, "random_init_finetuned", flag.name(), 1.0, &r));
                        self.write_confusions("ablate", name, "random_init_finetuned", flag.name(), &r)?;
                    }
                }
            }
        }
        write_jsonl(&self.results_dir().join("ablate.jsonl"), &records)?;
        Ok(records)
    }

    /// Variants a set of flags needs checkpoints for.
    pub fn variants_for(&self, flags: &[Ablation]) -> Vec<ModelVariant> {
        let base = self.cfg.default_variant();
        let mut out = vec![base];
        for f in flags {
            match f {
                Ablation::NaiveTokenization => out.push(ModelVariant {
                    tokenizer: TokenizerKind::EqualChunks,
                    ..base
                }),
                Ablation::MaskRate => {
                    for &r in &self.cfg.eval.mask_rates {
                        out.push(ModelVariant { mask_rate: r, ..base });
                    }
                }
                _ => {}
            }
        }
        let mut uniq: Vec<ModelVariant> = Vec::new();
        for v in out {
            if !uniq.contains(&v) {
                uniq.push(v);
            }
        }
        uniq
    }
}

// ---- report ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub representation: String,
    pub flag: String,
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
}

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.representation.clone(), r.flag.clone(), r.fraction.to_bits()))
            .or_default()
            .push(r.macro_f1);
    }
    groups
        .into_iter()
        .map(|((dataset, representation, flag, fraction), scores)| {
            let (mean, std) = mean_std(&scores);
            SummaryRow {
                dataset,
                representation,
                flag,
                fraction: f64::from_bits(fraction),
                mean,
                std,
                n_folds: scores.len(),
            }
        })
        .collect()
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("dataset,representation,flag,fraction,mean_macro_f1,std_macro_f1,n_folds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.dataset, r.representation, r.flag, r.fraction, r.mean, r.std, r.n_folds
        ));
    }
    out
}

/// Flag rows by dataset columns, cells as `mean ± std`.
fn markdown_table(rows: &[SummaryRow]) -> String {
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    let keys: BTreeSet<(&str, &str)> = rows.iter().map(|r| (r.flag.as_str(), r.representation.as_str())).collect();
    let mut out = String::from("| flag | representation |");
    for d in &datasets {
        out.push_str(&format!(" {d} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(datasets.len()));
    out.push('\n');
    for (flag, rep) in keys {
        out.push_str(&format!("| {flag} | {rep} |"));
        for d in &datasets {
            match rows.iter().find(|r| r.dataset == *d && r.flag == flag && r.representation == rep) {
                Some(r) => out.push_str(&format!(" {:.3} ± {:.3} |", r.mean, r.std)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Consolidated tables and plot series from a results directory.
///
/// Missing result files yield empty tables and a warning.
pub fn report(results_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let load = |name: &str| -> Result<Vec<ResultRecord>> {
        let p = results_dir.join(name);
        if p.exists() {
            read_jsonl(&p)
        } else {
            Ok(Vec::new())
        }
    };
    let probe = load("probe.jsonl")?;
    let ablate = load("ablate.jsonl")?;
    let sweep = load("sweep.jsonl")?;
    let syntax_path = results_dir.join("syntax.jsonl");
    let syntax: Vec<SyntaxRecord> = if syntax_path.exists() { read_jsonl(&syntax_path)? } else { Vec::new() };
    if probe.is_empty() && ablate.is_empty() && sweep.is_empty() && syntax.is_empty() {
        log::warn!("no results found in {}; writing empty tables", results_dir.display());
    }

    let probe_rows = summarize(&probe);
    let ablate_rows = summarize(&ablate);
    let sweep_rows = summarize(&sweep);
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        write_file(&p, text.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put("probe_table.csv", summary_csv(&probe_rows))?;
    put("ablation_table.csv", summary_csv(&ablate_rows))?;
    put("sweep_series.csv", summary_csv(&sweep_rows))?;
    let mut syn = String::from(
        "dataset,representation,k,silhouette,accuracy_contextual,accuracy_noncontextual,accuracy_markov,accuracy_shuffle,n_unique_bigrams,chance\n",
    );
    for s in &syntax {
        let r = &s.result;
        syn.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}\n",
            s.dataset,
            s.representation,
            r.k,
            r.silhouette,
            r.accuracy_contextual,
            r.accuracy_noncontextual,
            r.accuracy_markov,
            r.accuracy_shuffle,
            r.n_unique_bigrams,
            r.chance
        ));
    }
    put("syntax_series.csv", syn)?;
    let md = format!(
        "# Results\n\n## Linear probe, Macro-F1 (mean ± std)\n\n{}\n## Ablations, Macro-F1 (mean ± std)\n\n{}\n",
        markdown_table(&probe_rows),
        markdown_table(&ablate_rows)
    );
    put("report.md", md)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::SEGMENT_REPR_DIM;

    fn record(dataset: &str, flag: &str, fold: usize, f1: f64) -> ResultRecord {
        ResultRecord {
            dataset: dataset.into(),
            representation: "segments_r050".into(),
            flag: flag.into(),
            fold,
            fraction: 1.0,
            macro_f1: f1,
            n_test_windows: 10,
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn summary_matches_hand_aggregation() {
        let recs = vec![record("d", "none", 0, 0.5), record("d", "none", 1, 1.0), record("d", "no_gravity", 0, 0.25)];
        let rows = summarize(&recs);
        assert_eq!(rows.len(), 2);
        let none = rows.iter().find(|r| r.flag == "none").unwrap();
        assert!((none.mean - 0.75).abs() < 1e-12);
        assert!((none.std - 0.25).abs() < 1e-12);
        assert_eq!(none.n_folds, 2);
    }

    #[test]
    fn report_on_empty_dir_writes_empty_tables() {
        let dir = tempfile::tempdir().unwrap();
        let files = report(&dir.path().join("results"), &dir.path().join("report")).unwrap();
        assert_eq!(files.len(), 5);
        let probe = fs::read_to_string(dir.path().join("report/probe_table.csv")).unwrap();
        assert_eq!(probe.lines().count(), 1);
    }

    #[test]
    fn confusion_csv_layout() {
        let csv = confusion_csv(&[vec![2, 1], vec![0, 3]], &["a".into(), "b".into()]);
        assert_eq!(csv, "true\\pred,a,b\na,2,1\nb,0,3\n");
    }

    #[test]
    fn representation_dims() {
        let v = ModelVariant {
            tokenizer: TokenizerKind::MovementSegments,
            mask_rate: 0.5,
        };
        let rep = Representation {
            variant: v,
            no_gravity: true,
            no_positional: false,
        };
        assert_eq!(rep.dim(64), SEGMENT_REPR_DIM);
        assert_eq!(rep.name(), "segments_r050+no_gravity");
        assert_eq!(Representation { no_gravity: false, ..rep }.dim(64), 1028);
    }
}
