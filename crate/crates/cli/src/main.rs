use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use biopm::config::{ModelVariant, SyntheticKind, SyntheticSource, ENV_THREADS};
use biopm::pipeline::{report, synthetic_recordings};
use biopm::tokenizer::TokenizerKind;
use biopm::{Ablation, Pipeline, Representation, RunConfig, StageOptions};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "biopm", version, about = "Movement-segment pretraining and evaluation pipeline")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "biopm.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to BIOPM_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single worker thread on top of the always-ordered reductions.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Checkpoint to use instead of the variant's final one.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Ablation flag; repeatable.
    #[arg(long = "flag", global = true, value_parser = parse_flag)]
    flags: Vec<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, convert, resample and window every dataset.
    Ingest,
    /// Tokenize windows (equal chunks with `--flag naive_tokenization`).
    Tokenize,
    /// Pretrain the encoder variants the flags require.
    Pretrain,
    /// Write frozen window embeddings.
    Embed,
    /// Linear probe under subject-disjoint splits.
    Probe,
    /// Data-efficiency sweep over labelled-subject fractions.
    Sweep,
    /// Next-token probe on held-out bigram types.
    Syntax,
    /// Controlled ablations (all of them when no flag is given).
    Ablate,
    /// Consolidate results into tables and plot series.
    Report {
        /// Results directory; defaults to the configured one.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Where to write tables; defaults to `<output_dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic labelled CSV dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = Kind::Activities)]
        kind: Kind,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        blocks_per_class: usize,
        #[arg(long, default_value_t = 60.0)]
        block_s: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Activities,
    Ordering,
}

fn parse_flag(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: biopm::Error| e.to_string())
}

fn thread_count(cli: &Cli) -> Result<Option<usize>> {
    if cli.deterministic {
        return Ok(Some(1));
    }
    if let Some(t) = cli.threads {
        return Ok(Some(t));
    }
    match std::env::var(ENV_THREADS) {
        Ok(v) => Ok(Some(v.parse().with_context(|| format!("{ENV_THREADS}={v} is not a count"))?)),
        Err(_) => Ok(None),
    }
}

fn load_pipeline(cli: &Cli) -> Result<Pipeline> {
    let mut cfg = RunConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(Pipeline::new(cfg)?)
}

fn write_synth_csv(path: &Path, src: &SyntheticSource) -> Result<()> {
    let names = src.class_names();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["subject", "x", "y", "z", "label"])?;
    for rec in synthetic_recordings(src) {
        let labels = rec.labels.as_deref().unwrap_or(&[]);
        for (i, s) in rec.samples.iter().enumerate() {
            let label = labels.get(i).copied().flatten().map_or("", |c| names[c as usize].as_str());
            w.write_record([
                rec.subject_id.as_str(),
                &format!("{:.6}", s[0]),
                &format!("{:.6}", s[1]),
                &format!("{:.6}", s[2]),
                label,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = thread_count(cli)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let opts = StageOptions {
        checkpoint: cli.checkpoint.clone(),
    };
    let uses = |a: Ablation| cli.flags.contains(&a);
    match &cli.command {
        Command::Synth {
            kind,
            subjects,
            blocks_per_class,
            block_s,
            out,
        } => {
            let src = SyntheticSource {
                name: "synthetic".into(),
                kind: match kind {
                    Kind::Activities => SyntheticKind::Activities,
                    Kind::Ordering => SyntheticKind::Ordering,
                },
                subjects: *subjects,
                blocks_per_class: *blocks_per_class,
                block_s: *block_s,
                native_hz: biopm::ingest::PIPELINE_RATE_HZ,
                seed: cli.seed.unwrap_or(0),
            };
            write_synth_csv(out, &src)?;
            println!("wrote {}", out.display());
        }
        Command::Report { results, out } => {
            // Reporting needs only directories, so a missing config is fine.
            let base = RunConfig::load(&cli.config).ok().map(|c| c.output_dir);
            let results = match (results, &base) {
                (Some(r), _) => r.clone(),
                (None, Some(b)) => b.join("results"),
                (None, None) => bail!("pass --results or a readable --config"),
            };
            let out = match (out, &base) {
                (Some(o), _) => o.clone(),
                (None, Some(b)) => b.join("report"),
                (None, None) => results.join("..").join("report"),
            };
            for p in report(&results, &out)? {
                println!("{}", p.display());
            }
        }
        cmd => {
            let p = load_pipeline(cli)?;
            match cmd {
                Command::Ingest => p.ingest()?,
                Command::Tokenize => {
                    p.tokenize(TokenizerKind::MovementSegments)?;
                    if uses(Ablation::NaiveTokenization) {
                        p.tokenize(TokenizerKind::EqualChunks)?;
                    }
                }
                Command::Pretrain => {
                    for v in p.variants_for(&cli.flags) {
                        let s = p.pretrain(v)?;
                        let last = s.metrics.last().map_or(f64::NAN, |m| m.masked_mae);
                        println!("{}: {} steps, held-out masked MAE {last:.5}", s.variant, s.steps);
                    }
                }
                Command::Embed => {
                    let base = p.default_representation();
                    let variant = if uses(Ablation::NaiveTokenization) {
                        ModelVariant {
                            tokenizer: TokenizerKind::EqualChunks,
                            ..base.variant
                        }
                    } else {
                        base.variant
                    };
                    let rep = Representation {
                        variant,
                        no_gravity: uses(Ablation::NoGravity),
                        no_positional: uses(Ablation::NoPositional),
                    };
                    for path in p.embed(&rep, &opts)? {
                        println!("{}", path.display());
                    }
                }
                Command::Probe => {
                    for r in p.probe(&opts)? {
                        println!("{}: macro-F1 {:.4} ± {:.4}", r.dataset, r.result.mean, r.result.std);
                    }
                }
                Command::Sweep => {
                    for (dataset, series) in p.sweep(&opts)? {
                        for (f, r) in series {
                            println!("{dataset} fraction {f}: macro-F1 {:.4} ± {:.4}", r.mean, r.std);
                        }
                    }
                }
                Command::Syntax => {
                    for r in p.syntax(&opts)? {
                        let s = &r.result;
                        println!(
                            "{}: K={} contextual {:.3} non-contextual {:.3} markov {:.3} shuffle {:.3} chance {:.3}",
                            r.dataset,
                            s.k,
                            s.accuracy_contextual,
                            s.accuracy_noncontextual,
                            s.accuracy_markov,
                            s.accuracy_shuffle,
                            s.chance
                        );
                    }
                }
                Command::Ablate => {
                    let flags = if cli.flags.is_empty() { Ablation::ALL.to_vec() } else { cli.flags.clone() };
                    let records = p.ablate(&flags)?;
                    for row in biopm::pipeline::summarize(&records) {
                        println!(
                            "{} {} {}: macro-F1 {:.4} ± {:.4}",
                            row.dataset, row.flag, row.representation, row.mean, row.std
                        );
                    }
                }
                Command::Report { .. } | Command::Synth { .. } => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
