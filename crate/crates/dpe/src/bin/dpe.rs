//! Command-line entry point for the subword segmentation toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpe::analysis;
use dpe::bpe;
use dpe::corpus;
use dpe::lattice::build_lattice;
use dpe::pipeline::{
    self, AnalyzeConfig, PipelineError, SegmentConfig, SourceSegMode, TargetSegMode,
    TrainScorerConfig,
};
use dpe::scorer::ScorerMode;
use dpe::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "dpe", version, about = "Subword segmentation toolkit: BPE, BPE-dropout, and DP-based encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE merge table and vocabulary from raw text.
    TrainBpe(TrainBpeArgs),
    /// Train the subword scorer on a parallel corpus.
    TrainScorer(TrainScorerArgs),
    /// Segment a parallel corpus with the configured source/target modes.
    Segment(SegmentArgs),
    /// Segment and write the final training set plus a manifest.
    Emit(SegmentArgs),
    /// Compare two segmentations of the same raw corpus.
    Analyze(AnalyzeArgs),
    /// Dump a word's segmentation lattice in DOT format.
    DumpLattice(DumpLatticeArgs),
}

#[derive(Args)]
struct TrainBpeArgs {
    /// Raw text files (all sides that share the vocabulary).
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    out_merges: PathBuf,
    #[arg(long)]
    out_vocab: PathBuf,
}

#[derive(Args)]
struct TrainScorerArgs {
    /// TOML config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train_log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accumulation: Option<usize>,
    #[arg(long)]
    dropout_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ScorerMode>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Worker threads (0 = library default).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SegmentArgs {
    /// TOML config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_source: Option<PathBuf>,
    #[arg(long)]
    out_target: Option<PathBuf>,
    /// Where to list lines that needed the per-character fallback.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long, value_enum)]
    source_mode: Option<SourceSegMode>,
    #[arg(long, value_enum)]
    target_mode: Option<TargetSegMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    joiner: Option<String>,
    #[arg(long)]
    dropout_p: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Number of seeded re-draws to emit.
    #[arg(long)]
    variants: Option<usize>,
    /// Manifest path (emit subcommand only).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// First segmented corpus.
    #[arg(long)]
    segmented_a: PathBuf,
    /// Second segmented corpus.
    #[arg(long)]
    segmented_b: PathBuf,
    /// The shared raw corpus both segmentations came from.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long, default_value = "@@")]
    joiner: String,
    #[arg(long)]
    report_tsv: Option<PathBuf>,
    #[arg(long)]
    bands_csv: Option<PathBuf>,
    /// How many top disagreements to print.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

#[derive(Args)]
struct DumpLatticeArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    word: String,
    /// Output DOT file (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, PipelineError> {
    value.ok_or_else(|| PipelineError::Config(format!("missing required --{flag} (or config key)")))
}

fn run_train_bpe(args: &TrainBpeArgs) -> Result<(), PipelineError> {
    if args.vocab_size == 0 {
        return Err(PipelineError::Config("vocab-size must be >= 1".into()));
    }
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
    for path in &args.input {
        let lines =
            corpus::read_lines(path).map_err(|e| PipelineError::Data(e.to_string()))?;
        for (word, n) in corpus::word_frequencies(lines.iter().map(String::as_str)) {
            *freqs.entry(word).or_insert(0) += n;
        }
    }
    let (merges, vocab) = bpe::train_bpe(&freqs, args.vocab_size)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    merges
        .save(&args.out_merges)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    vocab
        .save(&args.out_vocab)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    println!(
        "trained {} merges, vocabulary of {} entries",
        merges.len(),
        vocab.len()
    );
    Ok(())
}

fn resolve_train_scorer(args: &TrainScorerArgs) -> Result<TrainScorerConfig, PipelineError> {
    // Start from the config file when given, else from hard defaults with
    // the required paths still unset; flags override either way.
    let base: Option<TrainScorerConfig> = match &args.config {
        Some(path) => Some(pipeline::load_toml_config(path)?),
        None => None,
    };
    let pick_path = |flag: &Option<PathBuf>, from_cfg: Option<PathBuf>, name: &str| {
        required(flag.clone().or(from_cfg), name)
    };
    Ok(TrainScorerConfig {
        source: pick_path(&args.source, base.as_ref().map(|c| c.source.clone()), "source")?,
        target: pick_path(&args.target, base.as_ref().map(|c| c.target.clone()), "target")?,
        vocab: pick_path(&args.vocab, base.as_ref().map(|c| c.vocab.clone()), "vocab")?,
        merges: pick_path(&args.merges, base.as_ref().map(|c| c.merges.clone()), "merges")?,
        checkpoint: pick_path(
            &args.checkpoint,
            base.as_ref().map(|c| c.checkpoint.clone()),
            "checkpoint",
        )?,
        train_log: args
            .train_log
            .clone()
            .or_else(|| base.as_ref().and_then(|c| c.train_log.clone())),
        epochs: args.epochs.or(base.as_ref().map(|c| c.epochs)).unwrap_or(5),
        learning_rate: args
            .learning_rate
            .or(base.as_ref().map(|c| c.learning_rate))
            .unwrap_or(0.5),
        batch_size: args
            .batch_size
            .or(base.as_ref().map(|c| c.batch_size))
            .unwrap_or(8),
        grad_accumulation: args
            .grad_accumulation
            .or(base.as_ref().map(|c| c.grad_accumulation))
            .unwrap_or(16),
        dropout_p: args
            .dropout_p
            .or(base.as_ref().map(|c| c.dropout_p))
            .unwrap_or(0.05),
        seed: args.seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(0),
        mode: args
            .mode
            .or(base.as_ref().map(|c| c.mode))
            .unwrap_or(ScorerMode::Conditional),
        embedding_dim: args
            .embedding_dim
            .or(base.as_ref().map(|c| c.embedding_dim))
            .unwrap_or(8),
        workers: args.workers.or(base.as_ref().map(|c| c.workers)).unwrap_or(0),
    })
}

fn resolve_segment(args: &SegmentArgs) -> Result<SegmentConfig, PipelineError> {
    let base: Option<SegmentConfig> = match &args.config {
        Some(path) => Some(pipeline::load_toml_config(path)?),
        None => None,
    };
    let pick_path = |flag: &Option<PathBuf>, from_cfg: Option<PathBuf>, name: &str| {
        required(flag.clone().or(from_cfg), name)
    };
    Ok(SegmentConfig {
        source: pick_path(&args.source, base.as_ref().map(|c| c.source.clone()), "source")?,
        target: pick_path(&args.target, base.as_ref().map(|c| c.target.clone()), "target")?,
        vocab: pick_path(&args.vocab, base.as_ref().map(|c| c.vocab.clone()), "vocab")?,
        merges: pick_path(&args.merges, base.as_ref().map(|c| c.merges.clone()), "merges")?,
        checkpoint: args
            .checkpoint
            .clone()
            .or_else(|| base.as_ref().and_then(|c| c.checkpoint.clone())),
        out_source: pick_path(
            &args.out_source,
            base.as_ref().map(|c| c.out_source.clone()),
            "out-source",
        )?,
        out_target: pick_path(
            &args.out_target,
            base.as_ref().map(|c| c.out_target.clone()),
            "out-target",
        )?,
        sidecar: args
            .sidecar
            .clone()
            .or_else(|| base.as_ref().and_then(|c| c.sidecar.clone())),
        source_mode: required(
            args.source_mode.or(base.as_ref().map(|c| c.source_mode)),
            "source-mode",
        )?,
        target_mode: required(
            args.target_mode.or(base.as_ref().map(|c| c.target_mode)),
            "target-mode",
        )?,
        seed: args.seed.or(base.as_ref().map(|c| c.seed)).unwrap_or(0),
        joiner: args
            .joiner
            .clone()
            .or_else(|| base.as_ref().map(|c| c.joiner.clone()))
            .unwrap_or_else(pipeline::default_joiner),
        dropout_p: args
            .dropout_p
            .or(base.as_ref().map(|c| c.dropout_p))
            .unwrap_or(0.05),
        workers: args.workers.or(base.as_ref().map(|c| c.workers)).unwrap_or(0),
        variants: args
            .variants
            .or(base.as_ref().map(|c| c.variants))
            .unwrap_or(1),
    })
}

fn run_segment(args: &SegmentArgs, emit: bool) -> Result<(), PipelineError> {
    let cfg = resolve_segment(args)?;
    if emit {
        let manifest_path = required(args.manifest.clone(), "manifest")?;
        let manifest = pipeline::run_stage_emit(&cfg, &manifest_path)?;
        println!(
            "emitted {} variant(s), {} fallback line(s), manifest {}",
            manifest.variants,
            manifest.sidecar_lines,
            manifest_path.display()
        );
    } else {
        let out = pipeline::run_stage_segment(&cfg)?;
        println!(
            "segmented {} variant(s), {} fallback line(s)",
            out.source_files.len(),
            out.sidecar_lines
        );
    }
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<(), PipelineError> {
    let cfg = AnalyzeConfig {
        segmented_a: args.segmented_a.clone(),
        segmented_b: args.segmented_b.clone(),
        raw: args.raw.clone(),
        joiner: args.joiner.clone(),
        report_tsv: args.report_tsv.clone(),
        bands_csv: args.bands_csv.clone(),
        top: args.top,
    };
    let report = pipeline::run_analyze(&cfg)?;
    println!(
        "{} word types, aggregate disagreement {:.4}",
        report.total_types(),
        report.aggregate_rate()
    );
    for band in &report.bands {
        println!(
            "band {:>9}: {:>6} types, rate {:.4}",
            band.label,
            band.word_types,
            band.rate()
        );
    }
    for rec in analysis::top_disagreements(&report, cfg.top) {
        println!(
            "{}\t{}\t{}\t{}",
            rec.word,
            rec.freq,
            rec.seg_a.join("|"),
            rec.seg_b.join("|")
        );
    }
    Ok(())
}

fn run_dump_lattice(args: &DumpLatticeArgs) -> Result<(), PipelineError> {
    let vocab = Vocabulary::load(&args.vocab).map_err(|e| PipelineError::Data(e.to_string()))?;
    let chars: Vec<char> = args.word.chars().collect();
    if chars.is_empty() {
        return Err(PipelineError::Config("word must be non-empty".into()));
    }
    let lattice = build_lattice(&chars, &vocab);
    let dot = lattice.to_dot(&chars, &vocab);
    match &args.out {
        Some(path) => std::fs::write(path, dot).map_err(|e| PipelineError::Data(e.to_string()))?,
        None => print!("{dot}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainBpe(args) => run_train_bpe(args),
        Command::TrainScorer(args) => resolve_train_scorer(args).and_then(|cfg| {
            let path = pipeline::run_stage_train_scorer(&cfg)?;
            println!("checkpoint written to {}", path.display());
            Ok(())
        }),
        Command::Segment(args) => run_segment(args, false),
        Command::Emit(args) => run_segment(args, true),
        Command::Analyze(args) => run_analyze(args),
        Command::DumpLattice(args) => run_dump_lattice(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
