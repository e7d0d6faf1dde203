//! Corpus-scale pipeline stages behind the CLI: scorer training, parallel
//! corpus segmentation in the four source/target mode combinations, final
//! training-set emission with a manifest, and report generation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::bpe::{self, DropoutTrace, MergeTable};
use crate::corpus::{self, normalize_whitespace};
use crate::dp;
use crate::scorer::{
    source_features, Checkpoint, ConditionalScorer, ScorerMode,
};
use crate::segmentation::{join_word_tokens, Segmentation};
use crate::trainer::{self, TrainConfig};
use crate::vocab::Vocabulary;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pipeline failures, split by exit code: config errors (2) are detectable
/// before touching data, data errors (3) arise from the corpus itself.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn data_err(err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(err.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SourceSegMode {
    Bpe,
    BpeDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSegMode {
    Bpe,
    BpeDropout,
    DpeFixed,
    DpeOnTheFly,
}

/// Segmentation stage configuration. Loadable from a TOML config file;
/// CLI flags override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out_source: PathBuf,
    pub out_target: PathBuf,
    /// Unsegmentable lines are listed here; their output falls back to
    /// per-character tokens and is never dropped.
    pub sidecar: Option<PathBuf>,
    pub source_mode: SourceSegMode,
    pub target_mode: TargetSegMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_joiner")]
    pub joiner: String,
    #[serde(default = "default_dropout_p")]
    pub dropout_p: f64,
    #[serde(default)]
    pub workers: usize,
    /// Seeded re-draws emitted as `.0`, `.1`, ... file variants when > 1.
    #[serde(default = "default_variants")]
    pub variants: usize,
}

pub fn default_joiner() -> String {
    "@@".to_string()
}

fn default_dropout_p() -> f64 {
    0.05
}

fn default_variants() -> usize {
    1
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if matches!(
            self.target_mode,
            TargetSegMode::DpeFixed | TargetSegMode::DpeOnTheFly
        ) && self.checkpoint.is_none()
        {
            return Err(config_err("dpe target modes require --checkpoint"));
        }
        if self.target_mode == TargetSegMode::DpeOnTheFly
            && self.source_mode != SourceSegMode::BpeDropout
        {
            return Err(config_err(
                "dpe-on-the-fly requires source-mode bpe-dropout",
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(config_err("dropout-p must be in [0,1]"));
        }
        if self.variants == 0 {
            return Err(config_err("variants must be >= 1"));
        }
        for (name, path) in [
            ("source", &self.source),
            ("target", &self.target),
            ("vocab", &self.vocab),
            ("merges", &self.merges),
        ] {
            if !path.exists() {
                return Err(config_err(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(ckpt) = &self.checkpoint {
            if !ckpt.exists() {
                return Err(config_err(format!(
                    "checkpoint {} does not exist",
                    ckpt.display()
                )));
            }
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, stream: u64, line: u64) -> u64 {
    let mut x = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(line.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One line's segmentation outcome; `fallback` is set when a per-character
/// fallback was used, with the reason for the sidecar.
struct LineResult {
    source_tokens: Vec<String>,
    target_tokens: Vec<String>,
    fallback: Option<String>,
}

fn per_char_fallback(sentence: &str, joiner: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in sentence.split_whitespace() {
        let cs: Vec<char> = word.chars().collect();
        let z = Segmentation::per_character(cs.len());
        tokens.extend(join_word_tokens(&cs, &z, joiner));
    }
    tokens
}

/// Greedy-BPE segments a sentence into joiner-marked tokens; per-character
/// fallback on unknown characters.
fn bpe_sentence_tokens(
    sentence: &str,
    merges: &MergeTable,
    vocab: &Vocabulary,
    joiner: &str,
) -> Result<Vec<String>, bpe::BpeError> {
    let mut tokens = Vec::new();
    for word in sentence.split_whitespace() {
        let z = bpe::encode_bpe(word, merges, vocab)?;
        let cs: Vec<char> = word.chars().collect();
        tokens.extend(join_word_tokens(&cs, &z, joiner));
    }
    Ok(tokens)
}

fn bpe_dropout_sentence_tokens(
    sentence: &str,
    merges: &MergeTable,
    vocab: &Vocabulary,
    joiner: &str,
    p: f64,
    seed: u64,
) -> Result<Vec<String>, bpe::BpeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = DropoutTrace::default();
    let mut tokens = Vec::new();
    for word in sentence.split_whitespace() {
        let z = bpe::encode_bpe_dropout_with_rng(word, merges, vocab, p, &mut rng, &mut trace)?;
        let cs: Vec<char> = word.chars().collect();
        tokens.extend(join_word_tokens(&cs, &z, joiner));
    }
    Ok(tokens)
}

struct SegmentAssets {
    vocab: Vocabulary,
    merges: MergeTable,
    checkpoint: Option<Checkpoint>,
}

fn load_segment_assets(cfg: &SegmentConfig) -> Result<SegmentAssets, PipelineError> {
    let vocab = Vocabulary::load(&cfg.vocab).map_err(data_err)?;
    let merges = MergeTable::load(&cfg.merges).map_err(data_err)?;
    let checkpoint = match &cfg.checkpoint {
        Some(path) => Some(Checkpoint::load(path).map_err(data_err)?),
        None => None,
    };
    Ok(SegmentAssets {
        vocab,
        merges,
        checkpoint,
    })
}

fn segment_line(
    cfg: &SegmentConfig,
    assets: &SegmentAssets,
    variant: u64,
    line_idx: usize,
    source_raw: &str,
    target_raw: &str,
) -> LineResult {
    let vocab = &assets.vocab;
    let merges = &assets.merges;
    let joiner = &cfg.joiner;
    let mut fallback: Option<String> = None;

    // Source side. Streams 2*variant / 2*variant+1 keep the source and
    // target dropout draws independent.
    let source_tokens = match cfg.source_mode {
        SourceSegMode::Bpe => bpe_sentence_tokens(source_raw, merges, vocab, joiner),
        SourceSegMode::BpeDropout => bpe_dropout_sentence_tokens(
            source_raw,
            merges,
            vocab,
            joiner,
            cfg.dropout_p,
            mix_seed(cfg.seed, 2 * variant, line_idx as u64),
        ),
    }
    .unwrap_or_else(|err| {
        fallback = Some(format!("source: {err}"));
        per_char_fallback(source_raw, joiner)
    });

    let target_tokens = match cfg.target_mode {
        TargetSegMode::Bpe => bpe_sentence_tokens(target_raw, merges, vocab, joiner)
            .unwrap_or_else(|err| {
                fallback = Some(format!("target: {err}"));
                per_char_fallback(target_raw, joiner)
            }),
        TargetSegMode::BpeDropout => bpe_dropout_sentence_tokens(
            target_raw,
            merges,
            vocab,
            joiner,
            cfg.dropout_p,
            mix_seed(cfg.seed, 2 * variant + 1, line_idx as u64),
        )
        .unwrap_or_else(|err| {
            fallback = Some(format!("target: {err}"));
            per_char_fallback(target_raw, joiner)
        }),
        TargetSegMode::DpeFixed | TargetSegMode::DpeOnTheFly => {
            let ckpt = assets.checkpoint.as_ref().expect("validated");
            let src_feats = match ckpt.mode {
                ScorerMode::UnconditionalLm => Vec::new(),
                ScorerMode::Conditional => {
                    // Fixed mode conditions on the deterministic BPE source;
                    // on-the-fly re-conditions on this pass's dropout draw.
                    let conditioning = match cfg.target_mode {
                        TargetSegMode::DpeFixed => {
                            bpe_sentence_tokens(source_raw, merges, vocab, "")
                        }
                        _ => bpe_dropout_sentence_tokens(
                            source_raw,
                            merges,
                            vocab,
                            "",
                            cfg.dropout_p,
                            mix_seed(cfg.seed, 2 * variant, line_idx as u64),
                        ),
                    };
                    match conditioning {
                        Ok(tokens) => source_features(&tokens, &ckpt.feature_config),
                        Err(err) => {
                            fallback = Some(format!("source conditioning: {err}"));
                            Vec::new()
                        }
                    }
                }
            };
            let scorer = ConditionalScorer::new(&ckpt.params, &ckpt.feature_config, src_feats);
            let chars: Vec<char> = target_raw.chars().collect();
            match dp::sentence_viterbi_tokens(&chars, &scorer, vocab, joiner) {
                Ok(tokens) => tokens,
                Err(err) => {
                    fallback = Some(format!("target: {err}"));
                    per_char_fallback(target_raw, joiner)
                }
            }
        }
    };

    LineResult {
        source_tokens,
        target_tokens,
        fallback,
    }
}

fn with_variant_suffix(path: &Path, variant: usize, total: usize) -> PathBuf {
    if total <= 1 {
        path.to_path_buf()
    } else {
        let mut name = path.as_os_str().to_os_string();
        name.push(format!(".{variant}"));
        PathBuf::from(name)
    }
}

fn run_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    if workers == 0 {
        Ok(job())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| config_err(format!("worker pool: {e}")))?;
        Ok(pool.install(job))
    }
}

/// Files written by one segmentation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentOutput {
    pub source_files: Vec<PathBuf>,
    pub target_files: Vec<PathBuf>,
    pub sidecar_lines: usize,
}

/// Stage 2: segments a parallel corpus per the configured modes. Output
/// line counts always equal the input's; unsegmentable lines fall back to
/// per-character tokens and are reported to the sidecar file.
pub fn run_stage_segment(cfg: &SegmentConfig) -> Result<SegmentOutput, PipelineError> {
    cfg.validate()?;
    let assets = load_segment_assets(cfg)?;
    let pairs_src = corpus::read_lines(&cfg.source).map_err(data_err)?;
    let pairs_tgt = corpus::read_lines(&cfg.target).map_err(data_err)?;
    if pairs_src.len() != pairs_tgt.len() {
        return Err(data_err(format!(
            "line count mismatch: {} source vs {} target",
            pairs_src.len(),
            pairs_tgt.len()
        )));
    }
    let normalized: Vec<(String, String)> = pairs_src
        .iter()
        .zip(&pairs_tgt)
        .map(|(s, t)| (normalize_whitespace(s), normalize_whitespace(t)))
        .collect();

    let mut out = SegmentOutput {
        source_files: Vec::new(),
        target_files: Vec::new(),
        sidecar_lines: 0,
    };
    let mut sidecar_entries: Vec<String> = Vec::new();
    for variant in 0..cfg.variants {
        let results: Vec<LineResult> = run_pool(cfg.workers, || {
            normalized
                .par_iter()
                .enumerate()
                .map(|(i, (s, t))| segment_line(cfg, &assets, variant as u64, i, s, t))
                .collect()
        })?;
        let src_path = with_variant_suffix(&cfg.out_source, variant, cfg.variants);
        let tgt_path = with_variant_suffix(&cfg.out_target, variant, cfg.variants);
        let mut src_file = fs::File::create(&src_path).map_err(data_err)?;
        let mut tgt_file = fs::File::create(&tgt_path).map_err(data_err)?;
        for (i, r) in results.iter().enumerate() {
            writeln!(src_file, "{}", r.source_tokens.join(" ")).map_err(data_err)?;
            writeln!(tgt_file, "{}", r.target_tokens.join(" ")).map_err(data_err)?;
            if let Some(reason) = &r.fallback {
                sidecar_entries.push(format!("variant={variant}\tline={}\t{reason}", i + 1));
            }
        }
        out.source_files.push(src_path);
        out.target_files.push(tgt_path);
    }
    out.sidecar_lines = sidecar_entries.len();
    if let Some(sidecar) = &cfg.sidecar {
        fs::write(sidecar, sidecar_entries.join("\n") + "\n").map_err(data_err)?;
    } else if !sidecar_entries.is_empty() {
        eprintln!(
            "warning: {} lines used per-character fallback (no sidecar path configured)",
            sidecar_entries.len()
        );
    }
    Ok(out)
}

/// Scorer-training stage configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainScorerConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_grad_accumulation")]
    pub grad_accumulation: usize,
    #[serde(default = "default_dropout_p")]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ScorerMode,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub workers: usize,
}

fn default_epochs() -> usize {
    5
}
fn default_learning_rate() -> f64 {
    0.5
}
fn default_batch_size() -> usize {
    8
}
fn default_grad_accumulation() -> usize {
    16
}
fn default_mode() -> ScorerMode {
    ScorerMode::Conditional
}
fn default_embedding_dim() -> usize {
    8
}

impl TrainScorerConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 && self.learning_rate <= 0.0 {
            // zero-epoch runs are allowed (checkpoint of the zero init)
        }
        if self.learning_rate <= 0.0 {
            return Err(config_err("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(config_err("batch size and grad accumulation must be >= 1"));
        }
        for (name, path) in [
            ("source", &self.source),
            ("target", &self.target),
            ("vocab", &self.vocab),
            ("merges", &self.merges),
        ] {
            if !path.exists() {
                return Err(config_err(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            grad_accumulation: self.grad_accumulation,
            dropout_p: self.dropout_p,
            seed: self.seed,
            mode: self.mode,
            embedding_dim: self.embedding_dim,
            ..TrainConfig::default()
        }
    }
}

/// Stage 1: trains the scorer on the parallel corpus and writes the
/// checkpoint (flagged with its conditioning mode) plus a training log.
pub fn run_stage_train_scorer(cfg: &TrainScorerConfig) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let vocab = Vocabulary::load(&cfg.vocab).map_err(data_err)?;
    let merges = MergeTable::load(&cfg.merges).map_err(data_err)?;
    let corpus = corpus::read_parallel(&cfg.source, &cfg.target).map_err(data_err)?;
    let tc = cfg.train_config();
    let (params, report) = run_pool(cfg.workers, || trainer::train(&corpus, &vocab, &merges, &tc))?
        .map_err(data_err)?;
    let ckpt = Checkpoint::new(cfg.mode, tc.feature_config.clone(), params);
    ckpt.save(&cfg.checkpoint).map_err(data_err)?;
    if let Some(log_path) = &cfg.train_log {
        fs::write(log_path, report.log_lines(cfg.learning_rate).join("\n") + "\n")
            .map_err(data_err)?;
    }
    Ok(cfg.checkpoint.clone())
}

/// Manifest written next to the emitted training set: enough to reproduce
/// or verify the emission.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub variants: usize,
    pub source_files: Vec<PathBuf>,
    pub target_files: Vec<PathBuf>,
    pub sidecar_lines: usize,
}

fn hash_config(cfg: &SegmentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Stage 3: runs segmentation and writes the final training set plus a
/// manifest. If a manifest from a previous run exists with a different
/// config hash, the emission aborts instead of silently mixing outputs.
pub fn run_stage_emit(cfg: &SegmentConfig, manifest_path: &Path) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let config_hash = hash_config(cfg);
    if manifest_path.exists() {
        let old: Manifest = serde_json::from_str(
            &fs::read_to_string(manifest_path).map_err(data_err)?,
        )
        .map_err(data_err)?;
        if old.config_hash != config_hash {
            return Err(data_err(format!(
                "manifest mismatch: existing {} vs current {} (remove {} to re-emit)",
                old.config_hash,
                config_hash,
                manifest_path.display()
            )));
        }
    }
    let out = run_stage_segment(cfg)?;
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        seed: cfg.seed,
        variants: cfg.variants,
        source_files: out.source_files,
        target_files: out.target_files,
        sidecar_lines: out.sidecar_lines,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(data_err)?;
    fs::write(manifest_path, json).map_err(data_err)?;
    Ok(manifest)
}

/// Checks that every token of every emitted file is a vocabulary entry once
/// the joiner is stripped. Returns the number of out-of-vocabulary tokens.
pub fn vocabulary_coverage(
    files: &[PathBuf],
    vocab: &Vocabulary,
    joiner: &str,
) -> Result<usize, PipelineError> {
    let mut misses = 0;
    for path in files {
        for line in corpus::read_lines(path).map_err(data_err)? {
            for tok in line.split_whitespace() {
                let bare = tok.strip_suffix(joiner).unwrap_or(tok);
                if !vocab.contains(bare) {
                    misses += 1;
                }
            }
        }
    }
    Ok(misses)
}

/// Analysis stage inputs.
#[derive(Debug, Clone)]
pub struct AnalyzeConfig {
    pub segmented_a: PathBuf,
    pub segmented_b: PathBuf,
    pub raw: PathBuf,
    pub joiner: String,
    pub report_tsv: Option<PathBuf>,
    pub bands_csv: Option<PathBuf>,
    pub top: usize,
}

pub fn run_analyze(cfg: &AnalyzeConfig) -> Result<analysis::DisagreementReport, PipelineError> {
    let a = corpus::read_lines(&cfg.segmented_a).map_err(data_err)?;
    let b = corpus::read_lines(&cfg.segmented_b).map_err(data_err)?;
    let raw = corpus::read_lines(&cfg.raw).map_err(data_err)?;
    let report = analysis::compare_segmenters(&a, &b, &raw, &cfg.joiner).map_err(data_err)?;
    if let Some(path) = &cfg.report_tsv {
        fs::write(path, report.to_tsv()).map_err(data_err)?;
    }
    if let Some(path) = &cfg.bands_csv {
        fs::write(path, report.band_csv()).map_err(data_err)?;
    }
    Ok(report)
}

/// Loads a stage config from TOML.
pub fn load_toml_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("bad config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::word_frequencies;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    struct Fixture {
        dir: tempfile::TempDir,
    }

    impl Fixture {
        fn path(&self, name: &str) -> PathBuf {
            self.dir.path().join(name)
        }
    }

    fn fixture() -> Fixture {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let src = "der hund lauft\nder hund schlaft\nder vogel singt\n";
        let tgt = "the dog runs\nthe dog sleeps\nthe bird sings\n";
        write(&f.path("src.txt"), src);
        write(&f.path("tgt.txt"), tgt);
        let lines: Vec<&str> = src.lines().chain(tgt.lines()).collect();
        let freqs = word_frequencies(lines.iter().copied());
        let (merges, vocab) = bpe::train_bpe(&freqs, 40).unwrap();
        merges.save(&f.path("m.merges")).unwrap();
        vocab.save(&f.path("v.vocab")).unwrap();
        f
    }

    fn base_segment_config(f: &Fixture) -> SegmentConfig {
        SegmentConfig {
            source: f.path("src.txt"),
            target: f.path("tgt.txt"),
            vocab: f.path("v.vocab"),
            merges: f.path("m.merges"),
            checkpoint: None,
            out_source: f.path("out.src"),
            out_target: f.path("out.tgt"),
            sidecar: Some(f.path("errors.tsv")),
            source_mode: SourceSegMode::Bpe,
            target_mode: TargetSegMode::Bpe,
            seed: 1,
            joiner: default_joiner(),
            dropout_p: 0.05,
            workers: 0,
            variants: 1,
        }
    }

    #[test]
    fn dpe_mode_requires_checkpoint() {
        let f = fixture();
        let cfg = SegmentConfig {
            target_mode: TargetSegMode::DpeFixed,
            ..base_segment_config(&f)
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn on_the_fly_requires_dropout_source() {
        let f = fixture();
        let cfg = SegmentConfig {
            target_mode: TargetSegMode::DpeOnTheFly,
            checkpoint: Some(f.path("missing.ckpt")),
            source_mode: SourceSegMode::Bpe,
            ..base_segment_config(&f)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_vocab_is_config_error_before_work() {
        let f = fixture();
        let cfg = SegmentConfig {
            vocab: f.path("nope.vocab"),
            ..base_segment_config(&f)
        };
        let err = run_stage_segment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bpe_bpe_baseline_round_trips() {
        let f = fixture();
        let cfg = base_segment_config(&f);
        let out = run_stage_segment(&cfg).unwrap();
        assert_eq!(out.sidecar_lines, 0);
        let seg = fs::read_to_string(&out.target_files[0]).unwrap();
        let raw = fs::read_to_string(f.path("tgt.txt")).unwrap();
        for (seg_line, raw_line) in seg.lines().zip(raw.lines()) {
            assert_eq!(
                crate::segmentation::strip_joiners(seg_line, "@@"),
                normalize_whitespace(raw_line)
            );
        }
    }

    #[test]
    fn segment_is_deterministic() {
        let f = fixture();
        let cfg = SegmentConfig {
            source_mode: SourceSegMode::BpeDropout,
            ..base_segment_config(&f)
        };
        let a = run_stage_segment(&cfg).unwrap();
        let src_a = fs::read(&a.source_files[0]).unwrap();
        let b = run_stage_segment(&cfg).unwrap();
        let src_b = fs::read(&b.source_files[0]).unwrap();
        assert_eq!(src_a, src_b);
    }

    #[test]
    fn train_then_segment_dpe_end_to_end() {
        let f = fixture();
        let train_cfg = TrainScorerConfig {
            source: f.path("src.txt"),
            target: f.path("tgt.txt"),
            vocab: f.path("v.vocab"),
            merges: f.path("m.merges"),
            checkpoint: f.path("scorer.ckpt"),
            train_log: Some(f.path("train.log")),
            epochs: 1,
            learning_rate: 0.2,
            batch_size: 2,
            grad_accumulation: 1,
            dropout_p: 0.05,
            seed: 7,
            mode: ScorerMode::Conditional,
            embedding_dim: 4,
            workers: 1,
        };
        let ckpt_path = run_stage_train_scorer(&train_cfg).unwrap();
        assert!(ckpt_path.exists());
        assert!(f.path("train.log").exists());

        let cfg = SegmentConfig {
            checkpoint: Some(ckpt_path),
            source_mode: SourceSegMode::BpeDropout,
            target_mode: TargetSegMode::DpeOnTheFly,
            variants: 2,
            ..base_segment_config(&f)
        };
        let out = run_stage_segment(&cfg).unwrap();
        assert_eq!(out.source_files.len(), 2);
        let n_lines = fs::read_to_string(&out.target_files[0]).unwrap().lines().count();
        assert_eq!(n_lines, 3);
        let misses =
            vocabulary_coverage(&out.target_files, &Vocabulary::load(&cfg.vocab).unwrap(), "@@")
                .unwrap();
        assert_eq!(misses, 0);
    }

    #[test]
    fn lm_checkpoint_flagged() {
        let f = fixture();
        let train_cfg = TrainScorerConfig {
            source: f.path("src.txt"),
            target: f.path("tgt.txt"),
            vocab: f.path("v.vocab"),
            merges: f.path("m.merges"),
            checkpoint: f.path("lm.ckpt"),
            train_log: None,
            epochs: 0,
            learning_rate: 0.2,
            batch_size: 2,
            grad_accumulation: 1,
            dropout_p: 0.05,
            seed: 7,
            mode: ScorerMode::UnconditionalLm,
            embedding_dim: 4,
            workers: 1,
        };
        run_stage_train_scorer(&train_cfg).unwrap();
        let ckpt = Checkpoint::load(&f.path("lm.ckpt")).unwrap();
        assert_eq!(ckpt.mode, ScorerMode::UnconditionalLm);
    }

    #[test]
    fn emit_manifest_round_trip_and_mismatch() {
        let f = fixture();
        let cfg = base_segment_config(&f);
        let manifest_path = f.path("manifest.json");
        let m1 = run_stage_emit(&cfg, &manifest_path).unwrap();
        let m2 = run_stage_emit(&cfg, &manifest_path).unwrap();
        assert_eq!(m1, m2);

        let cfg2 = SegmentConfig {
            seed: 999,
            ..base_segment_config(&f)
        };
        let err = run_stage_emit(&cfg2, &manifest_path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn unsegmentable_lines_fall_back_and_hit_sidecar() {
        let f = fixture();
        // A target char outside the trained vocab.
        write(&f.path("tgt.txt"), "the dog runs\nthe dog sleeps\nthe bird 'sings\n");
        let cfg = base_segment_config(&f);
        let out = run_stage_segment(&cfg).unwrap();
        assert_eq!(out.sidecar_lines, 1);
        let sidecar = fs::read_to_string(f.path("errors.tsv")).unwrap();
        assert!(sidecar.contains("line=3"));
        let seg = fs::read_to_string(&out.target_files[0]).unwrap();
        assert_eq!(seg.lines().count(), 3);
        assert_eq!(
            crate::segmentation::strip_joiners(seg.lines().nth(2).unwrap(), "@@"),
            "the bird 'sings"
        );
    }

    #[test]
    fn toml_config_loads_with_flag_style_defaults() {
        let f = fixture();
        let toml_text = format!(
            "source = {:?}\ntarget = {:?}\nvocab = {:?}\nmerges = {:?}\nout_source = {:?}\nout_target = {:?}\nsource_mode = \"bpe\"\ntarget_mode = \"bpe\"\n",
            f.path("src.txt"),
            f.path("tgt.txt"),
            f.path("v.vocab"),
            f.path("m.merges"),
            f.path("out.src"),
            f.path("out.tgt"),
        );
        write(&f.path("seg.toml"), &toml_text);
        let cfg: SegmentConfig = load_toml_config(&f.path("seg.toml")).unwrap();
        assert_eq!(cfg.joiner, "@@");
        assert_eq!(cfg.dropout_p, 0.05);
        assert_eq!(cfg.variants, 1);
        cfg.validate().unwrap();
    }
}
