//! Scorer training: stochastic gradient ascent on the exact DP log marginal
//! likelihood of a parallel corpus, with BPE-dropout-randomized source
//! segmentations in conditional mode.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bpe::{self, BpeError, DropoutTrace, MergeTable};
use crate::corpus::SentencePair;
use crate::dp::{self, DpError};
use crate::scorer::{
    source_features, ConditionalScorer, FeatureConfig, ScorerGradient, ScorerMode, ScorerParams,
};
use crate::segmentation::join_word_tokens;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("line {line}: {err}")]
    Unsegmentable { line: usize, err: DpError },
    #[error("non-finite loss at epoch {epoch} (check learning rate and features)")]
    NonFiniteLoss { epoch: usize },
    #[error("line {line}: {err}")]
    SourceEncoding { line: usize, err: BpeError },
    #[error("line {line}: target character {ch:?} missing from the vocabulary")]
    MissingCharClosure { line: usize, ch: char },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of consecutive batch gradients accumulated before one update.
    pub grad_accumulation: usize,
    /// BPE dropout probability for the source side in conditional mode.
    pub dropout_p: f64,
    pub seed: u64,
    pub mode: ScorerMode,
    pub embedding_dim: usize,
    /// Gradient clipping at this global norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub feature_config: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.5,
            batch_size: 8,
            grad_accumulation: 16,
            dropout_p: 0.05,
            seed: 0,
            mode: ScorerMode::Conditional,
            embedding_dim: 8,
            clip_norm: Some(5.0),
            feature_config: FeatureConfig::default(),
        }
    }
}

/// Per-epoch training record: mean negative log marginal in nats per target
/// character.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Line-oriented, machine-parseable log records.
    pub fn log_lines(&self, learning_rate: f64) -> Vec<String> {
        self.epoch_losses
            .iter()
            .enumerate()
            .map(|(i, loss)| {
                format!(
                    "epoch={} loss_nats_per_char={:.6} lr={} wall_secs={:.3}",
                    i + 1,
                    loss,
                    learning_rate,
                    self.wall_time_secs
                )
            })
            .collect()
    }
}

fn mix_seed(seed: u64, epoch: u64, line: u64) -> u64 {
    // splitmix64-style mixing of (seed, epoch, line).
    let mut x = seed
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(line.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic initial parameters: context weights are absent (so every
/// logit is zero and the model is exactly uniform), while the output
/// embeddings get small seeded values. All-zero embeddings would be a saddle
/// point of the factorized softmax — both gradient blocks vanish there — so
/// the embedding init is what lets the first update move.
pub fn init_params(vocab_size: usize, dim: usize, seed: u64) -> ScorerParams {
    use rand::Rng;
    let mut params = ScorerParams::zeros(vocab_size, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1217, 0));
    for e in &mut params.embeddings {
        *e = rng.gen_range(-0.1..0.1);
    }
    params
}

/// Segments a source sentence word by word with BPE dropout (`p = 0` gives
/// deterministic greedy BPE) and returns the plain subword tokens.
pub fn segment_source_tokens(
    sentence: &str,
    merges: &MergeTable,
    vocab: &Vocabulary,
    p: f64,
    seed: u64,
) -> Result<Vec<String>, BpeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    let mut trace = DropoutTrace::default();
    for word in sentence.split_whitespace() {
        let z = bpe::encode_bpe_dropout_with_rng(word, merges, vocab, p, &mut rng, &mut trace)?;
        let cs: Vec<char> = word.chars().collect();
        tokens.extend(join_word_tokens(&cs, &z, ""));
    }
    Ok(tokens)
}

fn target_char_count(target: &str) -> usize {
    target.split_whitespace().map(|w| w.chars().count()).sum()
}

/// Per-sentence loss/gradient work item. The gradient slot is `None` during
/// pure evaluation.
#[allow(clippy::too_many_arguments)]
fn sentence_pass(
    pair: &SentencePair,
    vocab: &Vocabulary,
    params: &ScorerParams,
    cfg: &TrainConfig,
    merges: &MergeTable,
    epoch: u64,
    line: u64,
    with_grad: bool,
) -> Result<(f64, Option<ScorerGradient>), TrainError> {
    let src_feats = match cfg.mode {
        ScorerMode::UnconditionalLm => Vec::new(),
        ScorerMode::Conditional => {
            let tokens = segment_source_tokens(
                &pair.source,
                merges,
                vocab,
                cfg.dropout_p,
                mix_seed(cfg.seed, epoch, line),
            )
            .map_err(|err| TrainError::SourceEncoding {
                line: line as usize + 1,
                err,
            })?;
            source_features(&tokens, &cfg.feature_config)
        }
    };
    let scorer = ConditionalScorer::new(params, &cfg.feature_config, src_feats);
    let chars: Vec<char> = pair.target.chars().collect();
    if with_grad {
        let mut grad = ScorerGradient::default();
        let lp = dp::sentence_marginal_gradient(&chars, &scorer, vocab, &mut grad).map_err(
            |err| TrainError::Unsegmentable {
                line: line as usize + 1,
                err,
            },
        )?;
        Ok((lp, Some(grad)))
    } else {
        let lp = dp::sentence_log_marginal(&chars, &scorer, vocab).map_err(|err| {
            TrainError::Unsegmentable {
                line: line as usize + 1,
                err,
            }
        })?;
        Ok((lp, None))
    }
}

/// Mean negative log marginal in nats per target character, with the source
/// side segmented by deterministic greedy BPE (evaluation never randomizes).
pub fn evaluate(
    corpus: &[SentencePair],
    vocab: &Vocabulary,
    merges: &MergeTable,
    params: &ScorerParams,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let eval_cfg = TrainConfig {
        dropout_p: 0.0,
        ..cfg.clone()
    };
    let results: Vec<Result<(f64, _), TrainError>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, pair)| sentence_pass(pair, vocab, params, &eval_cfg, merges, 0, i as u64, false))
        .collect();
    let mut total_lp = 0.0;
    let mut total_chars = 0usize;
    for (i, r) in results.into_iter().enumerate() {
        let (lp, _) = r?;
        total_lp += lp;
        total_chars += target_char_count(&corpus[i].target);
    }
    Ok(-total_lp / total_chars.max(1) as f64)
}

/// Trains the log-linear scorer by gradient ascent on the summed per-sentence
/// log marginals. Initialization is all-zero (the uniform model), so a
/// zero-epoch run returns the uniform scorer exactly. Fully deterministic
/// given the config seed.
pub fn train(
    corpus: &[SentencePair],
    vocab: &Vocabulary,
    merges: &MergeTable,
    cfg: &TrainConfig,
) -> Result<(ScorerParams, TrainReport), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for (i, pair) in corpus.iter().enumerate() {
        if let Err(crate::vocab::VocabError::MissingCharClosure(ch)) =
            vocab.check_char_closure(&pair.target)
        {
            return Err(TrainError::MissingCharClosure { line: i + 1, ch });
        }
    }

    let start = Instant::now();
    let mut params = init_params(vocab.len(), cfg.embedding_dim, cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let total_chars: usize = corpus.iter().map(|p| target_char_count(&p.target)).sum();

    for epoch in 0..cfg.epochs {
        let mut epoch_lp = 0.0;
        let mut accum = ScorerGradient::default();
        let mut accum_sentences = 0usize;
        let mut batches_in_accum = 0usize;
        let num_batches = corpus.len().div_ceil(cfg.batch_size);

        for b in 0..num_batches {
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(corpus.len());
            // Parallel per-sentence passes, reduced in corpus order so runs
            // are bit-reproducible at any worker count.
            let results: Vec<Result<(f64, Option<ScorerGradient>), TrainError>> = corpus[lo..hi]
                .par_iter()
                .enumerate()
                .map(|(i, pair)| {
                    sentence_pass(
                        pair,
                        vocab,
                        &params,
                        cfg,
                        merges,
                        epoch as u64,
                        (lo + i) as u64,
                        true,
                    )
                })
                .collect();
            for r in results {
                let (lp, grad) = r?;
                epoch_lp += lp;
                accum.add(&grad.unwrap());
                accum_sentences += 1;
            }
            batches_in_accum += 1;

            if batches_in_accum == cfg.grad_accumulation || b + 1 == num_batches {
                let mut update = std::mem::take(&mut accum);
                update.scale(1.0 / accum_sentences.max(1) as f64);
                if let Some(max_norm) = cfg.clip_norm {
                    let norm = update.global_norm();
                    if norm > max_norm {
                        update.scale(max_norm / norm);
                    }
                }
                params.add_scaled(&update, cfg.learning_rate);
                if !params.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch: epoch + 1 });
                }
                accum_sentences = 0;
                batches_in_accum = 0;
            }
        }

        let loss = -epoch_lp / total_chars.max(1) as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: epoch + 1 });
        }
        epoch_losses.push(loss);
    }

    let report = TrainReport {
        epoch_losses,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn toy_setup() -> (Vec<SentencePair>, Vocabulary, MergeTable) {
        let stems = ["walk", "jump", "talk", "lick", "kick", "pack"];
        let mut pairs = Vec::new();
        for (i, stem) in stems.iter().cycle().take(60).enumerate() {
            let suffix = if i % 2 == 0 { "s" } else { "ed" };
            pairs.push(SentencePair {
                source: format!("src{}", i % 3),
                target: format!("{stem}{suffix}"),
            });
        }
        let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
        for p in &pairs {
            for w in p.source.split_whitespace().chain(p.target.split_whitespace()) {
                *freqs.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        let (merges, vocab) = bpe::train_bpe(&freqs, 60).unwrap();
        (pairs, vocab, merges)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (pairs, vocab, merges) = toy_setup();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (params, report) = train(&pairs, &vocab, &merges, &cfg).unwrap();
        assert_eq!(params, init_params(vocab.len(), cfg.embedding_dim, cfg.seed));
        assert!(params.context_weights.is_empty());
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_reduces_loss() {
        let (pairs, vocab, merges) = toy_setup();
        let cfg = TrainConfig {
            epochs: 3,
            grad_accumulation: 1,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let baseline = evaluate(
            &pairs,
            &vocab,
            &merges,
            &ScorerParams::zeros(vocab.len(), cfg.embedding_dim),
            &cfg,
        )
        .unwrap();
        let (params, report) = train(&pairs, &vocab, &merges, &cfg).unwrap();
        let trained = evaluate(&pairs, &vocab, &merges, &params, &cfg).unwrap();
        assert!(
            trained < baseline,
            "trained {trained} not below baseline {baseline}"
        );
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn identical_seeds_give_identical_params() {
        let (pairs, vocab, merges) = toy_setup();
        let cfg = TrainConfig {
            epochs: 2,
            grad_accumulation: 1,
            seed: 99,
            ..TrainConfig::default()
        };
        let (a, _) = train(&pairs, &vocab, &merges, &cfg).unwrap();
        let (b, _) = train(&pairs, &vocab, &merges, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lm_mode_ignores_source() {
        let (mut pairs, vocab, merges) = toy_setup();
        let cfg = TrainConfig {
            epochs: 1,
            grad_accumulation: 1,
            mode: ScorerMode::UnconditionalLm,
            ..TrainConfig::default()
        };
        let (a, _) = train(&pairs, &vocab, &merges, &cfg).unwrap();
        for p in &mut pairs {
            p.source = "zzz".to_string(); // not even segmentable by the vocab
        }
        let (b, _) = train(&pairs, &vocab, &merges, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        let (_, vocab, merges) = toy_setup();
        assert!(matches!(
            train(&[], &vocab, &merges, &TrainConfig::default()),
            Err(TrainError::EmptyCorpus)
        ));
    }

    #[test]
    fn unsegmentable_target_reported_with_line() {
        let (mut pairs, vocab, merges) = toy_setup();
        pairs[4].target = "walkZ".to_string();
        let err = train(&pairs, &vocab, &merges, &TrainConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            TrainError::MissingCharClosure { line: 5, ch: 'Z' }
        ));
    }

    #[test]
    fn batch_loss_equals_sum_of_independent_sentence_marginals() {
        let (pairs, vocab, merges) = toy_setup();
        let cfg = TrainConfig::default();
        let params = ScorerParams::zeros(vocab.len(), cfg.embedding_dim);
        let loss = evaluate(&pairs, &vocab, &merges, &params, &cfg).unwrap();
        let mut total = 0.0;
        let mut chars = 0usize;
        for pair in &pairs {
            let scorer = ConditionalScorer::unconditional(&params, &cfg.feature_config);
            let cs: Vec<char> = pair.target.chars().collect();
            total += dp::sentence_log_marginal(&cs, &scorer, &vocab).unwrap();
            chars += target_char_count(&pair.target);
        }
        // Zero params ignore source features, so unconditional == conditional here.
        assert!((loss - (-total / chars as f64)).abs() < 1e-12);
    }
}
