//! Subword scorers: the probability model `p(w | y_1..y_t, x)`.
//!
//! The conditioning context is always the raw character prefix of the target
//! sentence (never its segmentation) plus optional features of the segmented
//! source sentence. That segmentation-invariance is what licenses exact
//! dynamic programming over the lattice: two prefixes that are equal as
//! character strings must get identical rows.
//!
//! Three implementations are provided: uniform, unigram, and a trainable
//! log-linear scorer over hashed character n-gram and source bag-of-subword
//! features, with a full-vocabulary softmax output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logmath::{log_softmax_in_place, logsumexp};

/// Default hash seed, fixed so feature indices are stable across runs and
/// machines.
pub const DEFAULT_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// Featurization hyperparameters shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Number of trailing prefix characters visible to the scorer.
    pub context_window: usize,
    /// Feature indices live in `0..2^hash_bits`.
    pub hash_bits: u32,
    pub hash_seed: u64,
    /// Character n-gram orders 1..=max_ngram are extracted from the window.
    pub max_ngram: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            context_window: 8,
            hash_bits: 18,
            hash_seed: DEFAULT_HASH_SEED,
            max_ngram: 4,
        }
    }
}

impl FeatureConfig {
    pub fn hash_dim(&self) -> u32 {
        1u32 << self.hash_bits
    }

    fn bucket(&self, tag: u8, payload: &[u8]) -> u32 {
        // FNV-1a over (seed, tag, payload), folded into the hash dimension.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.hash_seed;
        for &b in std::iter::once(&tag).chain(payload) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.hash_dim() as u64) as u32
    }
}

/// A sparse feature vector identifying a conditioning context. Identity
/// depends only on the prefix characters and the source features, never on
/// how the prefix was segmented.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerContext {
    /// Sorted by feature index, values accumulated over repeats.
    pub features: Vec<(u32, f64)>,
}

fn sum_by_index(mut raw: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    raw.sort_unstable_by_key(|&(i, _)| i);
    let mut out: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
    for (i, v) in raw {
        match out.last_mut() {
            Some((j, acc)) if *j == i => *acc += v,
            _ => out.push((i, v)),
        }
    }
    out
}

/// Hashed bag-of-subwords features of a segmented source sentence.
pub fn source_features(tokens: &[String], cfg: &FeatureConfig) -> Vec<(u32, f64)> {
    sum_by_index(
        tokens
            .iter()
            .map(|t| (cfg.bucket(b'S', t.as_bytes()), 1.0))
            .collect(),
    )
}

/// Builds the scorer context for a character prefix: a bias feature, hashed
/// character n-grams of the last `context_window` characters, and the given
/// source features (empty in unconditional/LM mode).
pub fn featurize_context(
    target_prefix: &[char],
    source_feats: &[(u32, f64)],
    cfg: &FeatureConfig,
) -> ScorerContext {
    let mut raw: Vec<(u32, f64)> = vec![(cfg.bucket(b'B', b""), 1.0)];
    let start = target_prefix.len().saturating_sub(cfg.context_window);
    let window = &target_prefix[start..];
    let mut buf = String::new();
    for n in 1..=cfg.max_ngram {
        for gram in window.windows(n) {
            buf.clear();
            buf.extend(gram.iter());
            raw.push((cfg.bucket(b'T', buf.as_bytes()), 1.0));
        }
    }
    raw.extend_from_slice(source_feats);
    ScorerContext {
        features: sum_by_index(raw),
    }
}

/// Trainable weights of the log-linear scorer: a dense `|V| x d` output
/// embedding matrix and sparse per-feature context weight rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub dim: usize,
    pub vocab_size: usize,
    /// Row-major `vocab_size * dim`.
    pub embeddings: Vec<f64>,
    /// Feature index -> length-`dim` weight row. BTreeMap keeps
    /// serialization order deterministic.
    pub context_weights: BTreeMap<u32, Vec<f64>>,
}

impl ScorerParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        assert!(dim >= 1);
        ScorerParams {
            dim,
            vocab_size,
            embeddings: vec![0.0; vocab_size * dim],
            context_weights: BTreeMap::new(),
        }
    }

    pub fn embedding(&self, w: u32) -> &[f64] {
        let d = self.dim;
        &self.embeddings[w as usize * d..(w as usize + 1) * d]
    }

    /// The context vector `f = Σ_a φ_a W_a`.
    pub fn context_vector(&self, ctx: &ScorerContext) -> Vec<f64> {
        let mut f = vec![0.0; self.dim];
        for &(a, phi) in &ctx.features {
            if let Some(row) = self.context_weights.get(&a) {
                for (fi, wi) in f.iter_mut().zip(row) {
                    *fi += phi * wi;
                }
            }
        }
        f
    }

    /// Log-probability row over the full vocabulary for a context.
    pub fn full_row(&self, ctx: &ScorerContext) -> Vec<f64> {
        let f = self.context_vector(ctx);
        let mut logits: Vec<f64> = (0..self.vocab_size as u32)
            .map(|w| dot(&f, self.embedding(w)))
            .collect();
        log_softmax_in_place(&mut logits);
        logits
    }

    pub fn add_scaled(&mut self, grad: &ScorerGradient, scale: f64) {
        for (p, g) in self.embeddings.iter_mut().zip(&grad.embeddings) {
            *p += scale * g;
        }
        for (&a, row) in &grad.context_weights {
            let dst = self
                .context_weights
                .entry(a)
                .or_insert_with(|| vec![0.0; self.dim]);
            for (p, g) in dst.iter_mut().zip(row) {
                *p += scale * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.iter().all(|x| x.is_finite())
            && self
                .context_weights
                .values()
                .flatten()
                .all(|x| x.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse gradient with the same shape as [`ScorerParams`]. Empty for
/// parameterless scorers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScorerGradient {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub context_weights: BTreeMap<u32, Vec<f64>>,
}

impl ScorerGradient {
    pub fn zeros_like(params: &ScorerParams) -> Self {
        ScorerGradient {
            dim: params.dim,
            embeddings: vec![0.0; params.embeddings.len()],
            context_weights: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty() && self.context_weights.is_empty()
    }

    pub fn add(&mut self, other: &ScorerGradient) {
        if other.is_empty() {
            return;
        }
        if self.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.embeddings.iter_mut().zip(&other.embeddings) {
            *a += b;
        }
        for (&k, row) in &other.context_weights {
            let dst = self
                .context_weights
                .entry(k)
                .or_insert_with(|| vec![0.0; self.dim]);
            for (a, b) in dst.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.embeddings {
            *x *= s;
        }
        for row in self.context_weights.values_mut() {
            for x in row {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self.embeddings.iter().map(|x| x * x).sum::<f64>()
            + self
                .context_weights
                .values()
                .flatten()
                .map(|x| x * x)
                .sum::<f64>();
        sq.sqrt()
    }
}

/// `log p(w | ctx)` under the log-linear model.
pub fn log_prob(params: &ScorerParams, ctx: &ScorerContext, w: u32) -> f64 {
    params.full_row(ctx)[w as usize]
}

/// Exact gradient of `log p(w | ctx)` with respect to the parameters.
pub fn log_prob_grad(params: &ScorerParams, ctx: &ScorerContext, w: u32) -> ScorerGradient {
    let mut grad = ScorerGradient::zeros_like(params);
    accumulate_weighted_log_prob_grad(params, ctx, &[(w, 1.0)], &mut grad);
    grad
}

/// Adds `Σ_w q_w ∇ log p(w | ctx)` into `grad`. The dense part costs one
/// `O(|V| d)` pass per call, the same as computing the row itself.
pub fn accumulate_weighted_log_prob_grad(
    params: &ScorerParams,
    ctx: &ScorerContext,
    weighted: &[(u32, f64)],
    grad: &mut ScorerGradient,
) {
    let d = params.dim;
    if grad.embeddings.is_empty() {
        grad.dim = d;
        grad.embeddings = vec![0.0; params.embeddings.len()];
    }
    assert_eq!(grad.embeddings.len(), params.embeddings.len());
    let f = params.context_vector(ctx);
    let probs: Vec<f64> = params.full_row(ctx).iter().map(|lp| lp.exp()).collect();
    let total_q: f64 = weighted.iter().map(|&(_, q)| q).sum();

    // d log p(w)/d e(w') = f (1[w'=w] - p(w'))
    for (w_prime, &p) in probs.iter().enumerate() {
        let coeff = -total_q * p;
        let row = &mut grad.embeddings[w_prime * d..(w_prime + 1) * d];
        for (g, fi) in row.iter_mut().zip(&f) {
            *g += coeff * fi;
        }
    }
    for &(w, q) in weighted {
        let row = &mut grad.embeddings[w as usize * d..(w as usize + 1) * d];
        for (g, fi) in row.iter_mut().zip(&f) {
            *g += q * fi;
        }
    }

    // d log p(w)/d W_a = φ_a (e(w) - E_p[e])
    let mut expected_e = vec![0.0; d];
    for (w_prime, &p) in probs.iter().enumerate() {
        for (acc, &ei) in expected_e.iter_mut().zip(params.embedding(w_prime as u32)) {
            *acc += p * ei;
        }
    }
    let mut weighted_e = vec![0.0; d];
    for &(w, q) in weighted {
        for (acc, &ei) in weighted_e.iter_mut().zip(params.embedding(w)) {
            *acc += q * ei;
        }
    }
    for &(a, phi) in &ctx.features {
        let dst = grad
            .context_weights
            .entry(a)
            .or_insert_with(|| vec![0.0; d]);
        for i in 0..d {
            dst[i] += phi * (weighted_e[i] - total_q * expected_e[i]);
        }
    }
}

/// The scorer contract used by the dynamic programs. `log_prob_row` must be
/// a pure function of the prefix characters (within `cache_window`) and the
/// scorer's own fixed state.
pub trait SubwordScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probability row over the full vocabulary given the character
    /// prefix `y_1..y_t` of the sentence.
    fn log_prob_row(&self, prefix: &[char]) -> Vec<f64>;

    /// How many trailing prefix characters the row depends on. Rows for
    /// prefixes sharing that suffix are identical and may be cached.
    fn cache_window(&self) -> usize {
        0
    }

    /// Adds `Σ q_w ∇_θ log p(w | prefix)` into `grad`. Parameterless
    /// scorers leave `grad` untouched.
    fn accumulate_weighted_grad(
        &self,
        _prefix: &[char],
        _weighted: &[(u32, f64)],
        _grad: &mut ScorerGradient,
    ) {
    }

    fn has_parameters(&self) -> bool {
        false
    }
}

/// Uniform distribution over the vocabulary, independent of context.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    vocab_size: usize,
}

impl UniformScorer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0);
        UniformScorer { vocab_size }
    }
}

impl SubwordScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_prob_row(&self, _prefix: &[char]) -> Vec<f64> {
        vec![-(self.vocab_size as f64).ln(); self.vocab_size]
    }
}

/// Context-independent unigram distribution from subword counts.
#[derive(Debug, Clone)]
pub struct UnigramScorer {
    log_probs: Vec<f64>,
}

impl UnigramScorer {
    /// `p_w ∝ count_w + smoothing`. With zero smoothing, zero-count entries
    /// get probability zero (`-inf` in log space).
    pub fn from_counts(counts: &[u64], smoothing: f64) -> Self {
        let total: f64 = counts.iter().map(|&c| c as f64 + smoothing).sum();
        let log_probs = counts
            .iter()
            .map(|&c| ((c as f64 + smoothing) / total).ln())
            .collect();
        UnigramScorer { log_probs }
    }

    pub fn from_log_probs(log_probs: Vec<f64>) -> Self {
        debug_assert!(logsumexp(&log_probs).abs() < 1e-9);
        UnigramScorer { log_probs }
    }
}

impl SubwordScorer for UnigramScorer {
    fn vocab_size(&self) -> usize {
        self.log_probs.len()
    }

    fn log_prob_row(&self, _prefix: &[char]) -> Vec<f64> {
        self.log_probs.clone()
    }
}

/// The log-linear scorer bound to one sentence's source features. In
/// unconditional/LM mode the source features are empty.
#[derive(Debug, Clone)]
pub struct ConditionalScorer<'a> {
    params: &'a ScorerParams,
    config: &'a FeatureConfig,
    source_feats: Vec<(u32, f64)>,
}

impl<'a> ConditionalScorer<'a> {
    pub fn new(
        params: &'a ScorerParams,
        config: &'a FeatureConfig,
        source_feats: Vec<(u32, f64)>,
    ) -> Self {
        ConditionalScorer {
            params,
            config,
            source_feats,
        }
    }

    pub fn unconditional(params: &'a ScorerParams, config: &'a FeatureConfig) -> Self {
        Self::new(params, config, Vec::new())
    }

    fn context(&self, prefix: &[char]) -> ScorerContext {
        featurize_context(prefix, &self.source_feats, self.config)
    }
}

impl SubwordScorer for ConditionalScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    fn log_prob_row(&self, prefix: &[char]) -> Vec<f64> {
        self.params.full_row(&self.context(prefix))
    }

    fn cache_window(&self) -> usize {
        self.config.context_window
    }

    fn accumulate_weighted_grad(
        &self,
        prefix: &[char],
        weighted: &[(u32, f64)],
        grad: &mut ScorerGradient,
    ) {
        accumulate_weighted_log_prob_grad(self.params, &self.context(prefix), weighted, grad);
    }

    fn has_parameters(&self) -> bool {
        true
    }
}

/// Whether a checkpoint was trained conditioned on the source or as a pure
/// target-side language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerMode {
    Conditional,
    UnconditionalLm,
}

/// Versioned scorer checkpoint. Serialized as JSON; f64 values round-trip
/// bit-exactly and the map ordering is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: ScorerMode,
    pub feature_config: FeatureConfig,
    pub params: ScorerParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(mode: ScorerMode, feature_config: FeatureConfig, params: ScorerParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode,
            feature_config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn random_params(vocab_size: usize, dim: usize, feats: &[u32], seed: u64) -> ScorerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ScorerParams::zeros(vocab_size, dim);
        for x in &mut p.embeddings {
            *x = rng.gen_range(-1.0..1.0);
        }
        for &a in feats {
            p.context_weights
                .insert(a, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        p
    }

    #[test]
    fn uniform_row() {
        let s = UniformScorer::new(5);
        let row = s.log_prob_row(&chars("xy"));
        for lp in &row {
            assert!((lp - (1.0f64 / 5.0).ln()).abs() < 1e-12);
        }
        assert!(logsumexp(&row).abs() < 1e-9);
    }

    #[test]
    fn unigram_counts() {
        let s = UnigramScorer::from_counts(&[3, 1], 0.0);
        let row = s.log_prob_row(&[]);
        assert!((row[0] - 0.75f64.ln()).abs() < 1e-12);
        assert!((row[1] - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_params_is_uniform() {
        let cfg = FeatureConfig::default();
        let params = ScorerParams::zeros(7, 4);
        let scorer = ConditionalScorer::unconditional(&params, &cfg);
        let row = scorer.log_prob_row(&chars("abc"));
        for lp in row {
            assert_eq!(lp, -(7.0f64).ln());
        }
    }

    #[test]
    fn rows_are_normalized() {
        let cfg = FeatureConfig::default();
        let ctx = featurize_context(&chars("unco"), &[], &cfg);
        let feats: Vec<u32> = ctx.features.iter().map(|&(a, _)| a).collect();
        let params = random_params(6, 4, &feats, 11);
        let scorer = ConditionalScorer::unconditional(&params, &cfg);
        let row = scorer.log_prob_row(&chars("unco"));
        assert!(logsumexp(&row).abs() < 1e-9);
    }

    #[test]
    fn empty_context_is_only_bias() {
        let cfg = FeatureConfig::default();
        let ctx = featurize_context(&[], &[], &cfg);
        assert_eq!(ctx.features.len(), 1);
        assert_eq!(ctx.features[0].1, 1.0);
    }

    #[test]
    fn featurization_ngram_reference_check() {
        // Independent reference: enumerate the n-grams of the window by hand
        // and hash them the same way.
        let cfg = FeatureConfig::default();
        let ctx = featurize_context(&chars("unco"), &[], &cfg);
        let mut expected: Vec<(u32, f64)> = vec![(cfg.bucket(b'B', b""), 1.0)];
        for gram in [
            "u", "n", "c", "o", "un", "nc", "co", "unc", "nco", "unco",
        ] {
            expected.push((cfg.bucket(b'T', gram.as_bytes()), 1.0));
        }
        expected = sum_by_index(expected);
        assert_eq!(ctx.features, expected);
    }

    #[test]
    fn window_limits_context() {
        let cfg = FeatureConfig::default();
        let a = featurize_context(&chars("xxxxxxxxabcdefgh"), &[], &cfg);
        let b = featurize_context(&chars("yyabcdefgh"), &[], &cfg);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn source_features_are_order_independent() {
        let cfg = FeatureConfig::default();
        let a = source_features(&["x".into(), "yz".into()], &cfg);
        let b = source_features(&["yz".into(), "x".into()], &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn grad_rows_sum_to_zero_over_vocab() {
        let cfg = FeatureConfig::default();
        let ctx = featurize_context(&chars("ab"), &[], &cfg);
        let params = {
            let feats: Vec<u32> = ctx.features.iter().map(|&(a, _)| a).collect();
            random_params(5, 3, &feats, 3)
        };
        let grad = log_prob_grad(&params, &ctx, 2);
        let d = params.dim;
        for i in 0..d {
            let col_sum: f64 = (0..params.vocab_size)
                .map(|w| grad.embeddings[w * d + i])
                .sum();
            assert!(col_sum.abs() < 1e-9);
        }
    }

    #[test]
    fn log_prob_grad_matches_finite_differences() {
        let cfg = FeatureConfig::default();
        let ctx = featurize_context(&chars("abcd"), &[], &cfg);
        let feats: Vec<u32> = ctx.features.iter().map(|&(a, _)| a).collect();
        let mut params = random_params(6, 4, &feats, 17);
        let w = 4u32;
        let grad = log_prob_grad(&params, &ctx, w);
        let h = 1e-4;

        for idx in 0..params.embeddings.len() {
            let orig = params.embeddings[idx];
            params.embeddings[idx] = orig + h;
            let up = log_prob(&params, &ctx, w);
            params.embeddings[idx] = orig - h;
            let down = log_prob(&params, &ctx, w);
            params.embeddings[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grad.embeddings[idx];
            assert!(
                (fd - g).abs() <= 1e-5 * fd.abs().max(g.abs()).max(1.0),
                "embedding {idx}: fd {fd} vs analytic {g}"
            );
        }
        for &a in &feats {
            for i in 0..params.dim {
                let orig = params.context_weights[&a][i];
                params.context_weights.get_mut(&a).unwrap()[i] = orig + h;
                let up = log_prob(&params, &ctx, w);
                params.context_weights.get_mut(&a).unwrap()[i] = orig - h;
                let down = log_prob(&params, &ctx, w);
                params.context_weights.get_mut(&a).unwrap()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grad.context_weights[&a][i];
                assert!(
                    (fd - g).abs() <= 1e-5 * fd.abs().max(g.abs()).max(1.0),
                    "W[{a}][{i}]: fd {fd} vs analytic {g}"
                );
            }
        }
    }

    #[test]
    fn uniform_scorer_has_no_gradient() {
        let s = UniformScorer::new(4);
        let mut grad = ScorerGradient::default();
        s.accumulate_weighted_grad(&chars("ab"), &[(1, 1.0)], &mut grad);
        assert!(grad.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.ckpt");
        let cfg = FeatureConfig::default();
        let params = random_params(5, 3, &[7, 99, 12345], 23);
        let ckpt = Checkpoint::new(ScorerMode::Conditional, cfg, params);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let path2 = dir.path().join("scorer2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
