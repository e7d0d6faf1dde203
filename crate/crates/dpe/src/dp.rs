//! The two dynamic programs over the segmentation lattice: exact
//! marginalization of all segmentations (forward log-sum-exp) and
//! maximum-posterior segmentation (Viterbi with backtrace), plus the
//! forward-backward pass that yields edge posteriors and the exact gradient
//! of the log marginal likelihood.
//!
//! All arithmetic stays in the log domain. Everything here is pure per
//! sentence; corpus-level maps are embarrassingly parallel.

use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use thiserror::Error;

use crate::lattice::build_lattice;
use crate::logmath::logaddexp;
use crate::scorer::{ScorerGradient, SubwordScorer};
use crate::segmentation::{join_word_tokens, Segmentation};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("no valid segmentation reaches character position {position}")]
    Unsegmentable { position: usize },
}

/// Memo for scorer rows keyed by the trailing `cache_window` characters of
/// the prefix. Purely an evaluation-count optimization; results are
/// identical with or without it.
pub struct RowCache<'s, S: SubwordScorer + ?Sized> {
    scorer: &'s S,
    window: usize,
    rows: HashMap<Vec<char>, Rc<Vec<f64>>>,
}

impl<'s, S: SubwordScorer + ?Sized> RowCache<'s, S> {
    pub fn new(scorer: &'s S) -> Self {
        RowCache {
            scorer,
            window: scorer.cache_window(),
            rows: HashMap::new(),
        }
    }

    pub fn row(&mut self, prefix: &[char]) -> Rc<Vec<f64>> {
        let start = prefix.len().saturating_sub(self.window);
        let key = &prefix[start..];
        if let Some(row) = self.rows.get(key) {
            return row.clone();
        }
        let row = Rc::new(self.scorer.log_prob_row(prefix));
        self.rows.insert(key.to_vec(), row.clone());
        row
    }

    pub fn evaluations(&self) -> usize {
        self.rows.len()
    }
}

/// One scored lattice edge of a DP run, with its log-probability under the
/// scorer given the absolute sentence prefix ending at `start`.
#[derive(Debug, Clone, Copy)]
struct ScoredEdge {
    start: usize, // relative to the span
    subword: u32,
    log_prob: f64,
}

/// Lattice of `chars[span]` with every edge scored once. `start`/`end` of
/// edges are span-relative; scorer prefixes are absolute so that context can
/// reach back into preceding words of the sentence.
struct ScoredLattice {
    len: usize,
    edges_by_end: Vec<Vec<ScoredEdge>>,
}

impl ScoredLattice {
    fn build<S: SubwordScorer + ?Sized>(
        chars: &[char],
        span: Range<usize>,
        vocab: &Vocabulary,
        cache: &mut RowCache<'_, S>,
    ) -> Self {
        let lattice = build_lattice(&chars[span.clone()], vocab);
        let len = lattice.len();
        let mut edges_by_end: Vec<Vec<ScoredEdge>> = Vec::with_capacity(len + 1);
        edges_by_end.push(Vec::new());
        for k in 1..=len {
            let edges = lattice
                .edges_into(k)
                .iter()
                .map(|e| {
                    let row = cache.row(&chars[..span.start + e.start]);
                    ScoredEdge {
                        start: e.start,
                        subword: e.subword,
                        log_prob: row[e.subword as usize],
                    }
                })
                .collect();
            edges_by_end.push(edges);
        }
        ScoredLattice { len, edges_by_end }
    }

    /// Forward log-sum-exp table; `alpha[k]` is the log marginal of the
    /// length-`k` prefix. `-inf` marks unreachable positions.
    fn forward(&self) -> Vec<f64> {
        let mut alpha = vec![f64::NEG_INFINITY; self.len + 1];
        alpha[0] = 0.0;
        for k in 1..=self.len {
            let mut acc = f64::NEG_INFINITY;
            for e in &self.edges_by_end[k] {
                acc = logaddexp(acc, alpha[e.start] + e.log_prob);
            }
            alpha[k] = acc;
        }
        alpha
    }

    /// Backward table; `beta[j]` is the log marginal of all completions of
    /// position `j` to the end of the span.
    fn backward(&self) -> Vec<f64> {
        let mut beta = vec![f64::NEG_INFINITY; self.len + 1];
        beta[self.len] = 0.0;
        for k in (1..=self.len).rev() {
            if beta[k] == f64::NEG_INFINITY {
                continue;
            }
            for e in &self.edges_by_end[k] {
                beta[e.start] = logaddexp(beta[e.start], e.log_prob + beta[k]);
            }
        }
        beta
    }

    /// Structurally reachable end position check, independent of scores.
    fn reachable_end(&self) -> Result<(), DpError> {
        let mut reach = vec![false; self.len + 1];
        reach[0] = true;
        for k in 1..=self.len {
            reach[k] = self.edges_by_end[k].iter().any(|e| reach[e.start]);
        }
        match reach.iter().rposition(|&r| r) {
            Some(p) if p == self.len => Ok(()),
            p => Err(DpError::Unsegmentable {
                position: p.map_or(0, |x| x + 1),
            }),
        }
    }
}

/// Log marginal probability of `chars[span]` given the sentence prefix:
/// `log Σ_{z} Π_i p(span_i | prefix)`, by the forward recurrence.
pub fn log_marginal_span<S: SubwordScorer + ?Sized>(
    chars: &[char],
    span: Range<usize>,
    vocab: &Vocabulary,
    cache: &mut RowCache<'_, S>,
) -> Result<f64, DpError> {
    let lat = ScoredLattice::build(chars, span, vocab, cache);
    lat.reachable_end()?;
    Ok(lat.forward()[lat.len])
}

/// `log p(y)` marginalized over every segmentation of `y`.
pub fn log_marginal<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
) -> Result<f64, DpError> {
    let mut cache = RowCache::new(scorer);
    log_marginal_span(chars, 0..chars.len(), vocab, &mut cache)
}

/// Viterbi over `chars[span]`: the segmentation (span-relative boundaries)
/// maximizing `log p(y, z)`, with its score. Ties between predecessors break
/// toward the smallest start index.
pub fn viterbi_span<S: SubwordScorer + ?Sized>(
    chars: &[char],
    span: Range<usize>,
    vocab: &Vocabulary,
    cache: &mut RowCache<'_, S>,
) -> Result<(Segmentation, f64), DpError> {
    let lat = ScoredLattice::build(chars, span, vocab, cache);
    lat.reachable_end()?;
    let mut best = vec![f64::NEG_INFINITY; lat.len + 1];
    let mut back: Vec<usize> = vec![usize::MAX; lat.len + 1];
    best[0] = 0.0;
    for k in 1..=lat.len {
        // Edges are ordered by ascending start; strict improvement keeps
        // the smallest start on ties.
        for e in &lat.edges_by_end[k] {
            if best[e.start] == f64::NEG_INFINITY {
                continue;
            }
            let score = best[e.start] + e.log_prob;
            if score > best[k] {
                best[k] = score;
                back[k] = e.start;
            }
        }
    }
    let mut boundaries = vec![lat.len];
    let mut pos = lat.len;
    while pos != 0 {
        pos = back[pos];
        boundaries.push(pos);
    }
    boundaries.reverse();
    Ok((Segmentation::new(boundaries), best[lat.len]))
}

/// Maximum-posterior segmentation of `chars` with its joint score.
/// `score <= log_marginal(chars)` always.
pub fn viterbi_segment<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
) -> Result<(Segmentation, f64), DpError> {
    let mut cache = RowCache::new(scorer);
    viterbi_span(chars, 0..chars.len(), vocab, &mut cache)
}

/// Posterior probability that the subword edge `(start, end)` is used by a
/// segmentation drawn from the posterior over `Z_y`.
#[derive(Debug, Clone, Copy)]
pub struct EdgePosterior {
    pub start: usize,
    pub end: usize,
    pub subword: u32,
    pub posterior: f64,
}

fn posteriors_of(lat: &ScoredLattice) -> Result<Vec<EdgePosterior>, DpError> {
    lat.reachable_end()?;
    let alpha = lat.forward();
    let beta = lat.backward();
    let log_z = alpha[lat.len];
    let mut out = Vec::new();
    for (k, edges) in lat.edges_by_end.iter().enumerate().skip(1) {
        for e in edges {
            let lp = alpha[e.start] + e.log_prob + beta[k] - log_z;
            out.push(EdgePosterior {
                start: e.start,
                end: k,
                subword: e.subword,
                posterior: lp.exp(),
            });
        }
    }
    Ok(out)
}

/// Forward-backward edge posteriors `P(edge used | y)` for every lattice
/// edge of `chars`.
pub fn edge_posteriors<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
) -> Result<Vec<EdgePosterior>, DpError> {
    let mut cache = RowCache::new(scorer);
    let lat = ScoredLattice::build(chars, 0..chars.len(), vocab, &mut cache);
    posteriors_of(&lat)
}

/// Gradient of `log p(y[span])` as the posterior-weighted sum of per-edge
/// score gradients, accumulated into `grad`. Returns the span's log
/// marginal. Parameterless scorers contribute nothing to `grad`.
pub fn marginal_gradient_span<S: SubwordScorer + ?Sized>(
    chars: &[char],
    span: Range<usize>,
    vocab: &Vocabulary,
    cache: &mut RowCache<'_, S>,
    grad: &mut ScorerGradient,
) -> Result<f64, DpError> {
    let lat = ScoredLattice::build(chars, span.clone(), vocab, cache);
    let posts = posteriors_of(&lat)?;
    if cache.scorer.has_parameters() {
        // Group edges by start so each context is featurized once.
        let mut by_start: HashMap<usize, Vec<(u32, f64)>> = HashMap::new();
        for p in &posts {
            by_start
                .entry(p.start)
                .or_default()
                .push((p.subword, p.posterior));
        }
        let mut starts: Vec<usize> = by_start.keys().copied().collect();
        starts.sort_unstable();
        for j in starts {
            let weighted = &by_start[&j];
            cache
                .scorer
                .accumulate_weighted_grad(&chars[..span.start + j], weighted, grad);
        }
    }
    Ok(lat.forward()[lat.len])
}

/// `∇_θ log p(y)` for a whole string, together with its log marginal.
pub fn marginal_gradient<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
) -> Result<(f64, ScorerGradient), DpError> {
    let mut cache = RowCache::new(scorer);
    let mut grad = ScorerGradient::default();
    let lp = marginal_gradient_span(chars, 0..chars.len(), vocab, &mut cache, &mut grad)?;
    Ok((lp, grad))
}

/// Character index ranges of the whitespace-delimited words of a sentence.
pub fn word_spans(chars: &[char]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in chars.iter().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..chars.len());
    }
    spans
}

/// Log marginal of a sentence: the sum of per-word marginals, each word's
/// lattice confined within the word but conditioned on the full character
/// prefix of the sentence.
pub fn sentence_log_marginal<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
) -> Result<f64, DpError> {
    let mut cache = RowCache::new(scorer);
    let mut total = 0.0;
    for span in word_spans(chars) {
        total += log_marginal_span(chars, span, vocab, &mut cache)?;
    }
    Ok(total)
}

/// Sentence-level gradient of the summed per-word log marginals.
pub fn sentence_marginal_gradient<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
    grad: &mut ScorerGradient,
) -> Result<f64, DpError> {
    let mut cache = RowCache::new(scorer);
    let mut total = 0.0;
    for span in word_spans(chars) {
        total += marginal_gradient_span(chars, span, vocab, &mut cache, grad)?;
    }
    Ok(total)
}

/// Viterbi-segments every word of a sentence and serializes the result as
/// joiner-marked tokens.
pub fn sentence_viterbi_tokens<S: SubwordScorer + ?Sized>(
    chars: &[char],
    scorer: &S,
    vocab: &Vocabulary,
    joiner: &str,
) -> Result<Vec<String>, DpError> {
    let mut cache = RowCache::new(scorer);
    let mut tokens = Vec::new();
    for span in word_spans(chars) {
        let (z, _) = viterbi_span(chars, span.clone(), vocab, &mut cache)?;
        tokens.extend(join_word_tokens(&chars[span], &z, joiner));
    }
    Ok(tokens)
}
