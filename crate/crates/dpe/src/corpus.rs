//! Corpus I/O: whitespace normalization, word splitting, parallel files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parallel corpus line count mismatch: {source_lines} source vs {target_lines} target")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("line {line}: sentence empty after whitespace normalization")]
    EmptySentence { line: usize },
    #[error("io error reading {path}: {err}")]
    Io { path: String, err: std::io::Error },
}

/// A source/target sentence pair, whitespace-normalized, both sides non-empty.
#[derive(Debug, Clone)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

/// Collapses all whitespace runs to single spaces and trims the ends.
pub fn normalize_whitespace(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|err| CorpusError::Io {
        path: path.display().to_string(),
        err,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads two aligned text files into sentence pairs. Lines are normalized;
/// a pair with an empty side is an error carrying its 1-based line number.
pub fn read_parallel(source: &Path, target: &Path) -> Result<Vec<SentencePair>, CorpusError> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    src.into_iter()
        .zip(tgt)
        .enumerate()
        .map(|(i, (s, t))| {
            let source = normalize_whitespace(&s);
            let target = normalize_whitespace(&t);
            if source.is_empty() || target.is_empty() {
                return Err(CorpusError::EmptySentence { line: i + 1 });
            }
            Ok(SentencePair { source, target })
        })
        .collect()
}

/// Word-frequency map of a corpus, words being whitespace tokens. BTreeMap
/// so that downstream iteration order is deterministic.
pub fn word_frequencies<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> BTreeMap<String, u64> {
    let mut freqs = BTreeMap::new();
    for line in lines {
        for word in line.split_whitespace() {
            *freqs.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    freqs
}
