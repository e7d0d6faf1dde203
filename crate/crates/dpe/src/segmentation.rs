//! Segmentations: ascending character-boundary indices over a string.
//!
//! All indexing is by unicode scalar values, never bytes. A segmentation of
//! a word lists boundaries `0 = z_1 < z_2 < ... < z_{M+1} = T`; each span
//! between consecutive boundaries is one subword.

use crate::vocab::Vocabulary;

/// Boundary indices of a segmentation, always starting at 0 and ending at
/// the string length. The empty string has the single boundary `[0]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segmentation {
    boundaries: Vec<usize>,
}

impl Segmentation {
    /// Builds a segmentation from boundary indices. Panics if the list does
    /// not start at 0; full validity against a vocabulary is checked by
    /// [`validate_segmentation`].
    pub fn new(boundaries: Vec<usize>) -> Self {
        assert_eq!(boundaries.first(), Some(&0), "boundaries must start at 0");
        Segmentation { boundaries }
    }

    /// The trivial one-span-per-character segmentation of a length-`len` string.
    pub fn per_character(len: usize) -> Self {
        Segmentation {
            boundaries: (0..=len).collect(),
        }
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Number of subword spans.
    pub fn num_spans(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn end(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    /// Extracts the subword spans of `chars` under this segmentation.
    pub fn spans<'a>(&'a self, chars: &'a [char]) -> impl Iterator<Item = String> + 'a {
        self.boundaries
            .windows(2)
            .map(move |w| chars[w[0]..w[1]].iter().collect())
    }
}

/// True iff `z` is a valid segmentation of `chars` against `vocab`:
/// boundaries ascend from 0 to the string length and every span is a
/// vocabulary entry. Total over all inputs.
pub fn validate_segmentation(chars: &[char], z: &Segmentation, vocab: &Vocabulary) -> bool {
    let b = z.boundaries();
    if b.first() != Some(&0) || b.last() != Some(&chars.len()) {
        return false;
    }
    if !b.windows(2).all(|w| w[0] < w[1]) {
        return false;
    }
    b.windows(2)
        .all(|w| vocab.id_of_chars(&chars[w[0]..w[1]]).is_some())
}

/// Serializes one word's segmentation with the joiner appended to every
/// non-final subword ("c@@ at" style).
pub fn join_word_tokens(chars: &[char], z: &Segmentation, joiner: &str) -> Vec<String> {
    let spans: Vec<String> = z.spans(chars).collect();
    let n = spans.len();
    spans
        .into_iter()
        .enumerate()
        .map(|(i, s)| if i + 1 < n { format!("{s}{joiner}") } else { s })
        .collect()
}

/// Inverse of joiner marking over a whole line: drops joiner suffixes and
/// glues marked tokens back into words.
pub fn strip_joiners(line: &str, joiner: &str) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut pending = String::new();
    for tok in line.split_whitespace() {
        if let Some(stem) = tok.strip_suffix(joiner) {
            pending.push_str(stem);
        } else {
            pending.push_str(tok);
            words.push(std::mem::take(&mut pending));
        }
    }
    if !pending.is_empty() {
        words.push(pending);
    }
    words.join(" ")
}
