//! Byte pair encoding: merge-table training, greedy encoding, and the
//! stochastic dropout variant.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::segmentation::Segmentation;
use crate::vocab::{VocabError, Vocabulary};

pub const MERGE_FILE_HEADER: &str = "#dpe merges v1";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("target vocab size {target} is below the {chars} distinct corpus characters")]
    VocabTooSmall { target: usize, chars: usize },
    #[error("character {0:?} is not covered by the vocabulary")]
    UnknownChar(char),
    #[error("bad merge file: {0}")]
    BadMergeFile(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered BPE merge rules. Rank 0 is the first-learned (highest priority)
/// merge. Immutable after training.
#[derive(Debug, Clone, Default)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    rank: HashMap<(String, String), u32>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        let rank = merges
            .iter()
            .enumerate()
            .map(|(i, pair)| (pair.clone(), i as u32))
            .collect();
        MergeTable { merges, rank }
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<u32> {
        self.rank.get(&(left.to_string(), right.to_string())).copied()
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{MERGE_FILE_HEADER}")?;
        for (l, r) in &self.merges {
            writeln!(f, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MERGE_FILE_HEADER => {}
            other => {
                return Err(BpeError::BadMergeFile(format!(
                    "expected header {MERGE_FILE_HEADER:?}, got {other:?}"
                )))
            }
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(BpeError::BadMergeFile(format!(
                        "line {}: expected \"left right\"",
                        i + 2
                    )))
                }
            }
        }
        Ok(MergeTable::new(merges))
    }
}

/// Per-occurrence merge dropout configuration.
#[derive(Debug, Clone, Copy)]
pub struct DropoutConfig {
    pub p: f64,
    pub rng_seed: u64,
}

impl DropoutConfig {
    pub fn new(p: f64, rng_seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p), "dropout probability must be in [0,1]");
        DropoutConfig { p, rng_seed }
    }
}

/// Learns a merge table by recursively combining the most frequent adjacent
/// fragment pair, starting from characters. Ties on pair count break by
/// lexicographic order of (left, right).
pub fn train_bpe(
    word_freqs: &BTreeMap<String, u64>,
    target_vocab_size: usize,
) -> Result<(MergeTable, Vocabulary), BpeError> {
    let alphabet: Vec<String> = {
        let mut set: Vec<String> = word_freqs
            .keys()
            .flat_map(|w| w.chars())
            .map(|c| c.to_string())
            .collect();
        set.sort();
        set.dedup();
        set
    };
    if target_vocab_size < alphabet.len() {
        return Err(BpeError::VocabTooSmall {
            target: target_vocab_size,
            chars: alphabet.len(),
        });
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| c.to_string()).collect(), n))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut vocab_entries: Vec<String> = alphabet.clone();
    while vocab_entries.len() < target_vocab_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (toks, n) in &words {
            for w in toks.windows(2) {
                *pair_counts
                    .entry((w[0].clone(), w[1].clone()))
                    .or_insert(0) += n;
            }
        }
        // Highest count wins; count ties go to the lexicographically
        // smallest (left, right) pair.
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(pair, _)| pair.clone());
        let Some((left, right)) = best else { break };
        let merged = format!("{left}{right}");
        for (toks, _) in &mut words {
            apply_merge_everywhere(toks, &left, &right, &merged);
        }
        merges.push((left, right));
        if !vocab_entries.contains(&merged) {
            vocab_entries.push(merged);
        }
    }
    let vocab = Vocabulary::from_entries(vocab_entries)?;
    Ok((MergeTable::new(merges), vocab))
}

fn apply_merge_everywhere(toks: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < toks.len() {
        if toks[i] == left && toks[i + 1] == right {
            toks[i] = merged.to_string();
            toks.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Outcome counters for dropout encoding: how many candidate merge
/// applications were considered and how many were dropped. Counters
/// accumulate across calls sharing one trace.
#[derive(Debug, Clone, Copy, Default)]
pub struct DropoutTrace {
    pub opportunities: u64,
    pub dropped: u64,
}

/// Core merge loop shared by the greedy and dropout encoders. Each
/// iteration collects every adjacent pair with a rank, lets `drop` veto
/// individual candidates, then applies the surviving candidate with the
/// lowest rank (leftmost on rank ties).
fn merge_loop(
    word: &str,
    table: &MergeTable,
    vocab: &Vocabulary,
    mut drop: impl FnMut() -> bool,
    trace: Option<&mut DropoutTrace>,
) -> Result<Segmentation, BpeError> {
    let mut buf = [0u8; 4];
    for ch in word.chars() {
        if !vocab.contains(ch.encode_utf8(&mut buf)) {
            return Err(BpeError::UnknownChar(ch));
        }
    }
    let mut toks: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    let mut local = DropoutTrace::default();
    loop {
        let mut best: Option<(u32, usize)> = None;
        for i in 0..toks.len().saturating_sub(1) {
            if let Some(rank) = table.rank(&toks[i], &toks[i + 1]) {
                local.opportunities += 1;
                if drop() {
                    local.dropped += 1;
                    continue;
                }
                if best.is_none_or(|(r, _)| rank < r) {
                    best = Some((rank, i));
                }
            }
        }
        let Some((_, i)) = best else { break };
        let merged = format!("{}{}", toks[i], toks[i + 1]);
        toks[i] = merged;
        toks.remove(i + 1);
    }
    if let Some(t) = trace {
        t.opportunities += local.opportunities;
        t.dropped += local.dropped;
    }
    let mut boundaries = vec![0usize];
    let mut pos = 0usize;
    for t in &toks {
        pos += t.chars().count();
        boundaries.push(pos);
    }
    Ok(Segmentation::new(boundaries))
}

/// Deterministic greedy BPE encoding of a single word.
pub fn encode_bpe(
    word: &str,
    table: &MergeTable,
    vocab: &Vocabulary,
) -> Result<Segmentation, BpeError> {
    merge_loop(word, table, vocab, || false, None)
}

/// BPE dropout with a caller-owned RNG, counting drop opportunities.
pub fn encode_bpe_dropout_with_rng(
    word: &str,
    table: &MergeTable,
    vocab: &Vocabulary,
    p: f64,
    rng: &mut impl Rng,
    trace: &mut DropoutTrace,
) -> Result<Segmentation, BpeError> {
    merge_loop(
        word,
        table,
        vocab,
        || p > 0.0 && rng.gen::<f64>() < p,
        Some(trace),
    )
}

/// BPE dropout: each candidate merge application is skipped independently
/// with probability `cfg.p`. Reproducible given `cfg.rng_seed`.
pub fn encode_bpe_dropout(
    word: &str,
    table: &MergeTable,
    vocab: &Vocabulary,
    cfg: &DropoutConfig,
) -> Result<Segmentation, BpeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trace = DropoutTrace::default();
    encode_bpe_dropout_with_rng(word, table, vocab, cfg.p, &mut rng, &mut trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::validate_segmentation;

    fn freqs(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(w, n)| (w.to_string(), *n)).collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let (table, vocab) = train_bpe(&freqs(&[("aaab", 1)]), 5).unwrap();
        // Pairs of "aaab": (a,a) twice, (a,b) once.
        assert_eq!(table.merges()[0], ("a".to_string(), "a".to_string()));
        assert!(vocab.len() <= 5);
        assert!(vocab.contains("aa"));
    }

    #[test]
    fn single_char_corpus_trains_no_merges() {
        let (table, vocab) = train_bpe(&freqs(&[("x", 10)]), 1).unwrap();
        assert!(table.is_empty());
        assert_eq!(vocab.entries(), ["x"]);
    }

    #[test]
    fn pair_counts_decide_first_merge() {
        let (table, _) = train_bpe(&freqs(&[("ab", 3), ("cd", 2)]), 5).unwrap();
        assert_eq!(table.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn vocab_too_small_rejected() {
        let err = train_bpe(&freqs(&[("abc", 1)]), 2).unwrap_err();
        assert!(matches!(err, BpeError::VocabTooSmall { target: 2, chars: 3 }));
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // "ba" and "ab" pairs both occur once; (a,b) wins lexicographically.
        let (table, _) = train_bpe(&freqs(&[("ab", 1), ("ba", 1)]), 6).unwrap();
        assert_eq!(table.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn encode_carts_prefers_earlier_ranked_merges() {
        // Merge order makes "car" and "ts" available before "cart" can form.
        let table = MergeTable::new(vec![
            ("c".into(), "a".into()),
            ("ca".into(), "r".into()),
            ("t".into(), "s".into()),
            ("car".into(), "t".into()),
        ]);
        let vocab =
            Vocabulary::from_entries(["c", "a", "r", "t", "s", "ca", "car", "ts", "cart"]).unwrap();
        let z = encode_bpe("carts", &table, &vocab).unwrap();
        let spans: Vec<String> = z.spans(&"carts".chars().collect::<Vec<_>>()).collect();
        assert_eq!(spans, ["car", "ts"]);
    }

    #[test]
    fn encode_single_char() {
        let table = MergeTable::default();
        let vocab = Vocabulary::from_entries(["a"]).unwrap();
        let z = encode_bpe("a", &table, &vocab).unwrap();
        assert_eq!(z.boundaries(), &[0, 1]);
    }

    #[test]
    fn encode_no_applicable_merges_yields_chars() {
        let table = MergeTable::new(vec![("x".into(), "y".into())]);
        let vocab = Vocabulary::from_entries(["a", "b", "x", "y"]).unwrap();
        let z = encode_bpe("ab", &table, &vocab).unwrap();
        assert_eq!(z.boundaries(), &[0, 1, 2]);
    }

    #[test]
    fn unknown_char_rejected() {
        let table = MergeTable::default();
        let vocab = Vocabulary::from_entries(["a"]).unwrap();
        assert!(matches!(
            encode_bpe("ab", &table, &vocab),
            Err(BpeError::UnknownChar('b'))
        ));
    }

    #[test]
    fn dropout_p0_matches_greedy() {
        let (table, vocab) = train_bpe(&freqs(&[("abab", 4), ("abc", 2)]), 8).unwrap();
        for word in ["abab", "abc", "ababab"] {
            let greedy = encode_bpe(word, &table, &vocab).unwrap();
            let cfg = DropoutConfig::new(0.0, 7);
            let dropped = encode_bpe_dropout(word, &table, &vocab, &cfg).unwrap();
            assert_eq!(greedy, dropped);
        }
    }

    #[test]
    fn dropout_p1_yields_per_character() {
        let (table, vocab) = train_bpe(&freqs(&[("abab", 4)]), 8).unwrap();
        let cfg = DropoutConfig::new(1.0, 3);
        let z = encode_bpe_dropout("abab", &table, &vocab, &cfg).unwrap();
        assert_eq!(z.boundaries(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn dropout_reproducible_and_valid() {
        let (table, vocab) = train_bpe(&freqs(&[("abab", 4), ("abc", 2)]), 8).unwrap();
        let cfg = DropoutConfig::new(0.5, 42);
        let a = encode_bpe_dropout("ababab", &table, &vocab, &cfg).unwrap();
        let b = encode_bpe_dropout("ababab", &table, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
        let chars: Vec<char> = "ababab".chars().collect();
        assert!(validate_segmentation(&chars, &a, &vocab));
    }

    #[test]
    fn merge_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.merges");
        let table = MergeTable::new(vec![("a".into(), "b".into()), ("ab".into(), "c".into())]);
        table.save(&path).unwrap();
        let loaded = MergeTable::load(&path).unwrap();
        assert_eq!(loaded.merges(), table.merges());
        assert_eq!(loaded.rank("ab", "c"), Some(1));
    }

    #[test]
    fn merge_file_header_required() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.merges");
        std::fs::write(&path, "a b\n").unwrap();
        assert!(matches!(MergeTable::load(&path), Err(BpeError::BadMergeFile(_))));
    }
}
