//! Segmentation comparison reports: per-word disagreement between two
//! segmenters, aggregated overall and by word-frequency band.
//!
//! A "word" is a case-sensitive whitespace token of the raw corpus. When a
//! word is segmented differently across occurrences, its modal segmentation
//! (the one used most often, lexicographic on ties) represents it.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;


#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("line count mismatch: raw has {raw} lines, segmented file has {seg}")]
    LineCountMismatch { raw: usize, seg: usize },
    #[error("line {line}: segmented text does not reproduce the raw words")]
    AlignmentMismatch { line: usize },
}

/// Frequency band edges: the lowest band covers occurrences 1..=5, the rest
/// are decadal.
pub const BAND_EDGES: [(u64, Option<u64>); 5] = [
    (1, Some(5)),
    (6, Some(10)),
    (11, Some(100)),
    (101, Some(1000)),
    (1001, None),
];

pub fn band_label(index: usize) -> String {
    let (lo, hi) = BAND_EDGES[index];
    match hi {
        Some(hi) => format!("{lo}-{hi}"),
        None => format!(">{}", lo - 1),
    }
}

fn band_of(freq: u64) -> usize {
    BAND_EDGES
        .iter()
        .position(|&(lo, hi)| freq >= lo && hi.is_none_or(|h| freq <= h))
        .expect("frequency 0 word cannot appear in the corpus")
}

/// One word type with its modal segmentations under both segmenters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordRecord {
    pub word: String,
    pub freq: u64,
    pub seg_a: Vec<String>,
    pub seg_b: Vec<String>,
    pub agree: bool,
}

#[derive(Debug, Clone)]
pub struct BandStats {
    pub label: String,
    pub word_types: u64,
    pub disagreements: u64,
}

impl BandStats {
    pub fn rate(&self) -> f64 {
        if self.word_types == 0 {
            0.0
        } else {
            self.disagreements as f64 / self.word_types as f64
        }
    }
}

/// Word-type disagreement between two segmentations of the same raw corpus.
#[derive(Debug, Clone)]
pub struct DisagreementReport {
    /// Sorted by frequency descending, ties lexicographic on the word.
    pub records: Vec<WordRecord>,
    pub bands: Vec<BandStats>,
}

impl DisagreementReport {
    pub fn total_types(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn total_disagreements(&self) -> u64 {
        self.records.iter().filter(|r| !r.agree).count() as u64
    }

    /// Fraction of word types whose modal segmentations differ.
    pub fn aggregate_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_disagreements() as f64 / self.total_types() as f64
        }
    }

    /// Report body as TSV: word, freq, seg_a, seg_b, agree.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("word\tfreq\tseg_a\tseg_b\tagree\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.word,
                r.freq,
                r.seg_a.join("|"),
                r.seg_b.join("|"),
                r.agree
            );
        }
        out
    }

    /// Band breakdown as CSV `(band, types, disagreements, rate)` for
    /// external plotting.
    pub fn band_csv(&self) -> String {
        let mut out = String::from("band,word_types,disagreements,rate\n");
        for b in &self.bands {
            let _ = writeln!(
                out,
                "{},{},{},{:.6}",
                b.label,
                b.word_types,
                b.disagreements,
                b.rate()
            );
        }
        let _ = writeln!(
            out,
            "all,{},{},{:.6}",
            self.total_types(),
            self.total_disagreements(),
            self.aggregate_rate()
        );
        out
    }
}

/// Splits a segmented line back into per-word token groups using the joiner
/// convention: a token without the joiner suffix ends its word.
fn word_token_groups(line: &str, joiner: &str) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for tok in line.split_whitespace() {
        if let Some(stem) = tok.strip_suffix(joiner) {
            current.push(stem.to_string());
        } else {
            current.push(tok.to_string());
            groups.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups
}

/// Per-word-type modal segmentations of a segmented corpus, checked against
/// the raw corpus for alignment.
fn modal_segmentations(
    segmented: &[String],
    raw: &[String],
    joiner: &str,
) -> Result<HashMap<String, Vec<String>>, AnalysisError> {
    if segmented.len() != raw.len() {
        return Err(AnalysisError::LineCountMismatch {
            raw: raw.len(),
            seg: segmented.len(),
        });
    }
    let mut usage: HashMap<String, HashMap<Vec<String>, u64>> = HashMap::new();
    for (i, (seg_line, raw_line)) in segmented.iter().zip(raw).enumerate() {
        let raw_words: Vec<&str> = raw_line.split_whitespace().collect();
        let groups = word_token_groups(seg_line, joiner);
        if groups.len() != raw_words.len() {
            return Err(AnalysisError::AlignmentMismatch { line: i + 1 });
        }
        for (word, group) in raw_words.iter().zip(groups) {
            if group.concat() != *word {
                return Err(AnalysisError::AlignmentMismatch { line: i + 1 });
            }
            *usage
                .entry(word.to_string())
                .or_default()
                .entry(group)
                .or_insert(0) += 1;
        }
    }
    Ok(usage
        .into_iter()
        .map(|(word, segs)| {
            let modal = segs
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .map(|(seg, _)| seg)
                .unwrap();
            (word, modal)
        })
        .collect())
}

/// Compares two segmentations of the same raw corpus, word type by word type.
pub fn compare_segmenters(
    segmented_a: &[String],
    segmented_b: &[String],
    raw: &[String],
    joiner: &str,
) -> Result<DisagreementReport, AnalysisError> {
    let modal_a = modal_segmentations(segmented_a, raw, joiner)?;
    let modal_b = modal_segmentations(segmented_b, raw, joiner)?;

    let mut freqs: HashMap<&str, u64> = HashMap::new();
    for line in raw {
        for w in line.split_whitespace() {
            *freqs.entry(w).or_insert(0) += 1;
        }
    }

    let mut records: Vec<WordRecord> = freqs
        .into_iter()
        .map(|(word, freq)| {
            let seg_a = modal_a[word].clone();
            let seg_b = modal_b[word].clone();
            let agree = seg_a == seg_b;
            WordRecord {
                word: word.to_string(),
                freq,
                seg_a,
                seg_b,
                agree,
            }
        })
        .collect();
    records.sort_by(|a, b| b.freq.cmp(&a.freq).then_with(|| a.word.cmp(&b.word)));

    let mut bands: Vec<BandStats> = (0..BAND_EDGES.len())
        .map(|i| BandStats {
            label: band_label(i),
            word_types: 0,
            disagreements: 0,
        })
        .collect();
    for r in &records {
        let b = &mut bands[band_of(r.freq)];
        b.word_types += 1;
        if !r.agree {
            b.disagreements += 1;
        }
    }
    Ok(DisagreementReport { records, bands })
}

/// Disagreement of one segmenter's output for the same target corpus under
/// two different conditioning corpora (e.g. two source languages).
pub fn cross_condition_disagreement(
    segmented_given_src1: &[String],
    segmented_given_src2: &[String],
    raw: &[String],
    joiner: &str,
) -> Result<DisagreementReport, AnalysisError> {
    compare_segmenters(segmented_given_src1, segmented_given_src2, raw, joiner)
}

/// The `n` most frequent disagreeing words (frequency descending, ties
/// lexicographic).
pub fn top_disagreements(report: &DisagreementReport, n: usize) -> Vec<&WordRecord> {
    report.records.iter().filter(|r| !r.agree).take(n).collect()
}

/// Sanity identity: the band counts weighted by band rates reproduce the
/// aggregate rate.
pub fn bands_consistent(report: &DisagreementReport, tol: f64) -> bool {
    let total: u64 = report.bands.iter().map(|b| b.word_types).sum();
    if total == 0 {
        return report.records.is_empty();
    }
    let weighted: f64 = report
        .bands
        .iter()
        .map(|b| b.word_types as f64 * b.rate())
        .sum::<f64>()
        / total as f64;
    (weighted - report.aggregate_rate()).abs() <= tol
}
