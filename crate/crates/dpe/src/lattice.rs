//! Segmentation lattice: a DAG over character positions 0..T whose edges are
//! vocabulary-matching substrings. Paths from 0 to T are exactly the valid
//! segmentations.

use thiserror::Error;

use crate::segmentation::Segmentation;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("more than {limit} segmentations")]
    TooManySegmentations { limit: usize },
}

/// An edge ending at position `k`: the span `chars[start..k]` matches the
/// vocabulary entry `subword`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub start: usize,
    pub subword: u32,
}

/// Edges indexed by end position, matching the DP recurrences' inner loop
/// over predecessors `j in [k-m, k-1]`.
#[derive(Debug, Clone)]
pub struct Lattice {
    len: usize,
    edges_by_end: Vec<Vec<Edge>>,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Edges ending at position `k` (1 <= k <= len), ordered by ascending start.
    pub fn edges_into(&self, k: usize) -> &[Edge] {
        &self.edges_by_end[k]
    }

    /// Number of 0 -> len paths, by DP over the lattice. Saturates at u64::MAX.
    pub fn path_count(&self) -> u64 {
        let mut counts = vec![0u64; self.len + 1];
        counts[0] = 1;
        for k in 1..=self.len {
            let mut total: u64 = 0;
            for e in self.edges_into(k) {
                total = total.saturating_add(counts[e.start]);
            }
            counts[k] = total;
        }
        counts[self.len]
    }

    /// True iff every position 1..=len has at least one incoming path.
    pub fn fully_reachable(&self) -> bool {
        let mut reach = vec![false; self.len + 1];
        reach[0] = true;
        for k in 1..=self.len {
            reach[k] = self.edges_into(k).iter().any(|e| reach[e.start]);
        }
        reach.into_iter().all(|r| r)
    }

    /// DOT rendering for debugging, labeling edges with their subwords.
    pub fn to_dot(&self, chars: &[char], vocab: &Vocabulary) -> String {
        let mut out = String::from("digraph lattice {\n  rankdir=LR;\n");
        for k in 0..=self.len {
            out.push_str(&format!("  n{k} [shape=circle,label=\"{k}\"];\n"));
        }
        for k in 1..=self.len {
            for e in self.edges_into(k) {
                let label: String = chars[e.start..k].iter().collect();
                debug_assert_eq!(vocab.lookup(e.subword), label);
                out.push_str(&format!("  n{} -> n{k} [label=\"{label}\"];\n", e.start));
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Builds the lattice of `chars` against `vocab`: for each end position `k`
/// it checks the at most `m` candidate spans ending there. Unreachable
/// positions simply have no viable incoming edges.
pub fn build_lattice(chars: &[char], vocab: &Vocabulary) -> Lattice {
    let t = chars.len();
    let m = vocab.max_len();
    let mut edges_by_end: Vec<Vec<Edge>> = vec![Vec::new(); t + 1];
    for k in 1..=t {
        let lo = k.saturating_sub(m);
        for j in lo..k {
            if let Some(id) = vocab.id_of_chars(&chars[j..k]) {
                edges_by_end[k].push(Edge { start: j, subword: id });
            }
        }
    }
    Lattice { len: t, edges_by_end }
}

/// Exhaustively enumerates the valid segmentations of `chars`, in
/// lexicographic order of their boundary sequences. Intended as the
/// brute-force oracle for short strings.
pub fn enumerate_segmentations(
    chars: &[char],
    vocab: &Vocabulary,
    limit: usize,
) -> Result<Vec<Segmentation>, LatticeError> {
    let lattice = build_lattice(chars, vocab);
    // Outgoing adjacency with ascending successors gives lexicographic order.
    let mut next: Vec<Vec<usize>> = vec![Vec::new(); lattice.len() + 1];
    for k in 1..=lattice.len() {
        for e in lattice.edges_into(k) {
            next[e.start].push(k);
        }
    }
    for succ in &mut next {
        succ.sort_unstable();
    }
    let mut out = Vec::new();
    let mut stack = vec![0usize];
    dfs(&next, lattice.len(), &mut stack, &mut out, limit)?;
    Ok(out)
}

fn dfs(
    next: &[Vec<usize>],
    end: usize,
    stack: &mut Vec<usize>,
    out: &mut Vec<Segmentation>,
    limit: usize,
) -> Result<(), LatticeError> {
    let pos = *stack.last().unwrap();
    if pos == end {
        if out.len() >= limit {
            return Err(LatticeError::TooManySegmentations { limit });
        }
        out.push(Segmentation::new(stack.clone()));
        return Ok(());
    }
    for &k in &next[pos] {
        stack.push(k);
        dfs(next, end, stack, out, limit)?;
        stack.pop();
    }
    Ok(())
}
