//! Byte-pair encoding: greedy merge learning and segmentation.
//!
//! Words start as their characters followed by an end-of-word marker
//! `</w>`. Learning repeatedly merges the most frequent adjacent pair
//! (frequency-weighted over the word counts; ties go to the
//! lexicographically smallest `(left, right)`). Segmentation replays the
//! merges in table order and marks every non-final subword with `@@`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
pub const TABLE_HEADER: &str = "#version: bpe-1";

/// Word → occurrence count. Counts are strictly positive.
pub type WordFrequencyMap = BTreeMap<String, u64>;

type Pair = (String, String);

/// Ordered merge operations; merge `i` was learned before merge `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
}

impl MergeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        let mut t = MergeTable::new();
        for (l, r) in pairs {
            t.push(l.as_ref().to_string(), r.as_ref().to_string())?;
        }
        Ok(t)
    }

    fn push(&mut self, left: String, right: String) -> Result<()> {
        if left.is_empty() || right.is_empty() || left.contains(' ') || right.contains(' ') {
            return Err(Error::format(
                "merge table",
                format!("invalid pair ({left:?}, {right:?})"),
            ));
        }
        let pair = (left, right);
        if self.ranks.contains_key(&pair) {
            return Err(Error::format("merge table", format!("duplicate pair {pair:?}")));
        }
        self.ranks.insert(pair.clone(), self.merges.len());
        self.merges.push(pair);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.merges.iter().map(|(l, r)| (l.as_str(), r.as_str()))
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // Avoid allocating for the common miss.
        if self.merges.is_empty() {
            return None;
        }
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == TABLE_HEADER => {}
            _ => return Err(Error::format("merge table", format!("missing {TABLE_HEADER:?} header"))),
        }
        let mut t = MergeTable::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::format("merge table", format!("line {}: expected \"left right\"", i + 2)))?;
            t.push(l.to_string(), r.to_string())?;
        }
        Ok(t)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Counts whitespace-separated words over lines.
pub fn word_frequencies<'a, I>(lines: I) -> WordFrequencyMap
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freqs = WordFrequencyMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *freqs.entry(w.to_string()).or_default() += 1;
        }
    }
    freqs
}

/// Adds `other` into `freqs`; joint learning sums source and target counts.
pub fn merge_frequencies(freqs: &mut WordFrequencyMap, other: &WordFrequencyMap) {
    for (w, c) in other {
        *freqs.entry(w.clone()).or_default() += c;
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

/// Replaces every non-overlapping occurrence of `pair`, scanning left to right.
fn merge_word(symbols: &mut Vec<String>, left: &str, right: &str) -> bool {
    let mut changed = false;
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
            changed = true;
        }
        i += 1;
    }
    changed
}

struct Learner {
    words: Vec<Vec<String>>,
    counts: Vec<u64>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, HashSet<usize>>,
}

impl Learner {
    fn new(freqs: &WordFrequencyMap) -> Self {
        let mut l = Learner {
            words: Vec::with_capacity(freqs.len()),
            counts: Vec::with_capacity(freqs.len()),
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
        };
        for (w, &c) in freqs {
            if c == 0 || w.is_empty() {
                continue;
            }
            l.words.push(initial_symbols(w));
            l.counts.push(c);
        }
        for i in 0..l.words.len() {
            l.add_word_pairs(i);
        }
        l
    }

    fn add_word_pairs(&mut self, i: usize) {
        let c = self.counts[i];
        for p in self.words[i].windows(2) {
            let pair = (p[0].clone(), p[1].clone());
            *self.pair_counts.entry(pair.clone()).or_default() += c;
            self.pair_words.entry(pair).or_default().insert(i);
        }
    }

    fn remove_word_pairs(&mut self, i: usize) {
        let c = self.counts[i];
        for p in self.words[i].windows(2) {
            let pair = (p[0].clone(), p[1].clone());
            if let Some(n) = self.pair_counts.get_mut(&pair) {
                *n -= c;
                if *n == 0 {
                    self.pair_counts.remove(&pair);
                }
            }
        }
    }

    fn best_pair(&self) -> Option<Pair> {
        self.pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(p, _)| p.clone())
    }

    fn apply(&mut self, left: &str, right: &str) {
        let pair = (left.to_string(), right.to_string());
        let mut affected: Vec<usize> = self
            .pair_words
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for i in affected {
            if !self.words[i].windows(2).any(|p| p[0] == left && p[1] == right) {
                continue;
            }
            self.remove_word_pairs(i);
            merge_word(&mut self.words[i], left, right);
            self.add_word_pairs(i);
        }
        self.pair_counts.remove(&pair);
    }
}

/// Learns up to `num_merges` merge operations from word frequencies.
pub fn learn_bpe(freqs: &WordFrequencyMap, num_merges: usize) -> Result<MergeTable> {
    continue_bpe(freqs, MergeTable::new(), num_merges)
}

/// Continues learning on top of an existing table (learned on the same
/// counts): `n` merges then `m` more equals `n + m` merges in one call.
pub fn continue_bpe(freqs: &WordFrequencyMap, mut table: MergeTable, more: usize) -> Result<MergeTable> {
    if freqs.values().all(|&c| c == 0) {
        return Err(Error::Contract("learn_bpe needs a non-empty frequency map".into()));
    }
    let mut learner = Learner::new(freqs);
    let existing: Vec<Pair> = table.merges.clone();
    for (l, r) in &existing {
        learner.apply(l, r);
    }
    for _ in 0..more {
        let Some((l, r)) = learner.best_pair() else {
            break;
        };
        learner.apply(&l, &r);
        table.push(l, r)?;
    }
    Ok(table)
}

/// Raw merged symbols of one word, `</w>` still attached to the final unit.
fn merged_symbols(word: &str, table: &MergeTable) -> Vec<String> {
    let mut symbols = initial_symbols(word);
    let mut next_rank = 0;
    loop {
        // Lowest-ranked applicable merge not yet passed in table order.
        let best = symbols
            .windows(2)
            .filter_map(|p| table.rank(&p[0], &p[1]))
            .filter(|&r| r >= next_rank)
            .min();
        let Some(rank) = best else { break };
        let (l, r) = &table.merges[rank];
        merge_word(&mut symbols, l, r);
        next_rank = rank + 1;
    }
    symbols
}

/// Segments one word into subword units. Non-final units carry `@@`.
pub fn apply_bpe(word: &str, table: &MergeTable) -> Vec<String> {
    let mut symbols = merged_symbols(word, table);
    let last = symbols.len() - 1;
    if symbols[last] == END_OF_WORD {
        symbols.pop();
    } else if let Some(stripped) = symbols[last].strip_suffix(END_OF_WORD) {
        symbols[last] = stripped.to_string();
    }
    let n = symbols.len();
    for s in symbols.iter_mut().take(n - 1) {
        s.push_str(CONTINUATION);
    }
    symbols
}

/// Segments whole lines, caching per word.
#[derive(Debug)]
pub struct Segmenter<'a> {
    table: &'a MergeTable,
    cache: HashMap<String, Vec<String>>,
}

impl<'a> Segmenter<'a> {
    pub fn new(table: &'a MergeTable) -> Self {
        Segmenter {
            table,
            cache: HashMap::new(),
        }
    }

    pub fn word(&mut self, word: &str) -> &[String] {
        if !self.cache.contains_key(word) {
            let seg = apply_bpe(word, self.table);
            self.cache.insert(word.to_string(), seg);
        }
        &self.cache[word]
    }

    /// Returns the segmented line and the subword count of each input word.
    pub fn line(&mut self, line: &str) -> (String, Vec<usize>) {
        let mut out = String::new();
        let mut counts = Vec::new();
        for w in line.split_whitespace() {
            let seg = self.word(w);
            counts.push(seg.len());
            for s in seg {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(s);
            }
        }
        (out, counts)
    }
}

/// Segments every line; the second result holds per-line subword counts per word.
pub fn segment_corpus<'l, I>(lines: I, table: &MergeTable) -> (Vec<String>, Vec<Vec<usize>>)
where
    I: IntoIterator<Item = &'l str>,
{
    let mut seg = Segmenter::new(table);
    lines.into_iter().map(|l| seg.line(l)).unzip()
}

/// Undoes segmentation: joins units marked with `@@` to their successor.
pub fn remove_markers(line: &str) -> String {
    let joined = format!("{} ", line).replace("@@ ", "");
    joined.trim_end().to_string()
}
