//! Factored corpus format, per-feature vocabularies and numberization.
//!
//! A factored line is a whitespace-separated list of tokens; each token is
//! its factor values joined by `|` in scheme order, e.g.
//! `in|in|O|IN|prep the|the|O|DT|det`. A literal `|` inside a value must be
//! escaped as `&#124;` by whoever produced the annotation; values are kept
//! verbatim (escaped) here.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FACTOR_SEPARATOR: char = '|';
pub const ESCAPED_SEPARATOR: &str = "&#124;";

pub const UNK: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const RESERVED_SYMBOLS: [&str; 3] = ["<unk>", "</s>", "<pad>"];

/// One input feature: its name, embedding width and vocabulary capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub embed_size: usize,
    pub capacity: usize,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, embed_size: usize, capacity: usize) -> Self {
        FeatureSpec {
            name: name.into(),
            embed_size,
            capacity,
        }
    }
}

/// Ordered list of input features. Feature 0 is always `word`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureScheme {
    features: Vec<FeatureSpec>,
}

impl FeatureScheme {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        if features.is_empty() || features[0].name != "word" {
            return Err(Error::Scheme("the first feature must be \"word\"".into()));
        }
        for (i, f) in features.iter().enumerate() {
            if f.name.is_empty() || f.name.chars().any(char::is_whitespace) {
                return Err(Error::Scheme(format!("feature {i} has an invalid name {:?}", f.name)));
            }
            if features[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Scheme(format!("duplicate feature name {:?}", f.name)));
            }
            if f.embed_size == 0 {
                return Err(Error::Scheme(format!("feature {:?} has embedding size 0", f.name)));
            }
            if f.capacity < 4 {
                return Err(Error::Scheme(format!(
                    "feature {:?} has capacity {} (minimum 4)",
                    f.name, f.capacity
                )));
            }
        }
        Ok(FeatureScheme { features })
    }

    pub fn word_only(embed_size: usize, capacity: usize) -> Result<Self> {
        Self::new(vec![FeatureSpec::new("word", embed_size, capacity)])
    }

    /// Builds a scheme whose embedding widths sum to `total`.
    ///
    /// `extra` lists the non-word features in order as
    /// `(name, embed_size, capacity)`. The word feature is inserted first and
    /// receives whatever is left of the budget. A `lemma` entry without an
    /// explicit size takes a third of the leftover (rounded down) and the word
    /// feature the remaining two thirds. A `lemma` capacity of 0 means "same as
    /// the word capacity".
    pub fn with_budget(total: usize, word_capacity: usize, extra: &[(&str, Option<usize>, usize)]) -> Result<Self> {
        let fixed: usize = extra.iter().filter_map(|(_, size, _)| *size).sum();
        if fixed >= total {
            return Err(Error::Scheme(format!(
                "non-word features use {fixed} of a total embedding budget of {total}"
            )));
        }
        let leftover = total - fixed;
        let mut word_size = leftover;
        let mut features = vec![FeatureSpec::new("word", 0, word_capacity)];
        for (name, size, capacity) in extra {
            let size = match size {
                Some(size) => *size,
                None if *name == "lemma" => {
                    word_size -= leftover / 3;
                    leftover / 3
                }
                None => return Err(Error::Scheme(format!("feature {name:?} needs an embedding size"))),
            };
            let capacity = if *name == "lemma" && *capacity == 0 {
                word_capacity
            } else {
                *capacity
            };
            features.push(FeatureSpec::new(*name, size, capacity));
        }
        features[0].embed_size = word_size;
        Self::new(features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Total embedding width `m`.
    pub fn total_embed(&self) -> usize {
        self.features.iter().map(|f| f.embed_size).sum()
    }

    /// Parses the scheme file format: `name<TAB>embed_size<TAB>capacity` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut features = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(
                    "scheme file",
                    format!("line {}: expected 3 tab-separated columns", i + 1),
                ));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format("scheme file", format!("line {}: bad number {s:?}", i + 1)))
            };
            features.push(FeatureSpec::new(cols[0].trim(), num(cols[1])?, num(cols[2])?));
        }
        Self::new(features)
    }

    pub fn to_text(&self) -> String {
        self.features
            .iter()
            .map(|f| format!("{}\t{}\t{}\n", f.name, f.embed_size, f.capacity))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// A surface symbol plus one value per additional feature, in scheme order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactoredToken {
    values: Vec<String>,
}

impl FactoredToken {
    pub fn new(values: Vec<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("a factored token needs at least one value".into()));
        }
        for v in &values {
            if !valid_value(v) {
                return Err(Error::FactorValue {
                    token: 0,
                    value: v.clone(),
                });
            }
        }
        Ok(FactoredToken { values })
    }

    pub fn from_strs(values: &[&str]) -> Result<Self> {
        Self::new(values.iter().map(|s| s.to_string()).collect())
    }

    pub fn word(&self) -> &str {
        &self.values[0]
    }

    pub fn value(&self, k: usize) -> &str {
        &self.values[k]
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn from_values_unchecked(values: Vec<String>) -> Self {
        FactoredToken { values }
    }
}

impl fmt::Display for FactoredToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            f.write_str(v)?;
        }
        Ok(())
    }
}

fn valid_value(v: &str) -> bool {
    !v.is_empty() && !v.contains(FACTOR_SEPARATOR) && !v.chars().any(char::is_whitespace)
}

/// Escapes a raw annotation value for use as a factor.
pub fn escape_value(raw: &str) -> String {
    raw.replace(FACTOR_SEPARATOR, ESCAPED_SEPARATOR)
}

pub fn unescape_value(value: &str) -> String {
    value.replace(ESCAPED_SEPARATOR, "|")
}

/// Parses one factored line against a scheme.
pub fn parse_factored_line(line: &str, scheme: &FeatureScheme) -> Result<Vec<FactoredToken>> {
    parse_tokens(line, scheme.len())
}

/// Parses one factored line whose tokens carry exactly `factors` values.
pub fn parse_tokens(line: &str, factors: usize) -> Result<Vec<FactoredToken>> {
    line.split_whitespace()
        .enumerate()
        .map(|(i, raw)| {
            let values: Vec<String> = raw.split(FACTOR_SEPARATOR).map(str::to_owned).collect();
            if values.len() != factors {
                return Err(Error::FactorCount {
                    token: i,
                    expected: factors,
                    found: values.len(),
                });
            }
            if let Some(bad) = values.iter().find(|v| v.is_empty()) {
                return Err(Error::FactorValue {
                    token: i,
                    value: bad.clone(),
                });
            }
            Ok(FactoredToken { values })
        })
        .collect()
}

/// Number of factors on the first token of a line, if any.
pub fn factor_count(line: &str) -> Option<usize> {
    line.split_whitespace()
        .next()
        .map(|t| t.split(FACTOR_SEPARATOR).count())
}

pub fn emit_factored_line(tokens: &[FactoredToken]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.to_string());
    }
    out
}

pub fn normalize_whitespace(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Symbol table for one feature. Ids 0..3 are the reserved UNK, EOS and PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    feature: String,
    symbols: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    capacity: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from symbol counts: descending frequency, ties by
    /// symbol, truncated to `capacity` entries including the reserved ones.
    pub fn from_counts(feature: impl Into<String>, counts: HashMap<String, u64>, capacity: usize) -> Result<Self> {
        if capacity < RESERVED_SYMBOLS.len() + 1 {
            return Err(Error::Contract(format!("vocabulary capacity {capacity} is below 4")));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(s, _)| !RESERVED_SYMBOLS.contains(&s.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(capacity - RESERVED_SYMBOLS.len());

        let mut symbols: Vec<String> = RESERVED_SYMBOLS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; RESERVED_SYMBOLS.len()];
        for (s, c) in ranked {
            symbols.push(s);
            freqs.push(c);
        }
        Ok(Self::from_parts(feature.into(), symbols, freqs, capacity))
    }

    fn from_parts(feature: String, symbols: Vec<String>, freqs: Vec<u64>, capacity: usize) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Vocabulary {
            feature,
            symbols,
            freqs,
            index,
            capacity,
        }
    }

    /// Identity vocabulary over the given symbols (after the reserved ones).
    pub fn from_symbols<S: AsRef<str>>(feature: &str, symbols: &[S]) -> Result<Self> {
        let counts = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_ref().to_string(), (symbols.len() - i) as u64))
            .collect();
        Self::from_counts(feature, counts, symbols.len() + RESERVED_SYMBOLS.len())
    }

    pub fn feature(&self) -> &str {
        &self.feature
    }

    pub fn with_feature(mut self, feature: impl Into<String>) -> Self {
        self.feature = feature.into();
        self
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Id of `symbol`, or [`UNK`] when it is not stored.
    pub fn id(&self, symbol: &str) -> u32 {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.freqs.get(id as usize).copied()
    }

    /// Vocabulary file: `symbol<TAB>frequency` per line in id order.
    pub fn to_text(&self) -> String {
        self.symbols
            .iter()
            .zip(&self.freqs)
            .map(|(s, f)| format!("{s}\t{f}\n"))
            .collect()
    }

    pub fn parse(feature: &str, text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (sym, freq) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocabulary file", format!("line {}: missing tab", i + 1)))?;
            let freq = freq
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::format("vocabulary file", format!("line {}: bad frequency", i + 1)))?;
            if symbols.contains(&sym.to_string()) {
                return Err(Error::format(
                    "vocabulary file",
                    format!("line {}: duplicate symbol {sym:?}", i + 1),
                ));
            }
            symbols.push(sym.to_string());
            freqs.push(freq);
        }
        if symbols.len() < RESERVED_SYMBOLS.len()
            || symbols[..RESERVED_SYMBOLS.len()]
                .iter()
                .zip(RESERVED_SYMBOLS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::format(
                "vocabulary file",
                "the first three entries must be <unk>, </s>, <pad>",
            ));
        }
        let capacity = symbols.len().max(RESERVED_SYMBOLS.len() + 1);
        Ok(Self::from_parts(feature.to_string(), symbols, freqs, capacity))
    }

    pub fn read(feature: &str, path: &Path) -> Result<Self> {
        Self::parse(feature, &fs::read_to_string(path)?)
    }
}

/// Counts the values of feature `feature_index` over a corpus and builds its
/// vocabulary. The result does not depend on sentence order.
pub fn build_vocab<'a, I>(corpus: I, feature_index: usize, capacity: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [FactoredToken]>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sentence in corpus {
        for token in sentence {
            let value = token.values.get(feature_index).ok_or_else(|| {
                Error::Contract(format!(
                    "feature index {feature_index} out of range for a token with {} factors",
                    token.len()
                ))
            })?;
            *counts.entry(value.clone()).or_default() += 1;
        }
    }
    Vocabulary::from_counts(format!("f{feature_index}"), counts, capacity)
}

/// One vocabulary per scheme feature, each named after its feature.
pub fn build_vocabs(corpus: &[Vec<FactoredToken>], scheme: &FeatureScheme) -> Result<Vec<Vocabulary>> {
    scheme
        .features()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            build_vocab(corpus.iter().map(Vec::as_slice), k, f.capacity).map(|v| v.with_feature(f.name.clone()))
        })
        .collect()
}

/// Vocabulary over plain whitespace-tokenized lines (the target side).
pub fn build_word_vocab<'a, I>(lines: I, capacity: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    Vocabulary::from_counts("word", counts, capacity)
}

/// Row-major integer matrix: one row per position, one column per feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    width: usize,
    data: Vec<u32>,
}

impl IdMatrix {
    pub fn new(width: usize) -> Self {
        IdMatrix {
            width,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let width = rows.first().map_or(1, Vec::len);
        let mut m = IdMatrix::new(width);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[u32]) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::Shape {
                op: "IdMatrix::push_row",
                left: vec![self.width],
                right: vec![row.len()],
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of positions (rows).
    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, j: usize) -> &[u32] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [u32] {
        &mut self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks(self.width)
    }

    /// Rows reordered as `order` lists them.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut m = IdMatrix::new(self.width);
        for &j in order {
            m.data.extend_from_slice(self.row(j));
        }
        m
    }
}

/// Maps a factored sentence to ids, one column per feature, and appends an EOS row.
pub fn numberize(tokens: &[FactoredToken], vocabs: &[Vocabulary]) -> Result<IdMatrix> {
    let mut m = IdMatrix::new(vocabs.len());
    let mut row = vec![0u32; vocabs.len()];
    for (j, t) in tokens.iter().enumerate() {
        if t.len() != vocabs.len() {
            return Err(Error::FactorCount {
                token: j,
                expected: vocabs.len(),
                found: t.len(),
            });
        }
        for (k, v) in vocabs.iter().enumerate() {
            row[k] = v.id(&t.values[k]);
        }
        m.push_row(&row)?;
    }
    m.push_row(&vec![EOS; vocabs.len()])?;
    Ok(m)
}

/// Target-side numberization: word ids followed by EOS.
pub fn numberize_words(line: &str, vocab: &Vocabulary) -> Vec<u32> {
    line.split_whitespace()
        .map(|w| vocab.id(w))
        .chain(std::iter::once(EOS))
        .collect()
}

/// Inverse of [`numberize_words`] up to the first EOS.
pub fn denumberize_words(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .map(|&id| vocab.symbol(id).unwrap_or(RESERVED_SYMBOLS[0]).to_string())
        .collect()
}
