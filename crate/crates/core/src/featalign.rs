//! Subword tags and projection of word-level features onto subword units.

use std::fmt;
use std::str::FromStr;

use crate::bpe::{MergeTable, Segmenter, CONTINUATION};
use crate::error::{Error, Result};
use crate::textio::{emit_factored_line, factor_count, parse_tokens, FactoredToken};

/// Position of a subword unit inside its word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubwordTag {
    /// First unit of a multi-unit word.
    B,
    /// Interior unit.
    I,
    /// Last unit of a multi-unit word.
    E,
    /// The unit is the whole word.
    O,
}

impl SubwordTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SubwordTag::B => "B",
            SubwordTag::I => "I",
            SubwordTag::E => "E",
            SubwordTag::O => "O",
        }
    }
}

impl fmt::Display for SubwordTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubwordTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(SubwordTag::B),
            "I" => Ok(SubwordTag::I),
            "E" => Ok(SubwordTag::E),
            "O" => Ok(SubwordTag::O),
            _ => Err(Error::format("subword tag", s.to_string())),
        }
    }
}

pub fn subword_tags(segment_count: usize) -> Result<Vec<SubwordTag>> {
    match segment_count {
        0 => Err(Error::Contract("a word has at least one subword unit".into())),
        1 => Ok(vec![SubwordTag::O]),
        n => {
            let mut tags = Vec::with_capacity(n);
            tags.push(SubwordTag::B);
            tags.extend(std::iter::repeat_n(SubwordTag::I, n - 2));
            tags.push(SubwordTag::E);
            Ok(tags)
        }
    }
}

/// Copies each word's factors onto its subword units and inserts the subword
/// tag as a new factor at `tag_position` (1 ≤ position ≤ factor count).
///
/// `line` only labels alignment errors.
pub fn propagate_features(
    tokens: &[FactoredToken],
    segmentation: &[usize],
    subwords: &[String],
    tag_position: usize,
    line: usize,
) -> Result<Vec<FactoredToken>> {
    if segmentation.len() != tokens.len() {
        return Err(Error::Alignment {
            line,
            detail: format!(
                "{} words but a segmentation map of length {}",
                tokens.len(),
                segmentation.len()
            ),
        });
    }
    let total: usize = segmentation.iter().sum();
    if total != subwords.len() {
        return Err(Error::Alignment {
            line,
            detail: format!(
                "segmentation map covers {total} subwords but {} were given",
                subwords.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(subwords.len());
    let mut units = subwords.iter();
    for (token, &count) in tokens.iter().zip(segmentation) {
        if tag_position == 0 || tag_position > token.len() {
            return Err(Error::Contract(format!(
                "subword tag position {tag_position} is invalid for {} factors",
                token.len()
            )));
        }
        let tags = subword_tags(count).map_err(|_| Error::Alignment {
            line,
            detail: format!("word {:?} has zero subword units", token.word()),
        })?;
        for tag in tags {
            let unit = units.next().expect("length checked above");
            let mut values = token.values().to_vec();
            values[0] = unit.clone();
            values.insert(tag_position, tag.as_str().to_string());
            out.push(FactoredToken::from_values_unchecked(values));
        }
    }
    Ok(out)
}

/// Segments the word factor of a word-level factored corpus and propagates
/// the other factors, inserting the subword tag at `tag_position`
/// (0 selects min(2, factor count)). Every line must have the factor count
/// of the first non-empty line. Returns one output line per input line.
pub fn annotate_corpus(text: &str, table: &MergeTable, tag_position: usize) -> Result<Vec<String>> {
    let factors = text.lines().find_map(factor_count).unwrap_or(1);
    let position = if tag_position == 0 {
        factors.min(2)
    } else {
        tag_position
    };
    let mut seg = Segmenter::new(table);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = parse_tokens(line, factors)?;
        let mut counts = Vec::with_capacity(tokens.len());
        let mut units = Vec::new();
        for t in &tokens {
            let w = seg.word(t.word());
            counts.push(w.len());
            units.extend_from_slice(w);
        }
        let rows = propagate_features(&tokens, &counts, &units, position, i + 1)?;
        out.push(emit_factored_line(&rows));
    }
    Ok(out)
}

/// Inverse of [`propagate_features`]: regroups subword rows into words using
/// the tag factor, strips `@@` and removes the tag column. Fails when the tag
/// sequence is not a valid B I* E / O bracketing or the non-word factors
/// disagree inside one word.
pub fn regroup(rows: &[FactoredToken], tag_position: usize) -> Result<Vec<FactoredToken>> {
    let malformed = |detail: String| Error::Alignment { line: 0, detail };
    let mut words = Vec::new();
    let mut current: Option<(String, Vec<String>)> = None;
    for (i, row) in rows.iter().enumerate() {
        let tag: SubwordTag = row.value(tag_position).parse()?;
        let mut rest = row.values().to_vec();
        rest.remove(tag_position);
        let unit = rest[0].strip_suffix(CONTINUATION).unwrap_or(&rest[0]).to_string();
        match (tag, current.take()) {
            (SubwordTag::O, None) => words.push(FactoredToken::from_values_unchecked(rest)),
            (SubwordTag::B, None) => current = Some((unit, rest)),
            (SubwordTag::I | SubwordTag::E, Some((mut word, feats))) => {
                if feats[1..] != rest[1..] {
                    return Err(malformed(format!("row {i}: factors change inside a word")));
                }
                word.push_str(&unit);
                if tag == SubwordTag::E {
                    let mut values = feats;
                    values[0] = word;
                    words.push(FactoredToken::from_values_unchecked(values));
                } else {
                    current = Some((word, feats));
                }
            }
            (tag, _) => return Err(malformed(format!("row {i}: unexpected tag {tag}"))),
        }
    }
    if current.is_some() {
        return Err(malformed("sentence ends inside a word".into()));
    }
    Ok(words)
}

/// Global order of morphological attributes in the serialized string.
pub const MORPH_ATTRIBUTES: [&str; 6] = ["case", "number", "gender", "person", "tense", "aspect"];
pub const UNDERSPECIFIED: &str = "_";

/// Morphological attributes of one word; absent attributes are underspecified.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MorphBundle {
    values: [Option<String>; 6],
}

impl MorphBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `attribute` to `value`; `_` clears it.
    pub fn set(&mut self, attribute: &str, value: &str) -> Result<()> {
        let k = MORPH_ATTRIBUTES
            .iter()
            .position(|a| *a == attribute)
            .ok_or_else(|| Error::Contract(format!("unknown morphological attribute {attribute:?}")))?;
        if value == UNDERSPECIFIED {
            self.values[k] = None;
            return Ok(());
        }
        if value.is_empty() || value.contains(['+', '|']) || value.chars().any(char::is_whitespace) {
            return Err(Error::Contract(format!("invalid morphological value {value:?}")));
        }
        self.values[k] = Some(value.to_string());
        Ok(())
    }

    pub fn with(mut self, attribute: &str, value: &str) -> Result<Self> {
        self.set(attribute, value)?;
        Ok(self)
    }

    pub fn get(&self, attribute: &str) -> Option<&str> {
        let k = MORPH_ATTRIBUTES.iter().position(|a| *a == attribute)?;
        self.values[k].as_deref()
    }
}

/// Serializes a bundle as `+`-joined values in [`MORPH_ATTRIBUTES`] order.
pub fn morph_string(bundle: &MorphBundle) -> String {
    bundle
        .values
        .iter()
        .map(|v| v.as_deref().unwrap_or(UNDERSPECIFIED))
        .collect::<Vec<_>>()
        .join("+")
}
