//! Browser demo: subword annotation, BLEU/chrF3 scoring and a toy
//! factored-versus-baseline translator with an attention view.
//!
//! The `*_text` functions and [`ToyTranslator`] methods are plain Rust so
//! they can be tested natively; the `#[wasm_bindgen]` items wrap them.

use factored_nmt::bpe::MergeTable;
use factored_nmt::decoding::{join_subwords, translate_ids, BeamOptions};
use factored_nmt::featalign::annotate_corpus;
use factored_nmt::metrics::{bleu, chrf3};
use factored_nmt::model::{Model, Vocabularies};
use factored_nmt::textio::{denumberize_words, numberize, parse_tokens, FactoredToken};
use factored_nmt::toy::{run_toy, toy_pairs, ToySettings};
use wasm_bindgen::prelude::*;

fn js(e: impl ToString) -> JsError {
    JsError::new(&e.to_string())
}

/// Annotates a word-level factored corpus with the given merge table.
pub fn annotate_text(input: &str, merges: &str) -> Result<String, String> {
    let table = MergeTable::parse(merges).map_err(|e| e.to_string())?;
    let lines = annotate_corpus(input, &table, 0).map_err(|e| e.to_string())?;
    Ok(lines.join("\n"))
}

#[wasm_bindgen]
pub fn annotate(input: &str, merges: &str) -> Result<String, JsError> {
    annotate_text(input, merges).map_err(js)
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub bleu: f64,
    pub chrf3: f64,
}

pub fn score_text(hyp: &str, reference: &str) -> Result<Scores, String> {
    let h: Vec<&str> = hyp.lines().collect();
    let r: Vec<&str> = reference.lines().collect();
    Ok(Scores {
        bleu: bleu(&h, &r).map_err(|e| e.to_string())?,
        chrf3: chrf3(&h, &r).map_err(|e| e.to_string())?,
    })
}

#[wasm_bindgen]
pub fn score(hyp: &str, reference: &str) -> Result<Scores, JsError> {
    score_text(hyp, reference).map_err(js)
}

/// Toy model trained in the page.
#[wasm_bindgen]
pub struct ToyTranslator {
    model: Model,
    vocabs: Vocabularies,
    with_pos: bool,
    dev_perplexity: f64,
    ambiguous_accuracy: f64,
}

impl ToyTranslator {
    pub fn train(with_pos: bool, hidden: usize, updates: usize, seed: u32) -> Result<Self, String> {
        let settings = ToySettings {
            with_pos,
            hidden,
            updates,
            seed: seed as u64,
            ..ToySettings::default()
        };
        let o = run_toy(settings, seed as u64).map_err(|e| e.to_string())?;
        Ok(ToyTranslator {
            model: o.model,
            vocabs: o.vocabs,
            with_pos,
            dev_perplexity: o.dev_perplexity,
            ambiguous_accuracy: o.ambiguous_accuracy,
        })
    }

    fn tokens(&self, line: &str) -> Result<Vec<FactoredToken>, String> {
        let tokens = parse_tokens(line, 2).map_err(|e| format!("expected word|POS tokens: {e}"))?;
        if self.with_pos {
            return Ok(tokens);
        }
        tokens
            .iter()
            .map(|t| FactoredToken::from_strs(&[t.word()]).map_err(|e| e.to_string()))
            .collect()
    }

    /// Beam translation plus the attention weights of each output step,
    /// row-major `[output tokens incl. EOS] x [source tokens incl. EOS]`.
    pub fn translate_with_attention(&self, line: &str) -> Result<(String, Vec<f64>), String> {
        let tokens = self.tokens(line)?;
        let src = numberize(&tokens, &self.vocabs.source).map_err(|e| e.to_string())?;
        let opts = BeamOptions {
            beam: 4,
            max_len: 2 * src.len() + 2,
            normalize: true,
        };
        let result = translate_ids(&[&self.model], &src, opts).map_err(|e| e.to_string())?;
        let words = denumberize_words(result.best.words(), &self.vocabs.target);
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();

        let ann = self.model.encode(&src).map_err(|e| e.to_string())?;
        let mut state = self.model.initial_state(&ann).map_err(|e| e.to_string())?;
        let mut attention = Vec::new();
        let mut prev = factored_nmt::model::START;
        for &y in &result.best.tokens {
            let (_, next) = self.model.decode_step(prev, &state, &ann).map_err(|e| e.to_string())?;
            attention.extend_from_slice(&next.alpha);
            state = next;
            prev = y;
        }
        Ok((join_subwords(&refs), attention))
    }
}

#[wasm_bindgen]
impl ToyTranslator {
    /// Trains on the generated toy corpus; blocks until done.
    #[wasm_bindgen(constructor)]
    pub fn new(with_pos: bool, hidden: usize, updates: usize, seed: u32) -> Result<ToyTranslator, JsError> {
        Self::train(with_pos, hidden, updates, seed).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn dev_perplexity(&self) -> f64 {
        self.dev_perplexity
    }

    #[wasm_bindgen(getter)]
    pub fn ambiguous_accuracy(&self) -> f64 {
        self.ambiguous_accuracy
    }

    pub fn translate(&self, line: &str) -> Result<String, JsError> {
        self.translate_with_attention(line).map(|r| r.0).map_err(js)
    }

    pub fn attention(&self, line: &str) -> Result<Vec<f64>, JsError> {
        self.translate_with_attention(line).map(|r| r.1).map_err(js)
    }
}

/// `count` sample `word|POS` source lines.
#[wasm_bindgen]
pub fn toy_examples(count: usize, seed: u32) -> String {
    toy_pairs(count, seed as u64)
        .iter()
        .map(|p| p.source_line(true))
        .collect::<Vec<_>>()
        .join("\n")
}
