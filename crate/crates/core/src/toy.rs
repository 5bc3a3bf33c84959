//! Synthetic disambiguation corpus: one source word ("close") translates as
//! a verb or an adjective depending only on its POS factor, which is drawn
//! at random and independently of the context. Every other word has a fixed
//! POS and a single translation, and translation is word-by-word monotone.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::perplexity;
use crate::model::{Model, ModelConfig, Vocabularies};
use crate::textio::{numberize, numberize_words, FactoredToken, FeatureScheme, FeatureSpec, Vocabulary};
use crate::training::{ensemble_logprob, train, Pair, TrainConfig};

pub const AMBIGUOUS_WORD: &str = "close";
/// `(POS, translation)` of the ambiguous word.
pub const AMBIGUOUS_SENSES: [(&str, &str); 2] = [("VB", "schliessen"), ("JJ", "nah")];

/// `(source, POS, target)`.
pub const LEXICON: [(&str, &str, &str); 48] = [
    ("house", "NN", "haus"),
    ("dog", "NN", "hund"),
    ("cat", "NN", "katze"),
    ("door", "NN", "tuer"),
    ("window", "NN", "fenster"),
    ("tree", "NN", "baum"),
    ("car", "NN", "auto"),
    ("book", "NN", "buch"),
    ("city", "NN", "stadt"),
    ("river", "NN", "fluss"),
    ("road", "NN", "strasse"),
    ("child", "NN", "kind"),
    ("friend", "NN", "freund"),
    ("garden", "NN", "garten"),
    ("table", "NN", "tisch"),
    ("letter", "NN", "brief"),
    ("shop", "NN", "laden"),
    ("school", "NN", "schule"),
    ("bridge", "NN", "bruecke"),
    ("lake", "NN", "see"),
    ("bird", "NN", "vogel"),
    ("horse", "NN", "pferd"),
    ("apple", "NN", "apfel"),
    ("key", "NN", "schluessel"),
    ("see", "VB", "sehen"),
    ("open", "VB", "oeffnen"),
    ("find", "VB", "finden"),
    ("paint", "VB", "malen"),
    ("buy", "VB", "kaufen"),
    ("sell", "VB", "verkaufen"),
    ("visit", "VB", "besuchen"),
    ("build", "VB", "bauen"),
    ("carry", "VB", "tragen"),
    ("clean", "VB", "putzen"),
    ("leave", "VB", "verlassen"),
    ("watch", "VB", "beobachten"),
    ("old", "JJ", "alt"),
    ("new", "JJ", "neu"),
    ("big", "JJ", "gross"),
    ("small", "JJ", "klein"),
    ("red", "JJ", "rot"),
    ("green", "JJ", "gruen"),
    ("quiet", "JJ", "ruhig"),
    ("dark", "JJ", "dunkel"),
    ("warm", "JJ", "warm"),
    ("cold", "JJ", "kalt"),
    ("long", "JJ", "lang"),
    ("bright", "JJ", "hell"),
];

pub const TRAIN_PAIRS: usize = 1800;
pub const DEV_PAIRS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyPair {
    /// `word|POS` tokens.
    pub source: Vec<FactoredToken>,
    pub target: Vec<String>,
    /// Position of the ambiguous word (same on both sides).
    pub ambiguous_at: usize,
}

impl ToyPair {
    pub fn source_line(&self, with_pos: bool) -> String {
        self.source
            .iter()
            .map(|t| if with_pos { t.to_string() } else { t.word().to_string() })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn target_line(&self) -> String {
        self.target.join(" ")
    }
}

/// `count` pairs of 3 to 6 tokens, each containing the ambiguous word once.
pub fn toy_pairs(count: usize, seed: u64) -> Vec<ToyPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(3..=6);
            let at = rng.gen_range(0..len);
            let mut source = Vec::with_capacity(len);
            let mut target = Vec::with_capacity(len);
            for j in 0..len {
                let (w, pos, t) = if j == at {
                    let (pos, t) = *AMBIGUOUS_SENSES.choose(&mut rng).expect("two senses");
                    (AMBIGUOUS_WORD, pos, t)
                } else {
                    *LEXICON.choose(&mut rng).expect("non-empty lexicon")
                };
                source.push(FactoredToken::from_strs(&[w, pos]).expect("lexicon tokens are valid"));
                target.push(t.to_string());
            }
            ToyPair {
                source,
                target,
                ambiguous_at: at,
            }
        })
        .collect()
}

/// The standard split: 1800 training and 200 dev pairs.
pub fn toy_split(seed: u64) -> (Vec<ToyPair>, Vec<ToyPair>) {
    let mut all = toy_pairs(TRAIN_PAIRS + DEV_PAIRS, seed);
    let dev = all.split_off(TRAIN_PAIRS);
    (all, dev)
}

/// Source vocabularies (word, and POS when `with_pos`) and the target vocabulary.
pub fn toy_vocabularies(train: &[ToyPair], with_pos: bool) -> Result<(Vec<Vocabulary>, Vocabulary)> {
    let features = if with_pos { 2 } else { 1 };
    let mut src = Vec::new();
    for k in 0..features {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for p in train {
            for t in &p.source {
                *counts.entry(t.value(k).to_string()).or_default() += 1;
            }
        }
        src.push(Vocabulary::from_counts(
            if k == 0 { "word" } else { "pos" },
            counts,
            1000,
        )?);
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for p in train {
        for w in &p.target {
            *counts.entry(w.clone()).or_default() += 1;
        }
    }
    Ok((src, Vocabulary::from_counts("word", counts, 1000)?))
}

pub fn toy_numberize(pairs: &[ToyPair], src: &[Vocabulary], tgt: &Vocabulary) -> Result<Vec<Pair>> {
    pairs
        .iter()
        .map(|p| {
            let tokens: Vec<FactoredToken> = if src.len() == 1 {
                p.source
                    .iter()
                    .map(|t| FactoredToken::from_strs(&[t.word()]))
                    .collect::<Result<_>>()?
            } else {
                p.source.clone()
            };
            Ok(Pair {
                source: numberize(&tokens, src)?,
                target: numberize_words(&p.target_line(), tgt),
            })
        })
        .collect()
}

/// Word-only scheme of width `m`, or word plus a POS feature of width
/// `pos_size` with the word taking the rest.
pub fn toy_scheme(with_pos: bool, m: usize, pos_size: usize) -> Result<FeatureScheme> {
    if with_pos {
        FeatureScheme::new(vec![
            FeatureSpec::new("word", m - pos_size, 1000),
            FeatureSpec::new("pos", pos_size, 1000),
        ])
    } else {
        FeatureScheme::new(vec![FeatureSpec::new("word", m, 1000)])
    }
}

/// Share of ambiguous positions where the model's teacher-forced argmax is
/// the reference translation.
pub fn ambiguous_accuracy(model: &Model, pairs: &[ToyPair], numbered: &[Pair]) -> Result<f64> {
    let mut correct = 0usize;
    for (p, n) in pairs.iter().zip(numbered) {
        let steps = ensemble_logprob(&[model], &n.source, &n.target)?;
        let lp = &steps[p.ambiguous_at];
        let best = (0..lp.len())
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .expect("non-empty vocabulary");
        if best as u32 == n.target[p.ambiguous_at] {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySettings {
    pub with_pos: bool,
    pub embed: usize,
    pub pos_embed: usize,
    pub hidden: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub updates: usize,
    pub threads: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            with_pos: true,
            embed: 32,
            pos_embed: 4,
            hidden: 64,
            seed: 1,
            batch_size: 20,
            updates: 2000,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub dev_perplexity: f64,
    pub ambiguous_accuracy: f64,
    pub model: Model,
    pub vocabs: Vocabularies,
    pub log: Vec<crate::training::LogEntry>,
}

/// Trains one toy model on the standard split generated from `corpus_seed`
/// and reports the best dev perplexity and its ambiguous-word accuracy.
pub fn run_toy(settings: ToySettings, corpus_seed: u64) -> Result<ToyOutcome> {
    let (train_pairs, dev_pairs) = toy_split(corpus_seed);
    let (src, tgt) = toy_vocabularies(&train_pairs, settings.with_pos)?;
    let train_ids = toy_numberize(&train_pairs, &src, &tgt)?;
    let dev_ids = toy_numberize(&dev_pairs, &src, &tgt)?;
    let config = ModelConfig {
        scheme: toy_scheme(settings.with_pos, settings.embed, settings.pos_embed)?,
        hidden: settings.hidden,
        src_vocab_sizes: src.iter().map(Vocabulary::len).collect(),
        tgt_vocab_size: tgt.len(),
        seed: settings.seed,
    };
    let cfg = TrainConfig {
        batch_size: settings.batch_size,
        valid_interval: (settings.updates / 10).max(1),
        checkpoint_interval: settings.updates.max(1),
        max_updates: settings.updates,
        epochs: usize::MAX,
        seed: settings.seed,
        threads: settings.threads,
        ..Default::default()
    };
    let report = train(Model::new(config)?, &train_ids, &dev_ids, &cfg, None)?;
    let accuracy = ambiguous_accuracy(&report.best_model, &dev_pairs, &dev_ids)?;
    let dev_perplexity = perplexity(&[&report.best_model], &dev_ids)?;
    Ok(ToyOutcome {
        dev_perplexity,
        ambiguous_accuracy: accuracy,
        model: report.best_model,
        vocabs: Vocabularies {
            source: src,
            target: tgt,
        },
        log: report.log,
    })
}
