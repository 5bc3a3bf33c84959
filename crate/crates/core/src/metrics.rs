//! Perplexity, corpus BLEU, chrF3 and paired bootstrap resampling.
//!
//! BLEU works on whitespace tokens of already tokenized text and does not
//! reproduce any external script's tokenizer, so scores are comparable only
//! with other scores from this crate.

use std::collections::HashMap;
use std::ops::AddAssign;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::textio::normalize_whitespace;
use crate::training::{ensemble_logprob, Pair};

/// `exp(total NLL / total target tokens)`, EOS included. Several models are
/// scored as an ensemble.
pub fn perplexity(models: &[&Model], corpus: &[Pair]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("perplexity of an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in corpus {
        nll += match models {
            [] => return Err(Error::Contract("perplexity needs at least one model".into())),
            [m] => m.sentence_loss(&pair.source, &pair.target)?,
            _ => {
                let steps = ensemble_logprob(models, &pair.source, &pair.target)?;
                -steps
                    .iter()
                    .zip(&pair.target)
                    .map(|(lp, &y)| lp[y as usize])
                    .sum::<f64>()
            }
        };
        tokens += pair.target.len();
    }
    Ok((nll / tokens as f64).exp())
}

pub const BLEU_ORDER: usize = 4;

/// Sufficient statistics of one sentence (or a sum over sentences).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; BLEU_ORDER],
    pub totals: [u64; BLEU_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl AddAssign<&BleuStats> for BleuStats {
    fn add_assign(&mut self, o: &BleuStats) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and totals per order for `hyp` against `reference`.
fn overlap<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (u64, u64, u64) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1) as u64,
        reference.len().saturating_sub(n - 1) as u64,
    )
}

pub fn bleu_stats(hyp: &str, reference: &str) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = BleuStats {
        hyp_len: h.len() as u64,
        ref_len: r.len() as u64,
        ..Default::default()
    };
    for n in 1..=BLEU_ORDER {
        let (m, t, _) = overlap(&h, &r, n);
        s.matches[n - 1] = m;
        s.totals[n - 1] = t;
    }
    s
}

/// Corpus BLEU in `[0, 100]`. Any order with no matches (including 0/0) gives 0.
pub fn bleu_from_stats(s: &BleuStats) -> f64 {
    if s.hyp_len == 0 || s.matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..BLEU_ORDER)
        .map(|n| (s.matches[n] as f64 / s.totals[n] as f64).ln())
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = (1.0 - s.ref_len as f64 / s.hyp_len as f64).min(0.0);
    100.0 * (log_p + bp).exp()
}

/// Corpus score plus the per-sentence statistics it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub score: f64,
    pub sentences: Vec<BleuStats>,
}

impl BleuReport {
    pub fn total(&self) -> BleuStats {
        let mut t = BleuStats::default();
        for s in &self.sentences {
            t += s;
        }
        t
    }
}

fn check_lines<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

pub fn bleu_report<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    check_lines(hyps, refs)?;
    let sentences: Vec<BleuStats> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| bleu_stats(h.as_ref(), r.as_ref()))
        .collect();
    let mut report = BleuReport { score: 0.0, sentences };
    report.score = bleu_from_stats(&report.total());
    Ok(report)
}

pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    Ok(bleu_report(hyps, refs)?.score)
}

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 3.0;

/// Character n-gram statistics; text is whitespace-normalized with single spaces kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChrfStats {
    pub matches: [u64; CHRF_ORDER],
    pub hyp_totals: [u64; CHRF_ORDER],
    pub ref_totals: [u64; CHRF_ORDER],
}

impl AddAssign<&ChrfStats> for ChrfStats {
    fn add_assign(&mut self, o: &ChrfStats) {
        for n in 0..CHRF_ORDER {
            self.matches[n] += o.matches[n];
            self.hyp_totals[n] += o.hyp_totals[n];
            self.ref_totals[n] += o.ref_totals[n];
        }
    }
}

pub fn chrf_stats(hyp: &str, reference: &str) -> ChrfStats {
    let h: Vec<char> = normalize_whitespace(hyp).chars().collect();
    let r: Vec<char> = normalize_whitespace(reference).chars().collect();
    let mut s = ChrfStats::default();
    for n in 1..=CHRF_ORDER {
        let (m, ht, rt) = overlap(&h, &r, n);
        s.matches[n - 1] = m;
        s.hyp_totals[n - 1] = ht;
        s.ref_totals[n - 1] = rt;
    }
    s
}

/// chrF3 in `[0, 100]`. Precision averages over orders where the hypothesis
/// has n-grams and recall over orders where the reference has them; a side
/// with no n-grams at all scores 0 on that side. Two empty texts score 100.
pub fn chrf_from_stats(s: &ChrfStats) -> f64 {
    let mean = |num: &[u64], den: &[u64]| {
        let defined: Vec<f64> = num
            .iter()
            .zip(den)
            .filter(|(_, &d)| d > 0)
            .map(|(&m, &d)| m as f64 / d as f64)
            .collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let (p, r) = match (mean(&s.matches, &s.hyp_totals), mean(&s.matches, &s.ref_totals)) {
        (None, None) => return 100.0,
        (p, r) => (p.unwrap_or(0.0), r.unwrap_or(0.0)),
    };
    let b2 = CHRF_BETA * CHRF_BETA;
    if p == 0.0 && r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + b2) * p * r / (b2 * p + r)
}

pub fn chrf3<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_lines(hyps, refs)?;
    if refs.is_empty() {
        return Err(Error::Contract("chrF3 of an empty reference corpus".into()));
    }
    let mut total = ChrfStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total += &chrf_stats(h.as_ref(), r.as_ref());
    }
    Ok(chrf_from_stats(&total))
}

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Significance {
    pub score_a: f64,
    pub score_b: f64,
    /// `(losses + 1) / (resamples + 1)` for the observed winner; ties count as losses.
    pub p_value: f64,
}

/// Paired bootstrap resampling over BLEU sufficient statistics.
pub fn bootstrap_significance<A: AsRef<str>, B: AsRef<str>, R: AsRef<str>>(
    hyps_a: &[A],
    hyps_b: &[B],
    refs: &[R],
    resamples: usize,
    seed: u64,
) -> Result<Significance> {
    check_lines(hyps_a, refs)?;
    check_lines(hyps_b, refs)?;
    if resamples == 0 {
        return Err(Error::Contract("resample count must be positive".into()));
    }
    let a = bleu_report(hyps_a, refs)?;
    let b = bleu_report(hyps_b, refs)?;
    let p_value = bootstrap_p(&a.sentences, &b.sentences, resamples, seed);
    Ok(Significance {
        score_a: a.score,
        score_b: b.score,
        p_value,
    })
}

/// The resampling loop on precomputed per-sentence statistics.
pub fn bootstrap_p(a: &[BleuStats], b: &[BleuStats], resamples: usize, seed: u64) -> f64 {
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let total = |s: &[BleuStats]| {
        let mut t = BleuStats::default();
        for x in s {
            t += x;
        }
        bleu_from_stats(&t)
    };
    let a_wins = total(a) >= total(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = 0usize;
    for _ in 0..resamples {
        let mut sa = BleuStats::default();
        let mut sb = BleuStats::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa += &a[i];
            sb += &b[i];
        }
        let (x, y) = (bleu_from_stats(&sa), bleu_from_stats(&sb));
        let win = if a_wins { x > y } else { y > x };
        if !win {
            losses += 1;
        }
    }
    (losses + 1) as f64 / (resamples + 1) as f64
}
