//! Beam search over one model or a checkpoint ensemble.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{Model, Session, START};
use crate::numerics::NodeId;
use crate::textio::{IdMatrix, EOS};
use crate::training::{check_compatible, ensemble_combine};

/// Anything that yields next-token log-probabilities from a state.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial(&mut self) -> Result<Self::State>;
    /// Log-probabilities over the vocabulary after feeding `y_prev`, and the next state.
    fn step(&mut self, state: &Self::State, y_prev: u32) -> Result<(Vec<f64>, Self::State)>;
}

/// Incremental decoder over an ensemble that averages member probabilities.
pub struct EnsembleDecoder<'m> {
    sessions: Vec<Session<'m>>,
    vocab: usize,
}

impl<'m> EnsembleDecoder<'m> {
    pub fn new(models: &[&'m Model], source: &IdMatrix) -> Result<Self> {
        check_compatible(models)?;
        let sessions = models
            .iter()
            .map(|m| Session::new(m, source))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleDecoder {
            sessions,
            vocab: models[0].config().tgt_vocab_size,
        })
    }
}

impl StepModel for EnsembleDecoder<'_> {
    type State = Vec<NodeId>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial(&mut self) -> Result<Self::State> {
        self.sessions.iter_mut().map(Session::initial_state).collect()
    }

    fn step(&mut self, state: &Self::State, y_prev: u32) -> Result<(Vec<f64>, Self::State)> {
        let mut logits = Vec::with_capacity(self.sessions.len());
        let mut next = Vec::with_capacity(self.sessions.len());
        for (s, &st) in self.sessions.iter_mut().zip(state) {
            let (l, n) = s.step(st, y_prev)?;
            logits.push(l);
            next.push(n);
        }
        Ok((ensemble_combine(&logits), next))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamOptions {
    pub beam: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability divided by length.
    pub normalize: bool,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam: 12,
            max_len: 100,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Target ids; a finished hypothesis ends with EOS.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
    /// Decoding step at which the hypothesis was set aside.
    pub step: usize,
}

impl Hypothesis {
    pub fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.logprob / self.tokens.len() as f64
        } else {
            self.logprob
        }
    }

    /// Tokens without the final EOS.
    pub fn words(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished hypotheses, best first.
    pub finished: Vec<Hypothesis>,
    /// Set when nothing finished and `best` is the top unfinished hypothesis.
    pub unfinished: bool,
}

/// Best first: higher score, then earlier completion, then smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> Ordering {
    b.score(normalize)
        .total_cmp(&a.score(normalize))
        .then(a.step.cmp(&b.step))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn beam_search<M: StepModel>(model: &mut M, opts: BeamOptions) -> Result<BeamResult> {
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(Error::Contract(
            "beam size and maximum length must be at least 1".into(),
        ));
    }
    let vocab = model.vocab_size();
    let mut live: Vec<(Hypothesis, M::State)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            finished: false,
            step: 0,
        },
        model.initial()?,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..opts.max_len {
        let capacity = opts.beam.saturating_sub(finished.len());
        if live.is_empty() || capacity == 0 {
            break;
        }
        let mut states = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (i, (h, state)) in live.iter().enumerate() {
            let y_prev = h.tokens.last().copied().unwrap_or(START);
            let (logp, next) = model.step(state, y_prev)?;
            if logp.len() != vocab {
                return Err(Error::Shape {
                    op: "beam_search",
                    left: vec![logp.len()],
                    right: vec![vocab],
                });
            }
            for (w, lp) in logp.iter().enumerate() {
                candidates.push((h.logprob + lp, i, w as u32));
            }
            states.push(next);
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].0.tokens.cmp(&live[b.1].0.tokens))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(capacity);
        let mut next_live = Vec::with_capacity(candidates.len());
        for (lp, parent, w) in candidates {
            let mut tokens = live[parent].0.tokens.clone();
            tokens.push(w);
            let h = Hypothesis {
                tokens,
                logprob: lp,
                finished: w == EOS,
                step: t,
            };
            if h.finished {
                finished.push(h);
            } else {
                next_live.push((h, states[parent].clone()));
            }
        }
        live = next_live;
    }
    finished.sort_by(|a, b| rank(a, b, opts.normalize));
    if let Some(best) = finished.first() {
        return Ok(BeamResult {
            best: best.clone(),
            finished,
            unfinished: false,
        });
    }
    let mut rest: Vec<Hypothesis> = live.into_iter().map(|(h, _)| h).collect();
    rest.sort_by(|a, b| rank(a, b, opts.normalize));
    let best = rest
        .into_iter()
        .next()
        .expect("an unfinished beam keeps at least one hypothesis");
    Ok(BeamResult {
        best,
        finished,
        unfinished: true,
    })
}

/// Translates one source with an ensemble (a single model is an ensemble of one).
pub fn translate_ids(models: &[&Model], source: &IdMatrix, opts: BeamOptions) -> Result<BeamResult> {
    let mut decoder = EnsembleDecoder::new(models, source)?;
    beam_search(&mut decoder, opts)
}

/// Translates many sources, spreading sentences over `threads` workers.
/// Output order follows input order.
pub fn translate_corpus(
    models: &[&Model],
    sources: &[IdMatrix],
    opts: BeamOptions,
    threads: usize,
) -> Result<Vec<BeamResult>> {
    let threads = threads.max(1).min(sources.len().max(1));
    if threads == 1 {
        return sources.iter().map(|s| translate_ids(models, s, opts)).collect();
    }
    let chunk = sources.len().div_ceil(threads);
    let parts: Vec<Result<Vec<BeamResult>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| translate_ids(models, s, opts)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decoding worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Joins subword units marked with a trailing `@@`.
pub fn join_subwords(tokens: &[&str]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 && !glue {
            out.push(' ');
        }
        match t.strip_suffix(crate::bpe::CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}

/// One n-best line: `index ||| hypothesis ||| score`.
pub fn nbest_line(index: usize, hypothesis: &str, score: f64) -> String {
    format!("{index} ||| {hypothesis} ||| {score:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::log_softmax_vec;
    use crate::textio::FeatureScheme;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Next-token distributions depend on the full prefix through a hash.
    struct PrefixModel {
        vocab: usize,
        seed: u64,
        sharpness: f64,
    }

    impl StepModel for PrefixModel {
        type State = Vec<u32>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn initial(&mut self) -> Result<Vec<u32>> {
            Ok(Vec::new())
        }

        fn step(&mut self, state: &Vec<u32>, y_prev: u32) -> Result<(Vec<f64>, Vec<u32>)> {
            let mut prefix = state.clone();
            prefix.push(y_prev);
            let mut h = self.seed;
            for &x in &prefix {
                h = h
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(x as u64 + 1442695040888963407);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let logits: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * rng.gen::<f64>()).collect();
            Ok((log_softmax_vec(&logits), prefix))
        }
    }

    fn sequence_logprob(m: &mut PrefixModel, tokens: &[u32]) -> f64 {
        let mut state = m.initial().unwrap();
        let mut prev = START;
        let mut total = 0.0;
        for &t in tokens {
            let (lp, next) = m.step(&state, prev).unwrap();
            total += lp[t as usize];
            state = next;
            prev = t;
        }
        total
    }

    /// Every EOS-terminated sequence of at most `max_len` tokens.
    fn finished_sequences(vocab: u32, max_len: usize) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut prefixes: Vec<Vec<u32>> = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in &prefixes {
                for w in 0..vocab {
                    let mut q = p.clone();
                    q.push(w);
                    if w == EOS {
                        out.push(q);
                    } else {
                        next.push(q);
                    }
                }
            }
            prefixes = next;
        }
        out
    }

    fn exhaustive_best(m: &mut PrefixModel, max_len: usize, normalize: bool) -> (Vec<u32>, f64) {
        finished_sequences(m.vocab as u32, max_len)
            .into_iter()
            .map(|s| {
                let lp = sequence_logprob(m, &s);
                let score = if normalize { lp / s.len() as f64 } else { lp };
                (s, score)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    fn greedy(m: &mut PrefixModel, max_len: usize) -> Vec<u32> {
        let mut state = m.initial().unwrap();
        let mut prev = START;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (lp, next) = m.step(&state, prev).unwrap();
            let w = (0..lp.len())
                .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
                .unwrap() as u32;
            out.push(w);
            if w == EOS {
                break;
            }
            state = next;
            prev = w;
        }
        out
    }

    /// Two steps where the greedy first word leads to a flat continuation.
    struct TrapModel;

    impl StepModel for TrapModel {
        type State = Vec<u32>;

        fn vocab_size(&self) -> usize {
            4
        }

        fn initial(&mut self) -> Result<Vec<u32>> {
            Ok(Vec::new())
        }

        fn step(&mut self, state: &Vec<u32>, y_prev: u32) -> Result<(Vec<f64>, Vec<u32>)> {
            let probs: &[f64] = match (state.len(), y_prev) {
                (0, _) => &[0.0, 0.0, 0.55, 0.45],
                (1, 2) => &[0.0, 0.34, 0.33, 0.33],
                (1, 3) => &[0.0, 0.9, 0.05, 0.05],
                _ => &[0.0, 1.0, 0.0, 0.0],
            };
            let mut next = state.clone();
            next.push(y_prev);
            Ok((probs.iter().map(|p| p.ln()).collect(), next))
        }
    }

    #[test]
    fn beam_two_escapes_the_greedy_trap() {
        let opts = |beam| BeamOptions {
            beam,
            max_len: 2,
            normalize: false,
        };
        let g = beam_search(&mut TrapModel, opts(1)).unwrap();
        assert_eq!(g.best.tokens, [2, 1]);
        let b = beam_search(&mut TrapModel, opts(2)).unwrap();
        assert_eq!(b.best.tokens, [3, 1]);
        assert!((b.best.logprob - (0.45f64 * 0.9).ln()).abs() < 1e-12);
    }

    #[test]
    fn vocab_four_length_three_matches_enumeration() {
        for seed in 0..20 {
            let mut m = PrefixModel {
                vocab: 4,
                seed,
                sharpness: 4.0,
            };
            let (best, score) = exhaustive_best(&mut m, 3, true);
            let r = beam_search(
                &mut m,
                BeamOptions {
                    beam: 64,
                    max_len: 3,
                    normalize: true,
                },
            )
            .unwrap();
            assert_eq!(r.best.tokens, best, "seed {seed}");
            assert!((r.best.score(true) - score).abs() < 1e-12);
        }
    }

    #[test]
    fn nothing_finishes_flags_warning() {
        struct NeverEnd;
        impl StepModel for NeverEnd {
            type State = ();
            fn vocab_size(&self) -> usize {
                3
            }
            fn initial(&mut self) -> Result<()> {
                Ok(())
            }
            fn step(&mut self, _: &(), _: u32) -> Result<(Vec<f64>, ())> {
                Ok((vec![0.5f64.ln(), f64::NEG_INFINITY, 0.5f64.ln()], ()))
            }
        }
        let r = beam_search(
            &mut NeverEnd,
            BeamOptions {
                beam: 2,
                max_len: 3,
                normalize: true,
            },
        )
        .unwrap();
        assert!(r.unfinished);
        assert_eq!(r.best.tokens, [0, 0, 0]);
        assert!(r.finished.is_empty());
        assert!(beam_search(
            &mut NeverEnd,
            BeamOptions {
                beam: 0,
                max_len: 3,
                normalize: true
            }
        )
        .is_err());
    }

    #[test]
    fn beam_width_is_not_monotone() {
        // Found by search: the narrower beam keeps a prefix the wider one prunes.
        let mut m = PrefixModel {
            vocab: 5,
            seed: 3572976574221599420,
            sharpness: 3.0,
        };
        let opts = |beam| BeamOptions {
            beam,
            max_len: 4,
            normalize: false,
        };
        let two = beam_search(&mut m, opts(2)).unwrap();
        let three = beam_search(&mut m, opts(3)).unwrap();
        assert!(two.best.logprob > three.best.logprob);
        let full = beam_search(&mut m, opts(625)).unwrap();
        assert!(full.best.logprob >= two.best.logprob);
    }

    #[test]
    fn finished_hypotheses_shrink_the_beam() {
        let mut m = PrefixModel {
            vocab: 5,
            seed: 3,
            sharpness: 1.0,
        };
        let r = beam_search(
            &mut m,
            BeamOptions {
                beam: 3,
                max_len: 10,
                normalize: false,
            },
        )
        .unwrap();
        assert!(r.finished.len() <= 3);
        assert!(r.finished.iter().all(|h| h.finished && h.tokens.last() == Some(&EOS)));
    }

    #[test]
    fn subword_joining_and_nbest() {
        assert_eq!(
            join_subwords(&["Le@@", "oni@@", "das", "beg@@", "ged", "."]),
            "Leonidas begged ."
        );
        assert_eq!(join_subwords(&[]), "");
        assert_eq!(nbest_line(3, "a b", -1.25), "3 ||| a b ||| -1.250000");
    }

    #[test]
    fn model_decoding_and_ensemble_identity() {
        let scheme = FeatureScheme::word_only(4, 10).unwrap();
        let cfg = ModelConfig {
            scheme,
            hidden: 5,
            src_vocab_sizes: vec![10],
            tgt_vocab_size: 6,
            seed: 8,
        };
        let m = Model::with_init_scale(cfg, 1.0).unwrap();
        let src = IdMatrix::from_rows(&[vec![4], vec![7], vec![EOS]]).unwrap();
        let opts = BeamOptions {
            beam: 4,
            max_len: 8,
            normalize: true,
        };
        let one = translate_ids(&[&m], &src, opts).unwrap();
        let four = translate_ids(&[&m, &m, &m, &m], &src, opts).unwrap();
        assert_eq!(one.best.tokens, four.best.tokens);
        assert!((one.best.logprob - four.best.logprob).abs() < 1e-12);
        for h in &one.finished {
            let loss = m.sentence_loss(&src, &h.tokens).unwrap();
            assert!((loss + h.logprob).abs() < 1e-9);
        }
        let sources = vec![src.clone(); 5];
        let serial = translate_corpus(&[&m], &sources, opts, 1).unwrap();
        assert_eq!(serial, translate_corpus(&[&m], &sources, opts, 3).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn beam_one_is_greedy(seed in any::<u64>(), vocab in 2usize..6) {
            let mut m = PrefixModel { vocab, seed, sharpness: 3.0 };
            let g = greedy(&mut m, 6);
            let r = beam_search(&mut m, BeamOptions { beam: 1, max_len: 6, normalize: true }).unwrap();
            prop_assert_eq!(r.best.tokens, g);
        }

        #[test]
        fn exhaustive_beam_dominates_narrower_beams(seed in any::<u64>(), small in 1usize..4, extra in 0usize..6) {
            let mut m = PrefixModel { vocab: 5, seed, sharpness: 3.0 };
            let opts = |beam| BeamOptions { beam, max_len: 4, normalize: false };
            let a = beam_search(&mut m, opts(small)).unwrap();
            let b = beam_search(&mut m, opts(small + extra)).unwrap();
            let (exact, _) = exhaustive_best(&mut m, 4, false);
            let full = beam_search(&mut m, opts(625)).unwrap();
            prop_assert_eq!(&full.best.tokens, &exact);
            if !a.unfinished && !b.unfinished {
                prop_assert!(full.best.logprob >= b.best.logprob - 1e-12);
                prop_assert!(full.best.logprob >= a.best.logprob - 1e-12);
            }
        }

        #[test]
        fn hypotheses_are_valid(seed in any::<u64>()) {
            let mut m = PrefixModel { vocab: 5, seed, sharpness: 2.0 };
            let r = beam_search(&mut m, BeamOptions { beam: 4, max_len: 5, normalize: true }).unwrap();
            for h in r.finished.iter().chain([&r.best]) {
                prop_assert!(h.tokens.iter().all(|&t| (t as usize) < 5));
                prop_assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
                prop_assert!(h.logprob <= 0.0);
                let mut prefix_lp = 0.0;
                for k in 1..=h.tokens.len() {
                    let lp = sequence_logprob(&mut m, &h.tokens[..k]);
                    prop_assert!(lp <= prefix_lp);
                    prefix_lp = lp;
                }
            }
        }
    }
}
