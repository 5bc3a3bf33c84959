//! Minibatch training: Adadelta, global-norm clipping, word and layer
//! dropout, length bucketing, periodic validation and checkpointing.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::perplexity;
use crate::model::{decoder_inputs, save_checkpoint, LayerDropout, Model, Vocabularies};
use crate::numerics::{log_softmax_vec, Tape, Tensor};
use crate::textio::{IdMatrix, EOS, PAD};

/// Width of the length buckets used when forming minibatches.
pub const BUCKET_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Pairs with more tokens than this on either side (EOS excluded) are skipped.
    pub max_len: usize,
    pub clip_norm: f64,
    pub rho: f64,
    pub eps: f64,
    pub valid_interval: usize,
    pub checkpoint_interval: usize,
    pub word_dropout: f64,
    pub layer_dropout: f64,
    pub epochs: usize,
    /// Stop after this many updates; 0 means no limit.
    pub max_updates: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 80,
            max_len: 50,
            clip_norm: 1.0,
            rho: 0.95,
            eps: 1e-6,
            valid_interval: 10000,
            checkpoint_interval: 10000,
            word_dropout: 0.0,
            layer_dropout: 0.0,
            epochs: 10,
            max_updates: 0,
            seed: 1234,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(0.0..1.0).contains(&self.word_dropout) || !(0.0..1.0).contains(&self.layer_dropout) {
            return bad("dropout probabilities must lie in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip norm must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps.is_nan() || self.eps <= 0.0 {
            return bad("Adadelta needs rho in [0, 1) and eps > 0");
        }
        if self.valid_interval == 0 || self.checkpoint_interval == 0 {
            return bad("validation and checkpoint intervals must be at least 1");
        }
        if self.batch_size == 0 || self.max_len == 0 || self.epochs == 0 || self.threads == 0 {
            return bad("batch size, max length, epochs and threads must be at least 1");
        }
        Ok(())
    }
}

/// One aligned training example. Both sides end with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub source: IdMatrix,
    pub target: Vec<u32>,
}

impl Pair {
    /// Token count of the longer side, EOS excluded.
    pub fn length(&self) -> usize {
        self.source.len().max(self.target.len()).saturating_sub(1)
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Contract(format!("clip norm {max_norm} is not positive")));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(f);
        }
    }
    Ok(norm)
}

pub fn adadelta_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.sq_grad.len() {
        return Err(Error::Contract(
            "parameter, gradient and optimizer state counts differ".into(),
        ));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() || state.sq_grad[i].shape() != p.shape() {
            return Err(Error::Shape {
                op: "adadelta_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let eg = state.sq_grad[i].data_mut();
        let ed = state.sq_update[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
            let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gj;
            ed[j] = rho * ed[j] + (1.0 - rho) * delta * delta;
            *x += delta;
        }
    }
    Ok(())
}

/// Replaces whole source positions by PAD in every factor column. The EOS row is kept.
pub fn word_dropout(ids: &IdMatrix, probability: f64, rng: &mut ChaCha8Rng) -> IdMatrix {
    let mut out = ids.clone();
    if probability <= 0.0 {
        return out;
    }
    for j in 0..out.len() {
        let row = out.row_mut(j);
        if row[0] == EOS {
            continue;
        }
        if rng.gen::<f64>() < probability {
            row.fill(PAD);
        }
    }
    out
}

/// Target-side word dropout over decoder inputs; EOS (also the start symbol) is kept.
pub fn word_dropout_ids(ids: &[u32], probability: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if probability <= 0.0 {
        return ids.to_vec();
    }
    ids.iter()
        .map(|&id| {
            if id != EOS && rng.gen::<f64>() < probability {
                PAD
            } else {
                id
            }
        })
        .collect()
}

/// Loss and parameter gradients of one pair, with dropout driven by `seed`.
pub fn sentence_gradients(model: &Model, pair: &Pair, cfg: &TrainConfig, seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = word_dropout(&pair.source, cfg.word_dropout, &mut rng);
    let inputs = word_dropout_ids(&decoder_inputs(&pair.target), cfg.word_dropout, &mut rng);
    let mut tape = Tape::new(model.params());
    let mut drop = LayerDropout {
        probability: cfg.layer_dropout,
        rng: &mut rng,
    };
    let loss = model.loss_on(&mut tape, &source, &inputs, &pair.target, Some(&mut drop))?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.into_params()))
}

type LossAndGrads = (f64, Vec<Tensor>);

/// Mean loss and mean gradient over a minibatch. Per-sentence gradients are
/// summed in batch order whatever the thread count, so results do not
/// depend on `cfg.threads`.
pub fn batch_gradients(model: &Model, batch: &[&Pair], seeds: &[u64], cfg: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() || seeds.len() != batch.len() {
        return Err(Error::Contract("empty minibatch or seed count mismatch".into()));
    }
    let threads = cfg.threads.min(batch.len());
    let per_sentence: Vec<LossAndGrads> = if threads <= 1 {
        batch
            .iter()
            .zip(seeds)
            .map(|(p, &s)| sentence_gradients(model, p, cfg, s))
            .collect::<Result<_>>()?
    } else {
        let chunk = batch.len().div_ceil(threads);
        let parts: Vec<Result<Vec<LossAndGrads>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .zip(seeds.chunks(chunk))
                .map(|(pairs, seeds)| {
                    scope.spawn(move || {
                        pairs
                            .iter()
                            .zip(seeds)
                            .map(|(p, &s)| sentence_gradients(model, p, cfg, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(batch.len());
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let mut iter = per_sentence.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            acc.add_assign(x);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.scale(scale);
    }
    Ok((loss * scale, grads))
}

/// Minibatches for one epoch: shuffle, stable-sort into length buckets,
/// cut into batches, shuffle the batches. Every index appears exactly once.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i] / BUCKET_WIDTH);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// One validation record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub updates: usize,
    pub train_loss: f64,
    pub dev_perplexity: f64,
    pub best: bool,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{}",
            self.updates,
            self.train_loss,
            self.dev_perplexity,
            if self.best { "*" } else { "" }
        )
    }
}

/// Where checkpoints and the log go.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub vocabs: Option<&'a Vocabularies>,
}

impl TrainOutput<'_> {
    pub fn iteration_path(&self, updates: usize) -> PathBuf {
        self.dir.join(format!("model.iter{updates}.ckpt"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("model.best.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train.log")
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    pub updates: usize,
    pub best_perplexity: f64,
    pub model: Model,
    pub best_model: Model,
    /// Training pairs left after length filtering.
    pub kept: usize,
}

/// Trains `model` in place on `train`, validating on `dev`. A final
/// validation and checkpoint are taken when the last update did not fall on
/// an interval.
pub fn train(
    mut model: Model,
    train: &[Pair],
    dev: &[Pair],
    cfg: &TrainConfig,
    output: Option<TrainOutput<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let kept: Vec<&Pair> = train.iter().filter(|p| p.length() <= cfg.max_len).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no training pairs are within the maximum length {}",
            cfg.max_len
        )));
    }
    if dev.is_empty() {
        return Err(Error::Config("the dev corpus is empty".into()));
    }
    let mut log_file = match output {
        Some(out) => {
            fs::create_dir_all(out.dir)?;
            Some(fs::File::create(out.log_path())?)
        }
        None => None,
    };
    let lengths: Vec<usize> = kept.iter().map(|p| p.length()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.params());
    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_model = model.clone();
    let mut updates = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut last_valid = 0;
    let mut last_ckpt = 0;

    let mut validate = |model: &Model, updates: usize, loss_sum: f64, loss_count: usize| -> Result<()> {
        let ppl = perplexity(&[model], dev)?;
        let is_best = ppl < best;
        if is_best {
            best = ppl;
            best_model = model.clone();
            if let Some(out) = output {
                save_checkpoint(&out.best_path(), model, out.vocabs)?;
            }
        }
        let entry = LogEntry {
            updates,
            train_loss: loss_sum / loss_count.max(1) as f64,
            dev_perplexity: ppl,
            best: is_best,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{entry}")?;
        }
        log.push(entry);
        Ok(())
    };

    'epochs: for _ in 0..cfg.epochs {
        for batch in epoch_batches(&lengths, cfg.batch_size, &mut rng) {
            let pairs: Vec<&Pair> = batch.iter().map(|&i| kept[i]).collect();
            let seeds: Vec<u64> = pairs.iter().map(|_| rng.gen()).collect();
            let (loss, mut grads) = batch_gradients(&model, &pairs, &seeds, cfg)?;
            clip_gradients(&mut grads, cfg.clip_norm)?;
            adadelta_step(model.params_mut(), &grads, &mut state, cfg.rho, cfg.eps)?;
            updates += 1;
            loss_sum += loss;
            loss_count += 1;
            if updates % cfg.valid_interval == 0 {
                validate(&model, updates, loss_sum, loss_count)?;
                loss_sum = 0.0;
                loss_count = 0;
                last_valid = updates;
            }
            if updates % cfg.checkpoint_interval == 0 {
                if let Some(out) = output {
                    save_checkpoint(&out.iteration_path(updates), &model, out.vocabs)?;
                }
                last_ckpt = updates;
            }
            if cfg.max_updates > 0 && updates >= cfg.max_updates {
                break 'epochs;
            }
        }
    }
    if last_valid != updates {
        validate(&model, updates, loss_sum, loss_count)?;
    }
    if last_ckpt != updates {
        if let Some(out) = output {
            save_checkpoint(&out.iteration_path(updates), &model, out.vocabs)?;
        }
    }
    Ok(TrainReport {
        log,
        updates,
        best_perplexity: best,
        model,
        best_model,
        kept: kept.len(),
    })
}

/// Fails unless all models share one configuration (seeds may differ).
pub fn check_compatible(models: &[&Model]) -> Result<()> {
    let Some(first) = models.first() else {
        return Err(Error::Contract("an ensemble needs at least one model".into()));
    };
    let a = first.config();
    for m in &models[1..] {
        let b = m.config();
        if a.scheme != b.scheme
            || a.hidden != b.hidden
            || a.src_vocab_sizes != b.src_vocab_sizes
            || a.tgt_vocab_size != b.tgt_vocab_size
        {
            return Err(Error::Config(
                "ensemble members have different model configurations".into(),
            ));
        }
    }
    Ok(())
}

/// Log of the mean of the members' softmax distributions, from their logits.
pub fn ensemble_combine(logits: &[Vec<f64>]) -> Vec<f64> {
    if logits.len() == 1 {
        return log_softmax_vec(&logits[0]);
    }
    let logp: Vec<Vec<f64>> = logits.iter().map(|l| log_softmax_vec(l)).collect();
    let k = logp.len() as f64;
    (0..logp[0].len())
        .map(|w| {
            let max = logp.iter().map(|l| l[w]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            let s: f64 = logp.iter().map(|l| (l[w] - max).exp()).sum();
            max + (s.ln() - k.ln())
        })
        .collect()
}

/// Teacher-forced per-step log-probabilities of an ensemble over `target`.
pub fn ensemble_logprob(models: &[&Model], source: &IdMatrix, target: &[u32]) -> Result<Vec<Vec<f64>>> {
    check_compatible(models)?;
    let inputs = decoder_inputs(target);
    let mut per_model: Vec<Vec<Vec<f64>>> = Vec::with_capacity(models.len());
    for m in models {
        let mut tape = Tape::new(m.params());
        let enc = m.encode_on(&mut tape, source, None)?;
        let mut s = m.initial_state_on(&mut tape, &enc)?;
        let mut steps = Vec::with_capacity(inputs.len());
        for &y in &inputs {
            let step = m.decode_step_on(&mut tape, &enc, y, s, None)?;
            steps.push(tape.value(step.logits).data().to_vec());
            s = step.state;
        }
        per_model.push(steps);
    }
    Ok((0..inputs.len())
        .map(|i| {
            let logits: Vec<Vec<f64>> = per_model.iter().map(|m| m[i].clone()).collect();
            ensemble_combine(&logits)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::softmax_vec;
    use crate::textio::{FeatureScheme, FeatureSpec};
    use proptest::prelude::*;

    fn tensors(values: &[&[f64]]) -> Vec<Tensor> {
        values.iter().map(|v| Tensor::vector(v.to_vec())).collect()
    }

    #[test]
    fn clipping_examples() {
        let mut g = tensors(&[&[1.2, 0.0], &[1.6]]);
        let norm = clip_gradients(&mut g, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-15);
        assert_eq!(g[0].data(), [0.6, 0.0]);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);

        let mut g = tensors(&[&[0.3, 0.4]]);
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g[0].data(), [0.3, 0.4]);

        assert!(clip_gradients(&mut tensors(&[&[f64::NAN]]), 1.0).is_err());
        assert!(clip_gradients(&mut tensors(&[&[1.0]]), 0.0).is_err());
    }

    #[test]
    fn adadelta_first_step_by_hand() {
        let g = 0.7;
        let mut p = tensors(&[&[2.0]]);
        let mut st = OptimizerState::new(&p);
        adadelta_step(&mut p, &tensors(&[&[g]]), &mut st, 0.95, 1e-6).unwrap();
        let delta = -(1e-6f64).sqrt() * g / (0.05 * g * g + 1e-6f64).sqrt();
        assert!((p[0].data()[0] - (2.0 + delta)).abs() < 1e-15);
        assert!((st.sq_grad[0].data()[0] - 0.05 * g * g).abs() < 1e-15);
        assert!((st.sq_update[0].data()[0] - 0.05 * delta * delta).abs() < 1e-18);
    }

    #[test]
    fn adadelta_zero_gradient_decays_state() {
        let mut p = tensors(&[&[1.0, -1.0]]);
        let mut st = OptimizerState {
            sq_grad: tensors(&[&[0.4, 0.2]]),
            sq_update: tensors(&[&[0.1, 0.3]]),
        };
        adadelta_step(&mut p, &tensors(&[&[0.0, 0.0]]), &mut st, 0.95, 1e-6).unwrap();
        assert_eq!(p[0].data(), [1.0, -1.0]);
        assert!((st.sq_grad[0].data()[0] - 0.38).abs() < 1e-15);
        assert!((st.sq_update[0].data()[1] - 0.285).abs() < 1e-15);
    }

    #[test]
    fn adadelta_minimizes_a_quadratic() {
        let mut p = tensors(&[&[3.0]]);
        let mut st = OptimizerState::new(&p);
        let mut last = 3.0f64;
        for _ in 0..10_000 {
            let g = tensors(&[&[2.0 * p[0].data()[0]]]);
            adadelta_step(&mut p, &g, &mut st, 0.95, 1e-6).unwrap();
            let x = p[0].data()[0].abs();
            assert!(x <= last + 1e-12);
            last = x;
        }
        assert!(last < 1e-2, "{last}");
    }

    #[test]
    fn adadelta_rejects_shape_mismatch() {
        let mut p = tensors(&[&[1.0, 2.0]]);
        let mut st = OptimizerState::new(&p);
        assert!(adadelta_step(&mut p, &tensors(&[&[1.0]]), &mut st, 0.95, 1e-6).is_err());
    }

    #[test]
    fn word_dropout_rates_and_whole_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<u32>> = (0..10_000)
            .map(|i| vec![3 + i % 7, 4, 5])
            .chain([vec![EOS; 3]])
            .collect();
        let m = IdMatrix::from_rows(&rows).unwrap();
        assert_eq!(word_dropout(&m, 0.0, &mut rng), m);
        let d = word_dropout(&m, 0.5, &mut rng);
        let dropped = d.rows().filter(|r| r.iter().all(|&x| x == PAD)).count();
        assert!(d
            .rows()
            .all(|r| r.iter().all(|&x| x == PAD) || r.iter().all(|&x| x != PAD)));
        assert!((dropped as f64 / 10_000.0 - 0.5).abs() < 0.02, "{dropped}");
        assert_eq!(d.row(10_000), [EOS; 3]);

        let ids: Vec<u32> = std::iter::once(EOS).chain((0..1000).map(|i| 3 + i % 5)).collect();
        let out = word_dropout_ids(&ids, 0.99, &mut rng);
        assert_eq!(out[0], EOS);
    }

    #[test]
    fn word_dropout_is_seeded() {
        let m = IdMatrix::from_rows(&vec![vec![4, 4]; 50]).unwrap();
        let a = word_dropout(&m, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        let b = word_dropout(&m, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                word_dropout: 1.0,
                ..Default::default()
            },
            TrainConfig {
                clip_norm: 0.0,
                ..Default::default()
            },
            TrainConfig {
                valid_interval: 0,
                ..Default::default()
            },
            TrainConfig {
                layer_dropout: -0.1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn ensemble_combination_examples() {
        let to_logits = |p: &[f64]| p.iter().map(|x: &f64| x.ln()).collect::<Vec<_>>();
        let e = ensemble_combine(&[to_logits(&[0.8, 0.2]), to_logits(&[0.2, 0.8])]);
        assert!((e[0].exp() - 0.5).abs() < 1e-15 && (e[1].exp() - 0.5).abs() < 1e-15);
        let l = vec![0.3, -1.2, 2.0, 0.0];
        let single = ensemble_combine(std::slice::from_ref(&l));
        assert_eq!(ensemble_combine(&vec![l.clone(); 4]), single);
        assert_eq!(ensemble_combine(&vec![l; 3]), single);
    }

    fn tiny_model(seed: u64, ky: usize) -> Model {
        let scheme = FeatureScheme::new(vec![FeatureSpec::new("word", 4, 10), FeatureSpec::new("pos", 2, 10)]).unwrap();
        Model::with_init_scale(
            ModelConfig {
                scheme,
                hidden: 6,
                src_vocab_sizes: vec![10, 6],
                tgt_vocab_size: ky,
                seed,
            },
            0.3,
        )
        .unwrap()
    }

    fn pair(src: &[(u32, u32)], tgt: &[u32]) -> Pair {
        let rows: Vec<Vec<u32>> = src.iter().map(|&(a, b)| vec![a, b]).chain([vec![EOS, EOS]]).collect();
        Pair {
            source: IdMatrix::from_rows(&rows).unwrap(),
            target: tgt.iter().copied().chain([EOS]).collect(),
        }
    }

    #[test]
    fn ensemble_logprob_properties() {
        let a = tiny_model(1, 8);
        let b = tiny_model(2, 8);
        let p = pair(&[(4, 3), (5, 4)], &[3, 4, 5]);
        let single = ensemble_logprob(&[&a], &p.source, &p.target).unwrap();
        let four = ensemble_logprob(&[&a, &a, &a, &a], &p.source, &p.target).unwrap();
        for (x, y) in single.iter().flatten().zip(four.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        for step in ensemble_logprob(&[&a, &b], &p.source, &p.target).unwrap() {
            assert!((step.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(ensemble_logprob(&[&a, &tiny_model(1, 9)], &p.source, &p.target).is_err());
    }

    #[test]
    fn batch_gradients_are_thread_count_independent() {
        let m = tiny_model(3, 8);
        let pairs: Vec<Pair> = (0..7u32)
            .map(|i| pair(&[(3 + i, 3), (4, 3 + i % 3)], &[3 + i % 5, 4]))
            .collect();
        let refs: Vec<&Pair> = pairs.iter().collect();
        let seeds: Vec<u64> = (0..7).collect();
        let mut cfg = TrainConfig {
            word_dropout: 0.2,
            layer_dropout: 0.2,
            ..Default::default()
        };
        let serial = batch_gradients(&m, &refs, &seeds, &cfg).unwrap();
        cfg.threads = 3;
        let parallel = batch_gradients(&m, &refs, &seeds, &cfg).unwrap();
        assert_eq!(serial.0.to_bits(), parallel.0.to_bits());
        assert_eq!(serial.1, parallel.1);
    }

    #[test]
    fn repeated_pair_loss_decreases() {
        for seed in 0..3 {
            let p = pair(&[(4, 3), (6, 4), (7, 5)], &[5, 3, 6]);
            let mut m = tiny_model(seed, 8);
            let mut st = OptimizerState::new(m.params());
            let cfg = TrainConfig::default();
            let mut last = f64::INFINITY;
            for _ in 0..50 {
                let (loss, mut g) = batch_gradients(&m, &[&p], &[0], &cfg).unwrap();
                assert!(loss < last, "seed {seed}: {loss} >= {last}");
                last = loss;
                clip_gradients(&mut g, 1.0).unwrap();
                adadelta_step(m.params_mut(), &g, &mut st, 0.95, 1e-6).unwrap();
            }
        }
    }

    #[test]
    fn untrained_uniform_model_has_vocab_perplexity() {
        let scheme = FeatureScheme::word_only(3, 10).unwrap();
        let z = Model::zeros(ModelConfig {
            scheme,
            hidden: 2,
            src_vocab_sizes: vec![10],
            tgt_vocab_size: 12,
            seed: 0,
        })
        .unwrap();
        let rows = |ids: &[u32]| IdMatrix::from_rows(&ids.iter().map(|&i| vec![i]).collect::<Vec<_>>()).unwrap();
        let dev = vec![
            Pair {
                source: rows(&[4, 5, EOS]),
                target: vec![3, 4, EOS],
            },
            Pair {
                source: rows(&[6, EOS]),
                target: vec![EOS],
            },
        ];
        assert!((perplexity(&[&z], &dev).unwrap() - 12.0).abs() < 1e-9);
    }

    fn toy_corpus() -> Vec<Pair> {
        (0..24u32)
            .map(|i| {
                let a = 3 + i % 7;
                let b = 3 + (i / 7) % 3;
                pair(&[(a, 3 + i % 2), (b, 4)], &[a % 8, b])
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            batch_size: 5,
            valid_interval: 4,
            checkpoint_interval: 6,
            max_updates: 13,
            word_dropout: 0.1,
            layer_dropout: 0.1,
            seed: 9,
            ..Default::default()
        };
        let data = toy_corpus();
        let out = TrainOutput {
            dir: dir.path(),
            vocabs: None,
        };
        let a = train(tiny_model(4, 8), &data, &data[..6], &cfg, Some(out)).unwrap();
        let b = train(tiny_model(4, 8), &data, &data[..6], &cfg, None).unwrap();
        assert_eq!(a.updates, 13);
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.iter().map(|e| e.updates).collect::<Vec<_>>(), [4, 8, 12, 13]);
        assert!(a.log[0].best);
        for n in [6, 12, 13] {
            assert!(out.iteration_path(n).exists(), "{n}");
        }
        assert!(!out.iteration_path(4).exists());
        assert!(out.best_path().exists());
        let log = fs::read_to_string(out.log_path()).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().next().unwrap().split('\t').count() == 4);
    }

    #[test]
    fn training_reduces_dev_perplexity() {
        let cfg = TrainConfig {
            batch_size: 4,
            valid_interval: 30,
            max_updates: 120,
            seed: 2,
            ..Default::default()
        };
        let data = toy_corpus();
        let start = perplexity(&[&tiny_model(5, 8)], &data).unwrap();
        let r = train(tiny_model(5, 8), &data, &data, &cfg, None).unwrap();
        assert!(r.best_perplexity < 0.5 * start, "{start} -> {}", r.best_perplexity);
    }

    #[test]
    fn over_length_pairs_are_skipped() {
        let cfg = TrainConfig {
            max_len: 1,
            max_updates: 1,
            ..Default::default()
        };
        let data = toy_corpus();
        assert!(matches!(
            train(tiny_model(0, 8), &data, &data, &cfg, None),
            Err(Error::Config(_))
        ));
        let mut mixed = data.clone();
        mixed.push(pair(&[(3, 3)], &[4]));
        let r = train(tiny_model(0, 8), &mixed, &data, &cfg, None).unwrap();
        assert_eq!(r.kept, 1);
    }

    #[test]
    fn trained_model_is_order_sensitive() {
        let cfg = TrainConfig {
            batch_size: 4,
            valid_interval: 100,
            max_updates: 150,
            seed: 3,
            ..Default::default()
        };
        let data = toy_corpus();
        let r = train(tiny_model(6, 8), &data, &data, &cfg, None).unwrap();
        let p = &data[3];
        let n = p.source.len();
        let mut order: Vec<usize> = (0..n - 1).rev().collect();
        order.push(n - 1);
        let shuffled = p.source.permuted(&order);
        let a = r.model.sentence_loss(&p.source, &p.target).unwrap();
        let b = r.model.sentence_loss(&shuffled, &p.target).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    proptest! {
        #[test]
        fn epoch_visits_every_pair_once(lengths in prop::collection::vec(0usize..30, 0..200), batch in 1usize..20, seed in any::<u64>()) {
            let batches = epoch_batches(&lengths, batch, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
        }

        #[test]
        fn clipping_never_increases_norm(values in prop::collection::vec(-10.0f64..10.0, 1..40), max in 0.01f64..5.0) {
            let mut g = vec![Tensor::vector(values)];
            let before = global_norm(&g);
            clip_gradients(&mut g, max).unwrap();
            let after = global_norm(&g);
            prop_assert!(after <= before + 1e-12);
            prop_assert!((after - before.min(max)).abs() < 1e-12);
        }

        #[test]
        fn adadelta_update_is_bounded(g in -1e3f64..1e3, ed in 0.0f64..1.0, eg in 0.0f64..1.0) {
            let mut p = vec![Tensor::vector(vec![0.0])];
            let mut st = OptimizerState { sq_grad: vec![Tensor::vector(vec![eg])], sq_update: vec![Tensor::vector(vec![ed])] };
            adadelta_step(&mut p, &[Tensor::vector(vec![g])], &mut st, 0.0, 1e-6).unwrap();
            let bound = ((ed + 1e-6) / 1e-6).sqrt();
            prop_assert!(p[0].data()[0].abs() <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn ensemble_is_a_distribution(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            let e = ensemble_combine(&[a.clone(), b.clone()]);
            let (pa, pb) = (softmax_vec(&a), softmax_vec(&b));
            for w in 0..4 {
                prop_assert!((e[w].exp() - (pa[w] + pb[w]) / 2.0).abs() < 1e-12);
            }
        }
    }
}
