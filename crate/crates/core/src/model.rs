//! Factored attentional encoder-decoder.
//!
//! Each source position is embedded by looking up one row per feature and
//! concatenating them (total width `m`, fixed by the scheme). A forward and
//! a backward GRU read the embeddings; their states are concatenated into
//! annotations of width `2n`. The decoder is a single GRU whose input is the
//! previous target embedding and an attention context computed from the
//! previous decoder state; logits come from an affine map of
//! `[state ; previous embedding ; context]`.
//!
//! Shapes of everything after the source embeddings depend only on
//! `(m, n, K_y)`, so changing the feature split never changes the rest of
//! the network.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::textio::{FeatureScheme, FeatureSpec, IdMatrix, Vocabulary, EOS};

/// First decoder input. The decoder has no separate start symbol; EOS doubles as one.
pub const START: u32 = EOS;

pub const DEFAULT_INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub scheme: FeatureScheme,
    /// Hidden size `n`.
    pub hidden: usize,
    /// Vocabulary size `K_k` per source feature.
    pub src_vocab_sizes: Vec<usize>,
    /// Target vocabulary size `K_y`.
    pub tgt_vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.tgt_vocab_size == 0 {
            return Err(Error::Config(
                "hidden and target vocabulary sizes must be positive".into(),
            ));
        }
        if self.src_vocab_sizes.len() != self.scheme.len() {
            return Err(Error::Config(format!(
                "{} source vocabulary sizes for {} features",
                self.src_vocab_sizes.len(),
                self.scheme.len()
            )));
        }
        if self.src_vocab_sizes.contains(&0) {
            return Err(Error::Config("source vocabulary sizes must be positive".into()));
        }
        Ok(())
    }

    /// Embedding width `m`.
    pub fn embed(&self) -> usize {
        self.scheme.total_embed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Gru {
    w_z: usize,
    w_r: usize,
    w_h: usize,
    u_z: usize,
    u_r: usize,
    u_h: usize,
    b_z: usize,
    b_r: usize,
    b_h: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    src_embed: Vec<usize>,
    enc_fwd: Gru,
    enc_bwd: Gru,
    init_w: usize,
    init_b: usize,
    att_w: usize,
    att_u: usize,
    att_v: usize,
    tgt_embed: usize,
    dec: Gru,
    out_w: usize,
    out_b: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, n: usize) -> Gru {
        let mut w = |g: &str, shape: Vec<usize>| self.add(format!("{prefix}.{g}"), shape);
        Gru {
            w_z: w("W_z", vec![n, input]),
            w_r: w("W_r", vec![n, input]),
            w_h: w("W_h", vec![n, input]),
            u_z: w("U_z", vec![n, n]),
            u_r: w("U_r", vec![n, n]),
            u_h: w("U_h", vec![n, n]),
            b_z: w("b_z", vec![n]),
            b_r: w("b_r", vec![n]),
            b_h: w("b_h", vec![n]),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<String>, Vec<Vec<usize>>) {
    let n = config.hidden;
    let m = config.embed();
    let ky = config.tgt_vocab_size;
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let src_embed = config
        .scheme
        .features()
        .iter()
        .zip(&config.src_vocab_sizes)
        .map(|(f, &k)| b.add(format!("src_embed.{}", f.name), vec![k, f.embed_size]))
        .collect();
    let enc_fwd = b.gru("enc_fwd", m, n);
    let enc_bwd = b.gru("enc_bwd", m, n);
    let init_w = b.add("init.W".into(), vec![n, n]);
    let init_b = b.add("init.b".into(), vec![n]);
    let att_w = b.add("att.W".into(), vec![n, n]);
    let att_u = b.add("att.U".into(), vec![2 * n, n]);
    let att_v = b.add("att.v".into(), vec![n]);
    let tgt_embed = b.add("tgt_embed".into(), vec![ky, m]);
    let dec = b.gru("dec", m + 2 * n, n);
    let out_w = b.add("out.W".into(), vec![ky, n + m + 2 * n]);
    let out_b = b.add("out.b".into(), vec![ky]);
    let layout = Layout {
        src_embed,
        enc_fwd,
        enc_bwd,
        init_w,
        init_b,
        att_w,
        att_u,
        att_v,
        tgt_embed,
        dec,
        out_w,
        out_b,
    };
    (layout, b.names, b.shapes)
}

/// Inverted dropout masks for the embedding output, the annotations and the
/// pre-output decoder state.
pub struct LayerDropout<'r> {
    pub probability: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl LayerDropout<'_> {
    fn apply(&mut self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        if self.probability <= 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - self.probability);
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < self.probability {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = tape.leaf(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

fn maybe_drop(drop: &mut Option<&mut LayerDropout<'_>>, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
    match drop {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Encoder output on a tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[len, 2n]` annotation matrix.
    pub annotations: NodeId,
    /// Annotations projected for attention, `[len, n]`.
    pub projected: NodeId,
    /// Forward and backward states per position.
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
    pub len: usize,
    ones: NodeId,
    neg_ones: NodeId,
}

/// One decoder step on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub logits: NodeId,
    pub state: NodeId,
    pub alpha: NodeId,
    pub context: NodeId,
}

/// Encoder annotations as plain values, one row per source position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderAnnotations {
    pub matrix: Tensor,
}

impl EncoderAnnotations {
    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder state as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub context: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Weights uniform in `[-0.08, 0.08]` from the config seed, biases zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_init_scale(config, DEFAULT_INIT_SCALE)
    }

    pub fn with_init_scale(config: ModelConfig, scale: f64) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                if is_bias(name) || scale == 0.0 {
                    Tensor::zeros(shape)
                } else {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
                    Tensor::new(shape.clone(), data).expect("layout shapes are consistent")
                }
            })
            .collect();
        Ok(Model {
            config,
            layout,
            names,
            params,
        })
    }

    /// Same config with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::with_init_scale(config, 0.0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Indices of the source feature embedding matrices.
    pub fn source_embedding_indices(&self) -> &[usize] {
        &self.layout.src_embed
    }

    /// `(name, shape)` of every parameter outside the source embeddings.
    pub fn downstream_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.params)
            .enumerate()
            .filter(|(i, _)| !self.layout.src_embed.contains(i))
            .map(|(_, (n, p))| (n.clone(), p.shape().to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_src(&self, ids: &[u32]) -> Result<()> {
        if ids.len() != self.config.scheme.len() {
            return Err(Error::FactorCount {
                token: 0,
                expected: self.config.scheme.len(),
                found: ids.len(),
            });
        }
        for (k, (&id, &size)) in ids.iter().zip(&self.config.src_vocab_sizes).enumerate() {
            if id as usize >= size {
                return Err(Error::Lookup {
                    what: format!("source feature {:?}", self.config.scheme.features()[k].name),
                    id: id as usize,
                    size,
                });
            }
        }
        Ok(())
    }

    /// Concatenated per-feature embeddings of one source position.
    pub fn factored_embed_on(&self, tape: &mut Tape<'_>, ids: &[u32]) -> Result<NodeId> {
        self.check_src(ids)?;
        let mut parts = Vec::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let e = tape.param(self.layout.src_embed[k]);
            parts.push(tape.lookup(e, id as usize)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts)
    }

    pub fn factored_embed(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let e = self.factored_embed_on(&mut tape, ids)?;
        Ok(tape.value(e).data().to_vec())
    }

    fn affine3(&self, tape: &mut Tape<'_>, w: usize, x: NodeId, u: usize, h: NodeId, b: usize) -> Result<NodeId> {
        let w = tape.param(w);
        let u = tape.param(u);
        let b = tape.param(b);
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    fn gru_step(
        &self,
        tape: &mut Tape<'_>,
        g: Gru,
        x: NodeId,
        h: NodeId,
        ones: NodeId,
        neg_ones: NodeId,
    ) -> Result<NodeId> {
        let z_pre = self.affine3(tape, g.w_z, x, g.u_z, h, g.b_z)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = self.affine3(tape, g.w_r, x, g.u_r, h, g.b_r)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let c_pre = self.affine3(tape, g.w_h, x, g.u_h, rh, g.b_h)?;
        let cand = tape.tanh(c_pre);
        // h' = (1 - z) * h + z * cand
        let neg_z = tape.mul(neg_ones, z)?;
        let keep = tape.add(ones, neg_z)?;
        let old = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        tape.add(old, new)
    }

    pub fn encode_on(
        &self,
        tape: &mut Tape<'_>,
        src: &IdMatrix,
        mut drop: Option<&mut LayerDropout<'_>>,
    ) -> Result<Encoded> {
        let len = src.len();
        if len == 0 {
            return Err(Error::Contract("cannot encode an empty source".into()));
        }
        let n = self.config.hidden;
        let ones = tape.leaf(Tensor::filled(&[n], 1.0));
        let neg_ones = tape.leaf(Tensor::filled(&[n], -1.0));
        let mut inputs = Vec::with_capacity(len);
        for row in src.rows() {
            let e = self.factored_embed_on(tape, row)?;
            inputs.push(maybe_drop(&mut drop, tape, e)?);
        }
        let zero = tape.leaf(Tensor::zeros(&[n]));
        let mut forward = Vec::with_capacity(len);
        let mut h = zero;
        for &x in &inputs {
            h = self.gru_step(tape, self.layout.enc_fwd, x, h, ones, neg_ones)?;
            forward.push(h);
        }
        let mut backward = vec![zero; len];
        let mut h = zero;
        for j in (0..len).rev() {
            h = self.gru_step(tape, self.layout.enc_bwd, inputs[j], h, ones, neg_ones)?;
            backward[j] = h;
        }
        let mut rows = Vec::with_capacity(len);
        for j in 0..len {
            let hj = tape.concat(&[forward[j], backward[j]])?;
            rows.push(maybe_drop(&mut drop, tape, hj)?);
        }
        let annotations = tape.stack(&rows)?;
        let att_u = tape.param(self.layout.att_u);
        let projected = tape.matmul(annotations, att_u)?;
        Ok(Encoded {
            annotations,
            projected,
            forward,
            backward,
            len,
            ones,
            neg_ones,
        })
    }

    pub fn encode(&self, src: &IdMatrix) -> Result<EncoderAnnotations> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, src, None)?;
        Ok(EncoderAnnotations {
            matrix: tape.value(enc.annotations).clone(),
        })
    }

    /// `s_0 = tanh(W_init · backward_1 + b_init)`.
    pub fn initial_state_on(&self, tape: &mut Tape<'_>, enc: &Encoded) -> Result<NodeId> {
        let w = tape.param(self.layout.init_w);
        let b = tape.param(self.layout.init_b);
        let p = tape.matmul(w, enc.backward[0])?;
        let p = tape.add(p, b)?;
        Ok(tape.tanh(p))
    }

    /// Additive attention from the previous decoder state. Returns `(alpha, context)`.
    pub fn attend_on(&self, tape: &mut Tape<'_>, enc: &Encoded, s_prev: NodeId) -> Result<(NodeId, NodeId)> {
        let w = tape.param(self.layout.att_w);
        let v = tape.param(self.layout.att_v);
        let ws = tape.matmul(w, s_prev)?;
        let pre = tape.add(enc.projected, ws)?;
        let act = tape.tanh(pre);
        let scores = tape.matmul(act, v)?;
        let alpha = tape.softmax(scores)?;
        let context = tape.matmul(alpha, enc.annotations)?;
        Ok((alpha, context))
    }

    pub fn decode_step_on(
        &self,
        tape: &mut Tape<'_>,
        enc: &Encoded,
        y_prev: u32,
        s_prev: NodeId,
        mut drop: Option<&mut LayerDropout<'_>>,
    ) -> Result<Step> {
        if y_prev as usize >= self.config.tgt_vocab_size {
            return Err(Error::Lookup {
                what: "target word".into(),
                id: y_prev as usize,
                size: self.config.tgt_vocab_size,
            });
        }
        let te = tape.param(self.layout.tgt_embed);
        let emb = tape.lookup(te, y_prev as usize)?;
        let (alpha, context) = self.attend_on(tape, enc, s_prev)?;
        let x = tape.concat(&[emb, context])?;
        let state = self.gru_step(tape, self.layout.dec, x, s_prev, enc.ones, enc.neg_ones)?;
        let s_out = maybe_drop(&mut drop, tape, state)?;
        let features = tape.concat(&[s_out, emb, context])?;
        let w = tape.param(self.layout.out_w);
        let b = tape.param(self.layout.out_b);
        let logits = tape.matmul(w, features)?;
        let logits = tape.add(logits, b)?;
        Ok(Step {
            logits,
            state,
            alpha,
            context,
        })
    }

    /// Teacher-forced summed negative log-likelihood. `inputs[i]` is the
    /// decoder input for step `i` (normally `labels` shifted right behind
    /// [`START`]); `labels` must end with EOS.
    pub fn loss_on(
        &self,
        tape: &mut Tape<'_>,
        src: &IdMatrix,
        inputs: &[u32],
        labels: &[u32],
        mut drop: Option<&mut LayerDropout<'_>>,
    ) -> Result<NodeId> {
        if labels.last() != Some(&EOS) || inputs.len() != labels.len() {
            return Err(Error::Contract("target must end with EOS and match its inputs".into()));
        }
        let enc = self.encode_on(tape, src, drop.as_deref_mut())?;
        let mut s = self.initial_state_on(tape, &enc)?;
        let mut losses = Vec::with_capacity(labels.len());
        for (&y_prev, &y) in inputs.iter().zip(labels) {
            if y as usize >= self.config.tgt_vocab_size {
                return Err(Error::Lookup {
                    what: "target word".into(),
                    id: y as usize,
                    size: self.config.tgt_vocab_size,
                });
            }
            let step = self.decode_step_on(tape, &enc, y_prev, s, drop.as_deref_mut())?;
            losses.push(tape.softmax_cross_entropy(step.logits, y as usize)?);
            s = step.state;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("sentence loss".into()));
        }
        Ok(total)
    }

    pub fn sentence_loss(&self, src: &IdMatrix, target: &[u32]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let l = self.loss_on(&mut tape, src, &decoder_inputs(target), target, None)?;
        Ok(tape.value(l).item())
    }

    /// Loss and gradients for every parameter (same order as [`Model::params`]).
    pub fn loss_and_gradients(&self, src: &IdMatrix, target: &[u32]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new(&self.params);
        let l = self.loss_on(&mut tape, src, &decoder_inputs(target), target, None)?;
        let g = tape.backward(l)?;
        Ok((tape.value(l).item(), g.into_params()))
    }

    /// Plain-value attention given an annotation matrix.
    pub fn attend(&self, s_prev: &[f64], annotations: &EncoderAnnotations) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encoded_from(&mut tape, annotations)?;
        let s = tape.leaf(Tensor::vector(s_prev.to_vec()));
        let (alpha, c) = self.attend_on(&mut tape, &enc, s)?;
        Ok((tape.value(alpha).data().to_vec(), tape.value(c).data().to_vec()))
    }

    /// Initial decoder state for plain-value decoding.
    pub fn initial_state(&self, annotations: &EncoderAnnotations) -> Result<DecoderState> {
        let n = self.config.hidden;
        let mut tape = Tape::new(&self.params);
        let enc = self.encoded_from(&mut tape, annotations)?;
        let s = self.initial_state_on(&mut tape, &enc)?;
        Ok(DecoderState {
            hidden: tape.value(s).data().to_vec(),
            context: vec![0.0; 2 * n],
            alpha: vec![0.0; annotations.len()],
        })
    }

    /// One plain-value decoder step: logits over the target vocabulary and the next state.
    pub fn decode_step(
        &self,
        y_prev: u32,
        state: &DecoderState,
        annotations: &EncoderAnnotations,
    ) -> Result<(Vec<f64>, DecoderState)> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encoded_from(&mut tape, annotations)?;
        let s = tape.leaf(Tensor::vector(state.hidden.clone()));
        let step = self.decode_step_on(&mut tape, &enc, y_prev, s, None)?;
        Ok((
            tape.value(step.logits).data().to_vec(),
            DecoderState {
                hidden: tape.value(step.state).data().to_vec(),
                context: tape.value(step.context).data().to_vec(),
                alpha: tape.value(step.alpha).data().to_vec(),
            },
        ))
    }

    /// Rebuilds the tape-side encoder view from stored annotations.
    fn encoded_from(&self, tape: &mut Tape<'_>, annotations: &EncoderAnnotations) -> Result<Encoded> {
        let n = self.config.hidden;
        let shape = annotations.matrix.shape();
        if shape.len() != 2 || shape[1] != 2 * n || shape[0] == 0 {
            return Err(Error::Shape {
                op: "annotations",
                left: shape.to_vec(),
                right: vec![2 * n],
            });
        }
        let len = shape[0];
        let h = tape.leaf(annotations.matrix.clone());
        let backward = (0..len)
            .map(|j| tape.leaf(Tensor::vector(annotations.matrix.row(j)[n..].to_vec())))
            .collect();
        let forward = (0..len)
            .map(|j| tape.leaf(Tensor::vector(annotations.matrix.row(j)[..n].to_vec())))
            .collect();
        let att_u = tape.param(self.layout.att_u);
        let projected = tape.matmul(h, att_u)?;
        let ones = tape.leaf(Tensor::filled(&[n], 1.0));
        let neg_ones = tape.leaf(Tensor::filled(&[n], -1.0));
        Ok(Encoded {
            annotations: h,
            projected,
            forward,
            backward,
            len,
            ones,
            neg_ones,
        })
    }
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|last| last.starts_with("b_") || last == "b")
}

/// Decoder inputs for teacher forcing: [`START`] followed by all labels but the last.
pub fn decoder_inputs(labels: &[u32]) -> Vec<u32> {
    std::iter::once(START)
        .chain(labels.iter().copied().take(labels.len().saturating_sub(1)))
        .collect()
}

/// A single model's incremental decoder: the source is encoded once and
/// every step extends the same forward-only tape.
pub struct Session<'m> {
    model: &'m Model,
    tape: Tape<'m>,
    enc: Encoded,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, src: &IdMatrix) -> Result<Self> {
        let mut tape = Tape::new(&model.params);
        let enc = model.encode_on(&mut tape, src, None)?;
        Ok(Session { model, tape, enc })
    }

    pub fn initial_state(&mut self) -> Result<NodeId> {
        self.model.initial_state_on(&mut self.tape, &self.enc)
    }

    /// Logits and next state for input `y_prev` from `state`.
    pub fn step(&mut self, state: NodeId, y_prev: u32) -> Result<(Vec<f64>, NodeId)> {
        let step = self
            .model
            .decode_step_on(&mut self.tape, &self.enc, y_prev, state, None)?;
        Ok((self.tape.value(step.logits).data().to_vec(), step.state))
    }

    /// Like [`Session::step`], also returning the attention weights.
    pub fn step_with_attention(&mut self, state: NodeId, y_prev: u32) -> Result<(Vec<f64>, NodeId, Vec<f64>)> {
        let step = self
            .model
            .decode_step_on(&mut self.tape, &self.enc, y_prev, state, None)?;
        Ok((
            self.tape.value(step.logits).data().to_vec(),
            step.state,
            self.tape.value(step.alpha).data().to_vec(),
        ))
    }

    pub fn source_len(&self) -> usize {
        self.enc.len
    }
}

/// Source and target vocabularies stored alongside a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub source: Vec<Vocabulary>,
    pub target: Vocabulary,
}

const CHECKPOINT_MAGIC: &str = "factored-nmt checkpoint v1";

/// Serializes a model (and optionally its vocabularies): a UTF-8 manifest
/// followed by little-endian `f64` data, row-major, tensor by tensor.
pub fn checkpoint_bytes(model: &Model, vocabs: Option<&Vocabularies>) -> Vec<u8> {
    let c = &model.config;
    let mut manifest = String::new();
    writeln!(manifest, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(manifest, "hidden\t{}", c.hidden).unwrap();
    writeln!(manifest, "seed\t{}", c.seed).unwrap();
    writeln!(manifest, "target_vocab\t{}", c.tgt_vocab_size).unwrap();
    for (f, k) in c.scheme.features().iter().zip(&c.src_vocab_sizes) {
        writeln!(manifest, "feature\t{}\t{}\t{}\t{}", f.name, f.embed_size, f.capacity, k).unwrap();
    }
    if let Some(v) = vocabs {
        for (k, voc) in v.source.iter().enumerate() {
            writeln!(manifest, "vocab\tsource\t{k}\t{}", voc.symbols().join(" ")).unwrap();
        }
        writeln!(manifest, "vocab\ttarget\t0\t{}", v.target.symbols().join(" ")).unwrap();
    }
    let mut offset = 0usize;
    for (name, t) in model.names.iter().zip(&model.params) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "tensor\t{name}\t{}\t{offset}", shape.join(",")).unwrap();
        offset += t.len() * 8;
    }
    writeln!(manifest, "data\t{offset}").unwrap();
    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset);
    for t in &model.params {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Model, Option<Vocabularies>)> {
    let bad = |d: String| Error::format("checkpoint", d);
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        pos += end + 1;
        let is_data = line.starts_with("data\t");
        lines.push(line.to_string());
        if is_data {
            break;
        }
    }
    if lines[0] != CHECKPOINT_MAGIC {
        return Err(bad("unknown header".into()));
    }
    let data = &bytes[pos..];
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
    let mut hidden = 0;
    let mut seed = 0u64;
    let mut tgt = 0;
    let mut features = Vec::new();
    let mut sizes = Vec::new();
    let mut src_vocabs: Vec<(usize, Vec<String>)> = Vec::new();
    let mut tgt_vocab: Option<Vec<String>> = None;
    let mut tensors: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut data_len = 0;
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.as_slice() {
            ["hidden", v] => hidden = num(v)?,
            ["seed", v] => seed = v.parse().map_err(|_| bad(format!("bad seed {v:?}")))?,
            ["target_vocab", v] => tgt = num(v)?,
            ["feature", name, e, cap, k] => {
                features.push(FeatureSpec::new(*name, num(e)?, num(cap)?));
                sizes.push(num(k)?);
            }
            ["vocab", "source", k, syms] => src_vocabs.push((num(k)?, syms.split(' ').map(String::from).collect())),
            ["vocab", "target", _, syms] => tgt_vocab = Some(syms.split(' ').map(String::from).collect()),
            ["tensor", name, shape, off] => {
                let shape = shape.split(',').map(num).collect::<Result<Vec<_>>>()?;
                tensors.push((name.to_string(), shape, num(off)?));
            }
            ["data", len] => data_len = num(len)?,
            _ => return Err(bad(format!("unexpected manifest line {line:?}"))),
        }
    }
    if data.len() != data_len {
        return Err(bad(format!("expected {data_len} data bytes, found {}", data.len())));
    }
    let config = ModelConfig {
        scheme: FeatureScheme::new(features)?,
        hidden,
        src_vocab_sizes: sizes,
        tgt_vocab_size: tgt,
        seed,
    };
    let mut model = Model::zeros(config)?;
    if tensors.len() != model.params.len() {
        return Err(bad(format!(
            "{} tensors for a model with {}",
            tensors.len(),
            model.params.len()
        )));
    }
    for (i, (name, shape, off)) in tensors.into_iter().enumerate() {
        let p = &mut model.params[i];
        if name != model.names[i] || shape != p.shape() {
            return Err(bad(format!("tensor {name:?} {shape:?} does not match the config")));
        }
        let end = off + p.len() * 8;
        if end > data.len() {
            return Err(bad(format!("tensor {name:?} runs past the data section")));
        }
        for (x, chunk) in p.data_mut().iter_mut().zip(data[off..end].chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    let vocabs = match tgt_vocab {
        None => None,
        Some(t) => {
            src_vocabs.sort_by_key(|(k, _)| *k);
            let names: Vec<String> = model.config.scheme.names().map(String::from).collect();
            let source = src_vocabs
                .into_iter()
                .map(|(k, syms)| {
                    let name = names.get(k).cloned().unwrap_or_default();
                    Vocabulary::parse(&name, &symbols_as_vocab_text(&syms))
                })
                .collect::<Result<Vec<_>>>()?;
            let target = Vocabulary::parse("word", &symbols_as_vocab_text(&t))?;
            Some(Vocabularies { source, target })
        }
    };
    Ok((model, vocabs))
}

fn symbols_as_vocab_text(symbols: &[String]) -> String {
    symbols.iter().map(|s| format!("{s}\t0\n")).collect()
}

pub fn save_checkpoint(path: &Path, model: &Model, vocabs: Option<&Vocabularies>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, vocabs))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<Vocabularies>)> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{flatten, grad_check, unflatten_into};
    use proptest::prelude::*;

    fn config(sizes: &[(&str, usize, usize)], n: usize, ky: usize, seed: u64) -> ModelConfig {
        let scheme = FeatureScheme::new(
            sizes
                .iter()
                .map(|&(name, m, _)| FeatureSpec::new(name, m, 10))
                .collect(),
        )
        .unwrap();
        ModelConfig {
            scheme,
            hidden: n,
            src_vocab_sizes: sizes.iter().map(|s| s.2).collect(),
            tgt_vocab_size: ky,
            seed,
        }
    }

    fn small(seed: u64) -> Model {
        let c = config(&[("word", 4, 9), ("pos", 2, 5), ("dep", 2, 6)], 5, 7, seed);
        Model::with_init_scale(c, 0.5).unwrap()
    }

    fn src(rows: &[&[u32]]) -> IdMatrix {
        IdMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Straight-line evaluation of the network with plain loops.
    mod reference {
        use crate::numerics::{sigmoid, softmax_vec};

        pub fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
            let cols = x.len();
            (0..rows)
                .map(|i| w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        }

        fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        }

        /// `p` yields W_z W_r W_h U_z U_r U_h b_z b_r b_h.
        pub fn gru(p: &[&[f64]], x: &[f64], h: &[f64]) -> Vec<f64> {
            let n = h.len();
            let z: Vec<f64> = add(&add(&matvec(p[0], n, x), &matvec(p[3], n, h)), p[6])
                .into_iter()
                .map(sigmoid)
                .collect();
            let r: Vec<f64> = add(&add(&matvec(p[1], n, x), &matvec(p[4], n, h)), p[7])
                .into_iter()
                .map(sigmoid)
                .collect();
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = add(&add(&matvec(p[2], n, x), &matvec(p[5], n, &rh)), p[8])
                .into_iter()
                .map(f64::tanh)
                .collect();
            (0..n).map(|i| (1.0 + -z[i]) * h[i] + z[i] * cand[i]).collect()
        }

        pub fn attend(wa: &[f64], ua: &[f64], v: &[f64], s: &[f64], hs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
            let n = s.len();
            let ws = matvec(wa, n, s);
            let scores: Vec<f64> = hs
                .iter()
                .map(|h| {
                    let mut uh = vec![0.0; n];
                    for (k, &x) in h.iter().enumerate() {
                        for (o, &w) in uh.iter_mut().zip(&ua[k * n..(k + 1) * n]) {
                            *o += x * w;
                        }
                    }
                    (0..n).map(|i| (uh[i] + ws[i]).tanh() * v[i]).sum()
                })
                .collect();
            let alpha = softmax_vec(&scores);
            let mut c = vec![0.0; hs[0].len()];
            for (a, h) in alpha.iter().zip(hs) {
                for (o, x) in c.iter_mut().zip(h) {
                    *o += a * x;
                }
            }
            (alpha, c)
        }
    }

    fn gru_params<'a>(m: &'a Model, prefix: &str) -> Vec<&'a [f64]> {
        ["W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"]
            .iter()
            .map(|g| m.param(&format!("{prefix}.{g}")).unwrap().data())
            .collect()
    }

    fn reference_loss(m: &Model, source: &IdMatrix, target: &[u32]) -> f64 {
        let p = |name: &str| m.param(name).unwrap().data();
        let n = m.config.hidden;
        let emb: Vec<Vec<f64>> = source
            .rows()
            .map(|row| {
                let mut e = Vec::new();
                for (k, &id) in row.iter().enumerate() {
                    let t = &m.params[m.layout.src_embed[k]];
                    e.extend_from_slice(t.row(id as usize));
                }
                e
            })
            .collect();
        let (fw, bw) = (gru_params(m, "enc_fwd"), gru_params(m, "enc_bwd"));
        let mut fwd = Vec::new();
        let mut h = vec![0.0; n];
        for e in &emb {
            h = reference::gru(&fw, e, &h);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); emb.len()];
        let mut h = vec![0.0; n];
        for j in (0..emb.len()).rev() {
            h = reference::gru(&bw, &emb[j], &h);
            bwd[j] = h.clone();
        }
        let hs: Vec<Vec<f64>> = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| [f.clone(), b.clone()].concat())
            .collect();
        let mut s: Vec<f64> = reference::matvec(p("init.W"), n, &bwd[0])
            .iter()
            .zip(p("init.b"))
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let dec = gru_params(m, "dec");
        let ky = m.config.tgt_vocab_size;
        let mut loss = 0.0;
        for (&y_prev, &y) in decoder_inputs(target).iter().zip(target) {
            let e = m.param("tgt_embed").unwrap().row(y_prev as usize).to_vec();
            let (_, c) = reference::attend(p("att.W"), p("att.U"), p("att.v"), &s, &hs);
            s = reference::gru(&dec, &[e.clone(), c.clone()].concat(), &s);
            let feats = [s.clone(), e, c].concat();
            let logits: Vec<f64> = reference::matvec(p("out.W"), ky, &feats)
                .iter()
                .zip(p("out.b"))
                .map(|(a, b)| a + b)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - logits[y as usize];
        }
        loss
    }

    #[test]
    fn table_budget_embedding_has_width_500() {
        let scheme = FeatureScheme::with_budget(
            500,
            100,
            &[
                ("tag", Some(5), 8),
                ("pos", Some(10), 50),
                ("morph", Some(10), 50),
                ("dep", Some(10), 50),
                ("lemma", Some(115), 100),
            ],
        )
        .unwrap();
        assert_eq!(scheme.features()[0].embed_size, 350);
        let c = ModelConfig {
            src_vocab_sizes: vec![4; 6],
            scheme,
            hidden: 3,
            tgt_vocab_size: 5,
            seed: 0,
        };
        let m = Model::new(c).unwrap();
        assert_eq!(m.factored_embed(&[3, 0, 1, 2, 3, 3]).unwrap().len(), 500);
    }

    #[test]
    fn zero_embeddings_give_zero_vector() {
        let m = Model::zeros(config(&[("word", 3, 5), ("pos", 2, 4)], 2, 4, 0)).unwrap();
        assert_eq!(m.factored_embed(&[4, 3]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn single_feature_embedding_is_plain_lookup() {
        let m = Model::new(config(&[("word", 6, 9)], 2, 4, 3)).unwrap();
        let table = m.param("src_embed.word").unwrap();
        for id in 0..9 {
            assert_eq!(m.factored_embed(&[id]).unwrap(), table.row(id as usize));
        }
    }

    #[test]
    fn embedding_lookup_errors() {
        let m = small(0);
        assert!(matches!(m.factored_embed(&[9, 0, 0]), Err(Error::Lookup { .. })));
        assert!(matches!(m.factored_embed(&[1, 1]), Err(Error::FactorCount { .. })));
    }

    #[test]
    fn encode_shapes_and_zero_weights() {
        let c = config(&[("word", 8, 20)], 1024, 5, 0);
        let m = Model::zeros(c).unwrap();
        let s = src(&[&[3], &[4], &[5], &[6], &[7], &[8], &[1]]);
        let a = m.encode(&s).unwrap();
        assert_eq!(a.matrix.shape(), [7, 2048]);
        assert!(a.matrix.data().iter().all(|&x| x == 0.0));

        let m = small(2);
        let a = m.encode(&src(&[&[4, 2, 3]])).unwrap();
        assert_eq!(a.matrix.shape(), [1, 10]);
        assert!(m.encode(&IdMatrix::new(3)).is_err());
    }

    #[test]
    fn length_one_states_come_from_the_same_embedding() {
        let m = small(4);
        let a = m.encode(&src(&[&[5, 1, 2]])).unwrap();
        let e = m.factored_embed(&[5, 1, 2]).unwrap();
        let zero = vec![0.0; 5];
        let f = reference::gru(&gru_params(&m, "enc_fwd"), &e, &zero);
        let b = reference::gru(&gru_params(&m, "enc_bwd"), &e, &zero);
        assert_eq!(a.matrix.row(0), [f, b].concat());
    }

    #[test]
    fn zero_scoring_vector_gives_uniform_attention() {
        let mut m = small(5);
        m.param_mut("att.v").unwrap().fill(0.0);
        let a = m.encode(&src(&[&[4, 3, 3], &[5, 4, 2], &[1, 1, 1]])).unwrap();
        let (alpha, c) = m.attend(&[0.3, -0.1, 0.2, 0.0, 0.5], &a).unwrap();
        for x in &alpha {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        for (k, ck) in c.iter().enumerate() {
            let mean = (0..3).map(|j| a.matrix.get(j, k)).sum::<f64>() / 3.0;
            assert!((ck - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_attends_fully() {
        let m = small(6);
        let a = m.encode(&src(&[&[1, 1, 1]])).unwrap();
        let (alpha, c) = m.attend(&[0.1; 5], &a).unwrap();
        assert_eq!(alpha, [1.0]);
        assert_eq!(c, a.matrix.row(0));
    }

    #[test]
    fn two_position_attention_by_hand() {
        let mut m = Model::zeros(config(&[("word", 1, 4)], 1, 4, 0)).unwrap();
        m.param_mut("att.W").unwrap().data_mut()[0] = 0.5;
        m.param_mut("att.U").unwrap().data_mut().copy_from_slice(&[2.0, -1.0]);
        m.param_mut("att.v").unwrap().data_mut()[0] = 3.0;
        let h = Tensor::matrix(2, 2, vec![0.2, 0.4, -0.3, 0.1]).unwrap();
        let a = EncoderAnnotations { matrix: h };
        let (alpha, c) = m.attend(&[0.6], &a).unwrap();
        // score_j = 3 tanh(0.5*0.6 + 2 h_j0 - h_j1)
        let s1 = 3.0 * (0.3_f64 + 0.4 - 0.4).tanh();
        let s2 = 3.0 * (0.3_f64 - 0.6 - 0.1).tanh();
        let a1 = 1.0 / (1.0 + (s2 - s1).exp());
        assert!((alpha[0] - a1).abs() < 1e-15);
        assert!((alpha[1] - (1.0 - a1)).abs() < 1e-15);
        assert!((c[0] - (a1 * 0.2 + (1.0 - a1) * -0.3)).abs() < 1e-15);
        assert!((c[1] - (a1 * 0.4 + (1.0 - a1) * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn decode_step_shapes_and_uniform_zero_model() {
        let m = small(7);
        for len in 1..4 {
            let rows: Vec<&[u32]> = vec![&[3, 3, 3]; len];
            let a = m.encode(&src(&rows)).unwrap();
            let s = m.initial_state(&a).unwrap();
            let (logits, next) = m.decode_step(START, &s, &a).unwrap();
            assert_eq!(logits.len(), 7);
            assert_eq!(next.alpha.len(), len);
            assert_eq!(next.context.len(), 10);
        }
        let z = Model::zeros(config(&[("word", 3, 5)], 2, 6, 0)).unwrap();
        let a = z.encode(&src(&[&[4], &[1]])).unwrap();
        let (logits, _) = z.decode_step(3, &z.initial_state(&a).unwrap(), &a).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert!(z.decode_step(6, &z.initial_state(&a).unwrap(), &a).is_err());
    }

    #[test]
    fn uniform_model_loss() {
        let z = Model::zeros(config(&[("word", 3, 5), ("pos", 1, 4)], 2, 20, 0)).unwrap();
        let l = z.sentence_loss(&src(&[&[4, 3], &[1, 1]]), &[5, 6, 7, 1]).unwrap();
        assert!((l - 4.0 * 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_requires_final_eos() {
        let m = small(1);
        assert!(matches!(
            m.sentence_loss(&src(&[&[1, 1, 1]]), &[3, 4]),
            Err(Error::Contract(_))
        ));
        assert!(m.sentence_loss(&src(&[&[1, 1, 1]]), &[9, 1]).is_err());
    }

    #[test]
    fn one_unit_model_matches_manual_unroll() {
        let c = config(&[("word", 1, 5)], 1, 3, 11);
        let m = Model::with_init_scale(c, 0.9).unwrap();
        let s = src(&[&[3], &[4], &[1]]);
        let t = [2, 0, 1];
        let got = m.sentence_loss(&s, &t).unwrap();
        assert!((got - reference_loss(&m, &s, &t)).abs() < 1e-12);
    }

    #[test]
    fn factored_model_matches_reference() {
        let m = small(12);
        let s = src(&[&[4, 3, 5], &[8, 4, 3], &[1, 1, 1]]);
        let t = [3, 5, 6, 1];
        let got = m.sentence_loss(&s, &t).unwrap();
        assert!((got - reference_loss(&m, &s, &t)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_passes_grad_check() {
        // A wider init keeps every gradient well above finite-difference roundoff.
        let c = config(&[("word", 4, 9), ("pos", 2, 5), ("dep", 2, 6)], 5, 7, 13);
        let m = Model::with_init_scale(c, 1.0).unwrap();
        let s = src(&[&[4, 3, 5], &[8, 4, 3], &[1, 1, 1]]);
        let t = [3, 5, 1];
        let point = flatten(m.params());
        let mut probe = m.clone();
        let report = grad_check(
            |x| {
                unflatten_into(probe.params_mut(), x);
                probe.sentence_loss(&s, &t)
            },
            |_| Ok(flatten(&m.loss_and_gradients(&s, &t)?.1)),
            &point,
            1e-5,
            Some((400, 1)),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn budget_invariance_of_downstream_shapes() {
        let base = Model::new(config(&[("word", 12, 30)], 6, 9, 0)).unwrap();
        let fact = Model::new(config(&[("word", 5, 30), ("pos", 4, 7), ("dep", 3, 8)], 6, 9, 0)).unwrap();
        assert_eq!(base.downstream_shapes(), fact.downstream_shapes());
        assert!(base.downstream_shapes().len() > 30);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = small(3);
        assert_eq!(a, small(3));
        assert_ne!(a, small(4));
        let m = Model::new(config(&[("word", 4, 9)], 3, 5, 0)).unwrap();
        for (name, p) in m.param_names().iter().zip(m.params()) {
            if is_bias(name) {
                assert!(p.data().iter().all(|&x| x == 0.0), "{name}");
            } else {
                assert!(p.data().iter().all(|x| x.abs() <= 0.08), "{name}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small(9);
        let vocabs = Vocabularies {
            source: vec![
                Vocabulary::from_symbols("word", &["a", "b", "c", "d", "e", "f"]).unwrap(),
                Vocabulary::from_symbols("pos", &["X", "Y"]).unwrap(),
                Vocabulary::from_symbols("dep", &["p", "q", "r"]).unwrap(),
            ],
            target: Vocabulary::from_symbols("word", &["u", "v", "w", "x"]).unwrap(),
        };
        let bytes = checkpoint_bytes(&m, Some(&vocabs));
        let (back, v) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        let v = v.unwrap();
        assert_eq!(v.source[1].symbols(), vocabs.source[1].symbols());
        assert_eq!(v.target.symbols(), vocabs.target.symbols());
        assert_eq!(checkpoint_bytes(&back, Some(&v)), bytes);

        let (bare, none) = parse_checkpoint(&checkpoint_bytes(&m, None)).unwrap();
        assert_eq!(bare, m);
        assert!(none.is_none());

        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_checkpoint(b"garbage\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_is_a_simplex(seed in 0u64..1000, ids in prop::collection::vec((0u32..9, 0u32..5, 0u32..6), 1..7), y in 0u32..7) {
            let m = small(seed);
            let rows: Vec<Vec<u32>> = ids.iter().map(|&(a, b, c)| vec![a, b, c]).collect();
            let a = m.encode(&IdMatrix::from_rows(&rows).unwrap()).unwrap();
            let mut s = m.initial_state(&a).unwrap();
            for _ in 0..3 {
                let (_, next) = m.decode_step(y, &s, &a).unwrap();
                prop_assert!(next.alpha.iter().all(|&x| x >= 0.0));
                prop_assert!((next.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                s = next;
            }
        }

        #[test]
        fn encode_is_equivariant_to_relabeling(seed in 0u64..1000, perm_seed in any::<u64>(), ids in prop::collection::vec(0u32..5, 1..6)) {
            use rand::seq::SliceRandom;
            let m = small(seed);
            let mut perm: Vec<u32> = (0..5).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut relabeled = m.clone();
            let k = relabeled.layout.src_embed[1];
            let old = m.params[k].clone();
            for (from, &to) in perm.iter().enumerate() {
                let row = old.row(from).to_vec();
                let w = old.shape()[1];
                relabeled.params[k].data_mut()[to as usize * w..(to as usize + 1) * w].copy_from_slice(&row);
            }
            let rows: Vec<Vec<u32>> = ids.iter().map(|&p| vec![3, p, 2]).collect();
            let moved: Vec<Vec<u32>> = ids.iter().map(|&p| vec![3, perm[p as usize], 2]).collect();
            let a = m.encode(&IdMatrix::from_rows(&rows).unwrap()).unwrap();
            let b = relabeled.encode(&IdMatrix::from_rows(&moved).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..1000, t in prop::collection::vec(0u32..7, 0..4)) {
            let m = small(seed);
            let mut target = t;
            target.push(EOS);
            let l = m.sentence_loss(&src(&[&[4, 3, 2], &[1, 1, 1]]), &target).unwrap();
            prop_assert!(l >= 0.0);
        }
    }
}
