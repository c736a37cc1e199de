//! Encoder-decoder networks mapping (utterance, start state) to a target state.
//!
//! The encoder turns word ids into feature vectors (LSTM, same-padded
//! convolution, or a bag-of-words average). The decoder reads the 23 start
//! state tokens (LSTM or convolution), attends over the encoder features at
//! every position and predicts one of the six state tokens per position.

use ndarray::{Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform, GradSet, ParamId, ParamRole, ParamSet, TrainMask};
use super::tape::{softmax_rows, Tape, Var};
use super::vocab::{state_ids, state_tokens, Vocabulary, STATE_VOCAB};
use crate::blockworld::{Utterance, WorldState, STATE_TOKENS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Init range for recurrent, convolutional and projection weights.
pub const WEIGHT_INIT: f64 = 0.08;
/// Init range for embedding rows, including words registered online.
pub const EMBEDDING_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Conv,
    Bow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Lstm,
    Conv,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "conv" => Ok(EncoderKind::Conv),
            "bow" => Ok(EncoderKind::Bow),
            other => Err(Error::InvalidConfig(format!("unknown encoder '{other}'"))),
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(DecoderKind::Lstm),
            "conv" => Ok(DecoderKind::Conv),
            other => Err(Error::InvalidConfig(format!("unknown decoder '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    /// Hidden size; embeddings share it.
    pub hidden: usize,
    pub lstm_layers: usize,
    pub conv_layers: usize,
    pub kernel_size: usize,
    pub dropout: f64,
}

impl Architecture {
    pub fn new(encoder: EncoderKind, decoder: DecoderKind, hidden: usize) -> Self {
        Architecture {
            encoder,
            decoder,
            hidden,
            lstm_layers: 1,
            conv_layers: 4,
            kernel_size: 3,
            dropout: 0.0,
        }
    }

    /// The five pairings explored offline.
    pub fn all_pairs() -> [(EncoderKind, DecoderKind); 5] {
        [
            (EncoderKind::Lstm, DecoderKind::Lstm),
            (EncoderKind::Lstm, DecoderKind::Conv),
            (EncoderKind::Conv, DecoderKind::Lstm),
            (EncoderKind::Conv, DecoderKind::Conv),
            (EncoderKind::Bow, DecoderKind::Lstm),
        ]
    }

    pub fn name(&self) -> &'static str {
        pair_name(self.encoder, self.decoder)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden size must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig("kernel size must be odd".into()));
        }
        if self.uses_lstm() && self.lstm_layers == 0 {
            return Err(Error::InvalidConfig("lstm needs at least one layer".into()));
        }
        if self.uses_conv() && self.conv_layers == 0 {
            return Err(Error::InvalidConfig("conv needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn uses_lstm(&self) -> bool {
        self.encoder == EncoderKind::Lstm || self.decoder == DecoderKind::Lstm
    }

    fn uses_conv(&self) -> bool {
        self.encoder == EncoderKind::Conv || self.decoder == DecoderKind::Conv
    }
}

pub fn pair_name(encoder: EncoderKind, decoder: DecoderKind) -> &'static str {
    match (encoder, decoder) {
        (EncoderKind::Lstm, DecoderKind::Lstm) => "seq2seq",
        (EncoderKind::Lstm, DecoderKind::Conv) => "seq2conv",
        (EncoderKind::Conv, DecoderKind::Lstm) => "conv2seq",
        (EncoderKind::Conv, DecoderKind::Conv) => "conv2conv",
        (EncoderKind::Bow, DecoderKind::Lstm) => "bow2seq",
        (EncoderKind::Bow, DecoderKind::Conv) => "bow2conv",
    }
}

/// Inverse of [`pair_name`].
pub fn parse_pair_name(name: &str) -> Result<(EncoderKind, DecoderKind)> {
    let (enc, dec) = name
        .split_once('2')
        .ok_or_else(|| Error::InvalidConfig(format!("unknown architecture '{name}'")))?;
    let enc = if enc == "seq" { "lstm" } else { enc };
    let dec = if dec == "seq" { "lstm" } else { dec };
    Ok((enc.parse()?, dec.parse()?))
}

#[derive(Debug, Clone)]
enum Stack {
    Bow,
    /// (weight, bias) per layer.
    Lstm(Vec<(ParamId, ParamId)>),
    Conv(Vec<(ParamId, ParamId)>),
}

#[derive(Debug, Clone)]
struct Layout {
    word_embedding: ParamId,
    encoder: Stack,
    state_embedding: ParamId,
    positions: Option<ParamId>,
    decoder: Stack,
    attention: ParamId,
    combine: (ParamId, ParamId),
    output: (ParamId, ParamId),
}

/// One training/evaluation example as ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedExample {
    pub words: Vec<usize>,
    pub start: [usize; STATE_TOKENS],
    pub target: [usize; STATE_TOKENS],
}

/// Encoder features for one utterance.
#[derive(Debug, Clone)]
pub struct Encoding<T> {
    /// `m x hidden` (a single row for the bag-of-words encoder).
    pub states: Array2<T>,
    /// Final `(h, c)` per layer, LSTM encoders only.
    pub final_state: Option<Vec<(Array2<T>, Array2<T>)>>,
}

#[derive(Debug, Clone)]
pub struct Prediction<T> {
    /// `23 x 6` per-position distributions over [`STATE_VOCAB`].
    pub probs: Array2<T>,
    pub tokens: Vec<usize>,
}

impl<T: Scalar> Prediction<T> {
    fn from_logits(logits: Array2<T>) -> Self {
        let probs = softmax_rows(logits.view());
        let tokens = argmax_rows(&probs);
        Prediction { probs, tokens }
    }

    pub fn state_tokens(&self) -> Vec<String> {
        state_tokens(&self.tokens)
    }

    /// The predicted configuration, if the argmax tokens form a valid state.
    pub fn to_state(&self) -> Result<WorldState> {
        crate::blockworld::deserialize_state(&self.state_tokens())
    }

    /// Mean negative log-likelihood of `target` ids.
    pub fn loss(&self, target: &[usize]) -> T {
        nll(&self.probs, target)
    }
}

pub(crate) fn argmax_rows<T: Scalar>(x: &Array2<T>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean over positions of `-ln p(target)`, from probabilities.
pub fn nll<T: Scalar>(probs: &Array2<T>, target: &[usize]) -> T {
    let tiny = T::min_positive_value();
    let total = target
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (r, &t)| acc - probs[[r, t]].max(tiny).ln());
    total / T::from_usize(target.len()).unwrap()
}

/// Inverted dropout driven by an optional RNG; without one it is the identity.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut dyn RngCore) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, v: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return v;
        };
        if self.rate <= 0.0 {
            return v;
        }
        let keep = 1.0 - self.rate;
        let scale = T::lit(1.0 / keep);
        let shape = tape.shape(v);
        let mask = Array2::from_shape_simple_fn(shape, || {
            let u = (rng.next_u32() as f64) / (u32::MAX as f64 + 1.0);
            if u < keep {
                scale
            } else {
                T::zero()
            }
        });
        tape.mask(v, mask)
    }
}

struct EncoderVars {
    states: Var,
    finals: Option<Vec<(Var, Var)>>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle<T: Scalar> {
    arch: Architecture,
    vocab: Vocabulary,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(arch: Architecture, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.hidden;
        let mut params = ParamSet::new();

        let word_embedding = params.push_uniform(
            "enc.embedding",
            ParamRole::WordEmbedding,
            (vocab.len(), h),
            EMBEDDING_INIT,
            &mut rng,
        );
        let encoder = match arch.encoder {
            EncoderKind::Bow => Stack::Bow,
            EncoderKind::Lstm => Stack::Lstm(lstm_params(&mut params, "enc", ParamRole::Encoder, &arch, &mut rng)),
            EncoderKind::Conv => Stack::Conv(conv_params(&mut params, "enc", ParamRole::Encoder, &arch, &mut rng)),
        };
        let state_embedding = params.push_uniform(
            "dec.embedding",
            ParamRole::Decoder,
            (STATE_VOCAB.len(), h),
            EMBEDDING_INIT,
            &mut rng,
        );
        let (positions, decoder) = match arch.decoder {
            DecoderKind::Lstm => (
                None,
                Stack::Lstm(lstm_params(&mut params, "dec", ParamRole::Decoder, &arch, &mut rng)),
            ),
            DecoderKind::Conv => (
                Some(params.push_uniform(
                    "dec.positions",
                    ParamRole::Decoder,
                    (STATE_TOKENS, h),
                    EMBEDDING_INIT,
                    &mut rng,
                )),
                Stack::Conv(conv_params(&mut params, "dec", ParamRole::Decoder, &arch, &mut rng)),
            ),
        };
        let attention = params.push_uniform("dec.attention", ParamRole::Decoder, (h, h), WEIGHT_INIT, &mut rng);
        let combine = (
            params.push_uniform("dec.combine.w", ParamRole::Decoder, (2 * h, h), WEIGHT_INIT, &mut rng),
            params.push_uniform("dec.combine.b", ParamRole::Decoder, (1, h), WEIGHT_INIT, &mut rng),
        );
        let output = (
            params.push_uniform(
                "dec.output.w",
                ParamRole::Decoder,
                (h, STATE_VOCAB.len()),
                WEIGHT_INIT,
                &mut rng,
            ),
            params.push_uniform(
                "dec.output.b",
                ParamRole::Decoder,
                (1, STATE_VOCAB.len()),
                WEIGHT_INIT,
                &mut rng,
            ),
        );

        Ok(ModelBundle {
            arch,
            vocab,
            params,
            layout: Layout {
                word_embedding,
                encoder,
                state_embedding,
                positions,
                decoder,
                attention,
                combine,
                output,
            },
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocabulary_mut(&mut self) -> &mut Vocabulary {
        &mut self.vocab
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn word_embedding_id(&self) -> ParamId {
        self.layout.word_embedding
    }

    pub fn attention_id(&self) -> ParamId {
        self.layout.attention
    }

    pub fn word_embedding(&self, word: &str) -> Result<ndarray::ArrayView1<'_, T>> {
        let id = self
            .vocab
            .id(word)
            .ok_or_else(|| Error::UnknownToken(word.to_string()))?;
        Ok(self.params.value(self.layout.word_embedding).row(id))
    }

    /// Appends embedding rows for unseen words, drawn from uniform(-0.1, 0.1)
    /// with `seed`. Existing rows are untouched.
    pub fn register_new_words<S: AsRef<str>>(&mut self, words: &[S], seed: u64) -> Result<Vec<usize>> {
        let mut seen = std::collections::HashSet::new();
        for w in words {
            if self.vocab.contains(w.as_ref()) || !seen.insert(w.as_ref()) {
                return Err(Error::DuplicateWord(w.as_ref().to_string()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Array2<T> = uniform((words.len(), self.arch.hidden), EMBEDDING_INIT, &mut rng);
        let table = &mut self.params.get_mut(self.layout.word_embedding).value;
        let grown = ndarray::concatenate(Axis(0), &[table.view(), rows.view()]).expect("embedding widths agree");
        *table = grown;
        words.iter().map(|w| self.vocab.add_word(w.as_ref())).collect()
    }

    /// Replaces every tensor whose role passes `select` with a fresh draw.
    pub fn reinitialize(&mut self, seed: u64, select: impl Fn(ParamRole) -> bool) -> Result<()> {
        let fresh = ModelBundle::<T>::new(self.arch, self.vocab.clone(), seed)?;
        for (id, p) in self.params.iter_mut() {
            if select(p.role) {
                p.value = fresh.params.value(id).clone();
            }
        }
        Ok(())
    }

    pub fn encode_example(
        &self,
        utterance: &Utterance,
        start: &WorldState,
        target: &WorldState,
    ) -> Result<EncodedExample> {
        Ok(EncodedExample {
            words: self.vocab.ids(&utterance.tokens)?,
            start: state_ids(&start.to_tokens())?,
            target: state_ids(&target.to_tokens())?,
        })
    }

    fn encoder_vars(&self, tape: &mut Tape<'_, T>, words: &[&[usize]], drop: &mut Dropout) -> EncoderVars {
        let batch = words.len();
        let len = words[0].len();
        debug_assert!(
            words.iter().all(|w| w.len() == len),
            "batch utterances must share a length"
        );
        let flat: Vec<usize> = words.iter().flat_map(|w| w.iter().copied()).collect();
        match &self.layout.encoder {
            Stack::Bow => {
                let emb = tape.gather(self.layout.word_embedding, &flat);
                let emb = drop.apply(tape, emb);
                EncoderVars {
                    states: tape.group_mean(emb, len),
                    finals: None,
                }
            }
            Stack::Conv(layers) => {
                let emb = tape.gather(self.layout.word_embedding, &flat);
                let x = drop.apply(tape, emb);
                let states = self.conv_stack(tape, layers, x, len, drop);
                EncoderVars { states, finals: None }
            }
            Stack::Lstm(layers) => {
                let steps: Vec<Var> = (0..len)
                    .map(|t| {
                        let ids: Vec<usize> = words.iter().map(|w| w[t]).collect();
                        let e = tape.gather(self.layout.word_embedding, &ids);
                        drop.apply(tape, e)
                    })
                    .collect();
                let (outs, finals) = self.lstm_stack(tape, layers, steps, None, batch, drop);
                EncoderVars {
                    states: tape.stack_steps(&outs),
                    finals: Some(finals),
                }
            }
        }
    }

    /// Decoder features (`batch*23 x hidden`) that the output layer reads.
    ///
    /// The conv decoder attends to `memory` after every block and adds the
    /// context back, so later blocks see what the utterance says.
    fn decoder_vars(
        &self,
        tape: &mut Tape<'_, T>,
        starts: &[&[usize; STATE_TOKENS]],
        memory: Var,
        init: Option<&[(Var, Var)]>,
        drop: &mut Dropout,
    ) -> Var {
        let batch = starts.len();
        match &self.layout.decoder {
            Stack::Conv(layers) => {
                let flat: Vec<usize> = starts.iter().flat_map(|s| s.iter().copied()).collect();
                let emb = tape.gather(self.layout.state_embedding, &flat);
                let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..STATE_TOKENS).collect();
                let pos = tape.gather(self.layout.positions.expect("conv decoder has positions"), &pos_ids);
                let mut x = tape.add(emb, pos);
                for &layer in layers {
                    x = self.conv_block(tape, layer, x, STATE_TOKENS);
                    let (ctx, _) = self.attend_vars(tape, x, memory, batch);
                    x = tape.add(x, ctx);
                }
                x
            }
            Stack::Lstm(layers) => {
                let steps: Vec<Var> = (0..STATE_TOKENS)
                    .map(|t| {
                        let ids: Vec<usize> = starts.iter().map(|s| s[t]).collect();
                        let e = tape.gather(self.layout.state_embedding, &ids);
                        drop.apply(tape, e)
                    })
                    .collect();
                let (outs, _) = self.lstm_stack(tape, layers, steps, init, batch, drop);
                tape.stack_steps(&outs)
            }
            Stack::Bow => unreachable!("no bag-of-words decoder"),
        }
    }

    fn lstm_stack(
        &self,
        tape: &mut Tape<'_, T>,
        layers: &[(ParamId, ParamId)],
        inputs: Vec<Var>,
        init: Option<&[(Var, Var)]>,
        batch: usize,
        drop: &mut Dropout,
    ) -> (Vec<Var>, Vec<(Var, Var)>) {
        let h = self.arch.hidden;
        let mut seq = inputs;
        let mut finals = Vec::with_capacity(layers.len());
        for (l, &(w, b)) in layers.iter().enumerate() {
            if l > 0 {
                seq = seq.into_iter().map(|v| drop.apply(tape, v)).collect();
            }
            let wv = tape.param(w);
            let bv = tape.param(b);
            let (mut hs, mut cs) = match init {
                Some(states) => states[l],
                None => {
                    let zh = tape.input(Array2::zeros((batch, h)));
                    let zc = tape.input(Array2::zeros((batch, h)));
                    (zh, zc)
                }
            };
            let mut outs = Vec::with_capacity(seq.len());
            for x in seq {
                let xh = tape.concat(&[x, hs]);
                let z = tape.matmul(xh, wv);
                let z = tape.add_row(z, bv);
                let i = tape.slice_cols(z, 0, h);
                let i = tape.sigmoid(i);
                let f = tape.slice_cols(z, h, h);
                let f = tape.sigmoid(f);
                let g = tape.slice_cols(z, 2 * h, h);
                let g = tape.tanh(g);
                let o = tape.slice_cols(z, 3 * h, h);
                let o = tape.sigmoid(o);
                let keep = tape.mul(f, cs);
                let write = tape.mul(i, g);
                cs = tape.add(keep, write);
                let squashed = tape.tanh(cs);
                hs = tape.mul(o, squashed);
                outs.push(hs);
            }
            finals.push((hs, cs));
            seq = outs;
        }
        (seq, finals)
    }

    fn conv_stack(
        &self,
        tape: &mut Tape<'_, T>,
        layers: &[(ParamId, ParamId)],
        mut x: Var,
        len: usize,
        drop: &mut Dropout,
    ) -> Var {
        for (l, &layer) in layers.iter().enumerate() {
            if l > 0 {
                x = drop.apply(tape, x);
            }
            x = self.conv_block(tape, layer, x, len);
        }
        x
    }

    /// Residual block `x + relu(conv(x))` with same padding.
    fn conv_block(&self, tape: &mut Tape<'_, T>, (w, b): (ParamId, ParamId), x: Var, len: usize) -> Var {
        let half = (self.arch.kernel_size / 2) as isize;
        let taps: Vec<Var> = (-half..=half)
            .map(|o| if o == 0 { x } else { tape.shift_rows(x, len, o) })
            .collect();
        let window = tape.concat(&taps);
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.matmul(window, wv);
        let y = tape.add_row(y, bv);
        let y = tape.relu(y);
        tape.add(x, y)
    }

    /// Bilinear attention; returns `(context, weights)`.
    pub(crate) fn attend_vars(&self, tape: &mut Tape<'_, T>, queries: Var, memory: Var, batch: usize) -> (Var, Var) {
        attend(tape, self.layout.attention, queries, memory, batch)
    }

    fn output_vars(&self, tape: &mut Tape<'_, T>, queries: Var, context: Var) -> Var {
        let joined = tape.concat(&[queries, context]);
        let wc = tape.param(self.layout.combine.0);
        let bc = tape.param(self.layout.combine.1);
        let hidden = tape.matmul(joined, wc);
        let hidden = tape.add_row(hidden, bc);
        let hidden = tape.tanh(hidden);
        let wo = tape.param(self.layout.output.0);
        let bo = tape.param(self.layout.output.1);
        let logits = tape.matmul(hidden, wo);
        tape.add_row(logits, bo)
    }

    /// Records a batched forward pass and returns `[batch*23 x 6]` logits.
    ///
    /// All utterances in `batch` must have the same length.
    pub fn forward_vars(&self, tape: &mut Tape<'_, T>, batch: &[&EncodedExample], drop: &mut Dropout) -> Var {
        let (q, memory) = self.queries_and_memory(tape, batch, drop);
        let (ctx, _) = self.attend_vars(tape, q, memory, batch.len());
        self.output_vars(tape, q, ctx)
    }

    fn queries_and_memory(&self, tape: &mut Tape<'_, T>, batch: &[&EncodedExample], drop: &mut Dropout) -> (Var, Var) {
        let words: Vec<&[usize]> = batch.iter().map(|e| e.words.as_slice()).collect();
        let enc = self.encoder_vars(tape, &words, drop);
        let starts: Vec<&[usize; STATE_TOKENS]> = batch.iter().map(|e| &e.start).collect();
        let init = match (self.arch.encoder, self.arch.decoder) {
            (EncoderKind::Lstm, DecoderKind::Lstm) => enc.finals.as_deref(),
            _ => None,
        };
        let q = self.decoder_vars(tape, &starts, enc.states, init, drop);
        (q, enc.states)
    }

    /// Inference logits for a batch of equal-length utterances.
    pub fn batch_logits(&self, batch: &[&EncodedExample]) -> Array2<T> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward_vars(&mut tape, batch, &mut Dropout::off());
        tape.value(logits).to_owned()
    }

    /// Mean cross-entropy over the batch and the gradients of trainable tensors.
    pub fn loss_and_grads(&self, batch: &[&EncodedExample], mask: &TrainMask, drop: &mut Dropout) -> (T, GradSet<T>) {
        let mut tape = Tape::with_grad(&self.params, mask);
        let logits = self.forward_vars(&mut tape, batch, drop);
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.target.iter().copied()).collect();
        let loss = tape.cross_entropy(logits, &targets);
        let mut grads = GradSet::new(self.params.len());
        tape.backward(loss, &mut grads);
        (tape.scalar(loss), grads)
    }

    pub fn encode(&self, utterance: &Utterance) -> Result<Encoding<T>> {
        let ids = self.vocab.ids(&utterance.tokens)?;
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty utterance".into()));
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.encoder_vars(&mut tape, &[&ids], &mut Dropout::off());
        Ok(Encoding {
            states: tape.value(enc.states).to_owned(),
            final_state: enc.finals.map(|fs| {
                fs.into_iter()
                    .map(|(h, c)| (tape.value(h).to_owned(), tape.value(c).to_owned()))
                    .collect()
            }),
        })
    }

    pub fn decode<S: AsRef<str>>(&self, encoding: &Encoding<T>, start_tokens: &[S]) -> Result<Prediction<T>> {
        let start = state_ids(start_tokens)?;
        let mut tape = Tape::new(&self.params);
        let memory = tape.input(encoding.states.clone());
        let init: Option<Vec<(Var, Var)>> = match (self.arch.encoder, self.arch.decoder, &encoding.final_state) {
            (EncoderKind::Lstm, DecoderKind::Lstm, Some(fs)) => Some(
                fs.iter()
                    .map(|(h, c)| (tape.input(h.clone()), tape.input(c.clone())))
                    .collect(),
            ),
            _ => None,
        };
        let q = self.decoder_vars(&mut tape, &[&start], memory, init.as_deref(), &mut Dropout::off());
        let (ctx, _) = self.attend_vars(&mut tape, q, memory, 1);
        let logits = self.output_vars(&mut tape, q, ctx);
        Ok(Prediction::from_logits(tape.value(logits).to_owned()))
    }

    pub fn predict(&self, utterance: &Utterance, start: &WorldState) -> Result<Prediction<T>> {
        let enc = self.encode(utterance)?;
        self.decode(&enc, &start.to_tokens())
    }

    pub fn predict_encoded(&self, example: &EncodedExample) -> Prediction<T> {
        Prediction::from_logits(self.batch_logits(&[example]))
    }

    /// Attention weights (`23 x m`) of the output layer for one example; rows are convex weights.
    pub fn attention_weights(&self, example: &EncodedExample) -> Array2<T> {
        let mut tape = Tape::new(&self.params);
        let (q, memory) = self.queries_and_memory(&mut tape, &[example], &mut Dropout::off());
        let (_, weights) = self.attend_vars(&mut tape, q, memory, 1);
        tape.value(weights).to_owned()
    }

    pub(crate) fn from_parts(arch: Architecture, vocab: Vocabulary, params: ParamSet<T>) -> Result<Self> {
        let mut model = ModelBundle::<T>::new(arch, vocab, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, p) in model.params.iter_mut() {
            let src = params.get(id);
            if src.name != p.name || src.value.dim() != p.value.dim() {
                return Err(Error::Format(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    src.name,
                    src.value.dim(),
                    p.name,
                    p.value.dim()
                )));
            }
            p.value = src.value.clone();
            p.role = src.role;
        }
        Ok(model)
    }
}

/// `softmax(q W k^T) k` per batch element, with `k` the memory rows.
pub fn attend<T: Scalar>(
    tape: &mut Tape<'_, T>,
    weight: ParamId,
    queries: Var,
    memory: Var,
    batch: usize,
) -> (Var, Var) {
    let w = tape.param(weight);
    let keys = tape.matmul(memory, w);
    let scores = tape.batch_scores(queries, keys, batch);
    let weights = tape.softmax_rows(scores);
    let ctx = tape.batch_mix(weights, memory, batch);
    (ctx, weights)
}

fn lstm_params<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    role: ParamRole,
    arch: &Architecture,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, ParamId)> {
    let h = arch.hidden;
    (0..arch.lstm_layers)
        .map(|l| {
            let w = params.push_uniform(format!("{prefix}.lstm{l}.w"), role, (2 * h, 4 * h), WEIGHT_INIT, rng);
            let b = params.push_uniform(format!("{prefix}.lstm{l}.b"), role, (1, 4 * h), WEIGHT_INIT, rng);
            (w, b)
        })
        .collect()
}

fn conv_params<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    role: ParamRole,
    arch: &Architecture,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, ParamId)> {
    let h = arch.hidden;
    (0..arch.conv_layers)
        .map(|l| {
            let w = params.push_uniform(
                format!("{prefix}.conv{l}.w"),
                role,
                (arch.kernel_size * h, h),
                WEIGHT_INIT,
                rng,
            );
            let b = params.push_uniform(format!("{prefix}.conv{l}.b"), role, (1, h), WEIGHT_INIT, rng);
            (w, b)
        })
        .collect()
}
