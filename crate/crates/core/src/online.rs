//! Online adaptation to a new speaker: a buffer of observed examples, `k`
//! model copies trained on it, and per-interaction model selection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::{Utterance, WorldState, STATE_TOKENS};
use crate::datagen::ExampleTriple;
use crate::error::{Error, Result};
use crate::neural::model::nll;
use crate::neural::tape::softmax_rows;
use crate::neural::{
    state_tokens, Dropout, EncodedExample, ModelBundle, Optimizer, OptimizerKind, ParamRole, TrainMask,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseScope {
    /// Keep encoder and decoder.
    All,
    /// Keep the decoder; the encoder (with all word embeddings) is redrawn.
    Dec,
    /// Redraw everything.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptScope {
    /// Embedding rows of words added online.
    NewWords,
    /// The whole word-embedding table.
    Embeddings,
    /// Word embeddings plus the encoder network.
    Encoder,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Greedy,
    #[serde(rename = "1out")]
    OneOut,
}

macro_rules! word_enum {
    ($ty:ty, $($word:literal => $variant:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)+
                    _ => Err(Error::InvalidConfig(format!("unknown {} '{s}'", stringify!($ty)))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $variant { return f.write_str($word); })+
                unreachable!()
            }
        }
    };
}

word_enum!(ReuseScope, "all" => ReuseScope::All, "dec" => ReuseScope::Dec, "none" => ReuseScope::None);
word_enum!(
    AdaptScope,
    "newwords" => AdaptScope::NewWords,
    "embeddings" => AdaptScope::Embeddings,
    "encoder" => AdaptScope::Encoder,
    "all" => AdaptScope::All,
);
word_enum!(Selection, "greedy" => Selection::Greedy, "1out" => Selection::OneOut);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub reuse: ReuseScope,
    pub adapt: AdaptScope,
    /// Number of model copies.
    pub k: usize,
    /// Gradient steps per interaction.
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub l2: f64,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            reuse: ReuseScope::All,
            adapt: AdaptScope::Embeddings,
            k: 7,
            steps: 100,
            optimizer: OptimizerKind::Adam,
            lr: 1e-2,
            l2: 1e-4,
            selection: Selection::Greedy,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// Rejects scope pairs that would leave redrawn weights untrained.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.reuse {
            ReuseScope::All => true,
            ReuseScope::Dec => matches!(self.adapt, AdaptScope::Encoder | AdaptScope::All),
            ReuseScope::None => self.adapt == AdaptScope::All,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "reuse={} with adapt={} leaves reinitialized weights untrained",
                self.reuse, self.adapt
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid l2 weight {}", self.l2)));
        }
        Ok(())
    }
}

/// One interaction as seen before and after feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub utterance: String,
    pub predicted: Vec<String>,
    pub target: Vec<String>,
    pub correct: bool,
    pub selected_model: usize,
    /// Selection loss of each copy; empty buffer gives zeros.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub config: AdaptConfig,
    pub online_accuracy: f64,
    pub interactions: usize,
    pub quarantined: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

/// Mean of correctness flags; 0 for an empty log.
pub fn online_accuracy(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_REINIT: u64 = 1;
const SALT_TRAIN: u64 = 2;
const SALT_WORD: u64 = 3;

#[derive(Debug, Clone)]
struct Member<T: Scalar> {
    model: ModelBundle<T>,
    optimizer: Optimizer<T>,
    mask: TrainMask,
    rng: ChaCha8Rng,
    quarantined: bool,
}

/// State of one adaptation session.
#[derive(Debug, Clone)]
pub struct AdaptSession<T: Scalar> {
    config: AdaptConfig,
    copies: Vec<Member<T>>,
    buffer: Vec<ExampleTriple>,
    encoded: Vec<EncodedExample>,
    log: Vec<StepRecord>,
}

fn train_mask<T: Scalar>(model: &ModelBundle<T>, scope: AdaptScope) -> TrainMask {
    let params = model.params();
    let emb = model.word_embedding_id();
    match scope {
        AdaptScope::All => TrainMask::all(params),
        AdaptScope::Encoder => {
            let mut m = TrainMask::none(params);
            for (id, p) in params.iter() {
                m.set(id, p.role.is_encoder_side());
            }
            m
        }
        AdaptScope::Embeddings => {
            let mut m = TrainMask::none(params);
            m.set(emb, true);
            m
        }
        AdaptScope::NewWords => {
            let mut m = TrainMask::none(params);
            m.set(emb, true);
            m.restrict_rows(emb, model.vocabulary().offline_size());
            m
        }
    }
}

impl<T: Scalar> AdaptSession<T> {
    /// `k` copies of `base`, redrawn according to the reuse scope with a
    /// distinct seed per copy.
    pub fn new(base: &ModelBundle<T>, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let mut base = base.clone();
        if !base.vocabulary().is_frozen() {
            base.vocabulary_mut().freeze();
        }
        let copies = (0..config.k)
            .map(|i| {
                let mut model = base.clone();
                let reinit_seed = mix(config.seed, i as u64, SALT_REINIT);
                match config.reuse {
                    ReuseScope::All => {}
                    ReuseScope::Dec => model.reinitialize(reinit_seed, ParamRole::is_encoder_side)?,
                    ReuseScope::None => model.reinitialize(reinit_seed, |_| true)?,
                }
                let mask = train_mask(&model, config.adapt);
                Ok(Member {
                    model,
                    optimizer: Optimizer::new(config.optimizer, config.lr),
                    mask,
                    rng: ChaCha8Rng::seed_from_u64(mix(config.seed, i as u64, SALT_TRAIN)),
                    quarantined: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptSession {
            config,
            copies,
            buffer: Vec::new(),
            encoded: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelBundle<T>> {
        self.copies.iter().map(|c| &c.model)
    }

    pub fn model(&self, index: usize) -> &ModelBundle<T> {
        &self.copies[index].model
    }

    pub fn buffer(&self) -> &[ExampleTriple] {
        &self.buffer
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn quarantined(&self) -> Vec<usize> {
        (0..self.copies.len()).filter(|&i| self.copies[i].quarantined).collect()
    }

    pub fn online_accuracy(&self) -> f64 {
        online_accuracy(&self.log.iter().map(|r| r.correct).collect::<Vec<_>>())
    }

    /// Registers unseen words in every copy, each with its own draw.
    pub fn ensure_words<S: AsRef<str>>(&mut self, tokens: &[S]) -> Result<()> {
        let mut fresh: Vec<&str> = Vec::new();
        for t in tokens {
            let t = t.as_ref();
            if !self.copies[0].model.vocabulary().contains(t) && !fresh.contains(&t) {
                fresh.push(t);
            }
        }
        if fresh.is_empty() {
            return Ok(());
        }
        let first_id = self.copies[0].model.vocabulary().len() as u64;
        for (i, copy) in self.copies.iter_mut().enumerate() {
            // Word ids are identical across copies, so the id keys the draw.
            for (j, w) in fresh.iter().enumerate() {
                let seed = mix(self.config.seed, i as u64, mix(SALT_WORD, first_id + j as u64, 0));
                copy.model.register_new_words(&[*w], seed)?;
            }
        }
        Ok(())
    }

    fn encode(&mut self, ex: &ExampleTriple) -> Result<EncodedExample> {
        if ex.utterance.is_empty() {
            return Err(Error::InvalidInput("empty utterance".into()));
        }
        self.ensure_words(&ex.utterance.tokens)?;
        self.copies[0]
            .model
            .encode_example(&ex.utterance, &ex.start, &ex.target)
    }

    /// Indices of the buffer used for training and for selection.
    fn split_buffer(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.buffer.len();
        match self.config.selection {
            Selection::OneOut if n >= 2 => (0..n - 1, n - 1..n),
            _ => (0..n, 0..n),
        }
    }

    /// Summed loss of every copy over the selection examples. Non-finite
    /// losses count as +inf.
    pub fn selection_losses(&self) -> Vec<f64> {
        let (_, va) = self.split_buffer();
        let examples: Vec<&EncodedExample> = self.encoded[va].iter().collect();
        self.copies
            .iter()
            .map(|c| {
                let total = summed_loss(&c.model, &examples);
                if total.is_finite() {
                    total
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    /// Argmin of [`selection_losses`](Self::selection_losses), lowest index on ties.
    pub fn select_model(&self) -> usize {
        argmin(&self.selection_losses())
    }

    /// Prediction of the currently selected copy, without feedback.
    pub fn predict(&mut self, utterance: &Utterance, start: &WorldState) -> Result<(usize, Vec<usize>)> {
        if utterance.is_empty() {
            return Err(Error::InvalidInput("empty utterance".into()));
        }
        self.ensure_words(&utterance.tokens)?;
        let chosen = self.select_model();
        let ex = self.copies[chosen].model.encode_example(utterance, start, start)?;
        Ok((chosen, self.copies[chosen].model.predict_encoded(&ex).tokens))
    }

    /// Select, predict, observe the target, record, buffer, then train.
    pub fn interact(&mut self, example: &ExampleTriple) -> Result<StepRecord> {
        let encoded = self.encode(example)?;
        let losses = self.selection_losses();
        let chosen = argmin(&losses);
        let predicted = self.copies[chosen].model.predict_encoded(&encoded).tokens;
        let correct = predicted[..] == encoded.target[..];
        let record = StepRecord {
            utterance: example.utterance.to_string(),
            predicted: state_tokens(&predicted),
            target: state_tokens(&encoded.target),
            correct,
            selected_model: chosen,
            losses,
        };
        self.buffer.push(example.clone());
        self.encoded.push(encoded);
        self.train_copies();
        self.log.push(record.clone());
        Ok(record)
    }

    fn train_copies(&mut self) {
        let (tr, _) = self.split_buffer();
        if tr.is_empty() || self.config.steps == 0 {
            return;
        }
        let l2 = T::lit(self.config.l2);
        let encoded = &self.encoded[tr];
        for (i, copy) in self.copies.iter_mut().enumerate() {
            if copy.quarantined {
                continue;
            }
            for _ in 0..self.config.steps {
                let ex = &encoded[copy.rng.gen_range(0..encoded.len())];
                let (loss, mut grads) = copy.model.loss_and_grads(&[ex], &copy.mask, &mut Dropout::off());
                let loss = loss + grads.add_l2(copy.model.params(), &copy.mask, l2);
                grads.apply_mask(&copy.mask);
                if !loss.is_finite() || !grads.all_finite() {
                    log::warn!("copy {i} diverged; it will no longer be updated");
                    copy.quarantined = true;
                    break;
                }
                copy.optimizer.step(copy.model.params_mut(), &grads);
                if !copy.model.params().all_finite() {
                    log::warn!("copy {i} produced non-finite weights; it will no longer be updated");
                    copy.quarantined = true;
                    break;
                }
            }
        }
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            config: self.config,
            online_accuracy: self.online_accuracy(),
            interactions: self.log.len(),
            quarantined: self.quarantined(),
            steps: self.log.clone(),
        }
    }
}

fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

/// Sum of per-example mean token NLL, batching equal-length utterances.
fn summed_loss<T: Scalar>(model: &ModelBundle<T>, examples: &[&EncodedExample]) -> f64 {
    let mut by_len: BTreeMap<usize, Vec<&EncodedExample>> = BTreeMap::new();
    for ex in examples {
        by_len.entry(ex.words.len()).or_default().push(ex);
    }
    let mut total = 0.0;
    for group in by_len.values() {
        let probs = softmax_rows(model.batch_logits(group).view());
        for (b, ex) in group.iter().enumerate() {
            let rows = probs
                .slice(ndarray::s![b * STATE_TOKENS..(b + 1) * STATE_TOKENS, ..])
                .to_owned();
            total += nll(&rows, &ex.target).as_f64();
        }
    }
    total
}

/// Runs a fresh session over `examples` and reports online accuracy.
pub fn run_session<T: Scalar>(
    base: &ModelBundle<T>,
    config: AdaptConfig,
    examples: &[ExampleTriple],
) -> Result<SessionReport> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("session has no examples".into()));
    }
    let mut session = AdaptSession::new(base, config)?;
    for ex in examples {
        session.interact(ex)?;
    }
    Ok(session.report())
}

/// Online hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub optimizers: Vec<OptimizerKind>,
    pub steps: Vec<usize>,
    pub l2: Vec<f64>,
    pub lr: Vec<f64>,
    pub selection: Vec<Selection>,
}

impl TuneGrid {
    /// 2 optimizers x 3 step counts x 4 penalties x 3 rates x 2 selections.
    pub fn full() -> Self {
        TuneGrid {
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::Sgd],
            steps: vec![100, 200, 500],
            l2: vec![0.0, 1e-2, 1e-3, 1e-4],
            lr: vec![1e-1, 1e-2, 1e-3],
            selection: vec![Selection::Greedy, Selection::OneOut],
        }
    }

    pub fn len(&self) -> usize {
        self.optimizers.len() * self.steps.len() * self.l2.len() * self.lr.len() * self.selection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Configurations in a fixed order, scopes, `k` and seed taken from `base`.
    pub fn points(&self, base: AdaptConfig) -> Vec<AdaptConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &optimizer in &self.optimizers {
            for &steps in &self.steps {
                for &l2 in &self.l2 {
                    for &lr in &self.lr {
                        for &selection in &self.selection {
                            out.push(AdaptConfig {
                                optimizer,
                                steps,
                                l2,
                                lr,
                                selection,
                                ..base
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub config: AdaptConfig,
    pub mean_online_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: AdaptConfig,
    pub best_accuracy: f64,
    pub records: Vec<TuneRecord>,
}

/// Grid search maximizing mean online accuracy over `sessions`; the first
/// point wins ties.
pub fn tune_online<T: Scalar>(
    base_model: &ModelBundle<T>,
    base: AdaptConfig,
    grid: &TuneGrid,
    sessions: &[&[ExampleTriple]],
) -> Result<TuneResult> {
    if sessions.is_empty() || grid.is_empty() {
        return Err(Error::InvalidInput("tuning needs sessions and a non-empty grid".into()));
    }
    let mut records = Vec::with_capacity(grid.len());
    for config in grid.points(base) {
        let mut total = 0.0;
        for s in sessions {
            total += run_session(base_model, config, s)?.online_accuracy;
        }
        let mean = total / sessions.len() as f64;
        log::debug!("tune {config:?}: {mean:.4}");
        records.push(TuneRecord {
            config,
            mean_online_accuracy: mean,
        });
    }
    let best = records.iter().fold(&records[0], |b, r| {
        if r.mean_online_accuracy > b.mean_online_accuracy {
            r
        } else {
            b
        }
    });
    Ok(TuneResult {
        best: best.config,
        best_accuracy: best.mean_online_accuracy,
        records,
    })
}
