//! Supervised training on grammar data, evaluation and hyperparameter sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::STATE_TOKENS;
use crate::datagen::ExampleTriple;
use crate::error::{Error, Result};
use crate::neural::model::argmax_rows;
use crate::neural::{
    Architecture, DecoderKind, Dropout, EncodedExample, EncoderKind, ModelBundle, Optimizer, OptimizerKind, TrainMask,
    Vocabulary,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    /// Steps between validation passes.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub l2: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(architecture: Architecture) -> Self {
        TrainConfig {
            architecture,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            max_steps: None,
            eval_every: 500,
            patience: 10,
            l2: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "batch size and eval interval must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidConfig("l2 weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous point.
    pub train_loss: f64,
    pub val_exact_match: f64,
    pub val_token_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the best validation pass.
    pub model: ModelBundle<T>,
    pub best_val_exact_match: f64,
    pub best_step: usize,
    pub steps: usize,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    /// Fraction whose full 23-token argmax output equals the target.
    pub exact_match: f64,
    pub token_accuracy: f64,
}

/// Sorted word types of the utterances.
pub fn collect_vocabulary<'a>(examples: impl IntoIterator<Item = &'a ExampleTriple>) -> Result<Vocabulary> {
    let words: BTreeSet<&str> = examples
        .into_iter()
        .flat_map(|e| e.utterance.tokens.iter().map(String::as_str))
        .collect();
    let mut vocab = Vocabulary::new(words)?;
    vocab.freeze();
    Ok(vocab)
}

pub fn encode_all<T: Scalar>(model: &ModelBundle<T>, examples: &[ExampleTriple]) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| model.encode_example(&e.utterance, &e.start, &e.target))
        .collect()
}

/// Indices grouped by utterance length, chunked into batches.
fn length_batches(examples: &[EncodedExample], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        buckets.entry(examples[i].words.len()).or_default().push(i);
    }
    buckets
        .into_values()
        .flat_map(|b| b.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

impl EvalReport {
    /// Scores `(predicted, target)` token sequences.
    pub fn from_predictions<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Self {
        let (mut n, mut exact, mut hits, mut total) = (0usize, 0usize, 0usize, 0usize);
        for (pred, target) in pairs {
            let h = pred.iter().zip(target).filter(|(p, t)| p == t).count();
            n += 1;
            hits += h;
            total += target.len();
            exact += usize::from(h == target.len() && pred.len() == target.len());
        }
        EvalReport {
            examples: n,
            exact_match: exact as f64 / n.max(1) as f64,
            token_accuracy: hits as f64 / total.max(1) as f64,
        }
    }
}

pub fn evaluate_encoded<T: Scalar>(model: &ModelBundle<T>, examples: &[EncodedExample]) -> EvalReport {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut predicted: Vec<Vec<usize>> = vec![Vec::new(); examples.len()];
    for batch in length_batches(examples, &order, 256) {
        let refs: Vec<&EncodedExample> = batch.iter().map(|&i| &examples[i]).collect();
        let tokens = argmax_rows(&model.batch_logits(&refs));
        for (row, &i) in tokens.chunks(STATE_TOKENS).zip(&batch) {
            predicted[i] = row.to_vec();
        }
    }
    EvalReport::from_predictions(
        predicted
            .iter()
            .zip(examples)
            .map(|(p, e)| (p.as_slice(), &e.target[..])),
    )
}

/// Errors on words missing from the model's vocabulary.
pub fn evaluate<T: Scalar>(model: &ModelBundle<T>, examples: &[ExampleTriple]) -> Result<EvalReport> {
    Ok(evaluate_encoded(model, &encode_all(model, examples)?))
}

/// Trains from scratch and returns the parameters with the best validation
/// exact match. The vocabulary covers the training and validation utterances.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train: &[ExampleTriple],
    val: &[ExampleTriple],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let vocab = collect_vocabulary(train.iter().chain(val))?;
    let mut model = ModelBundle::<T>::new(config.architecture, vocab, config.seed)?;
    let train_enc = encode_all(&model, train)?;
    let val_enc = encode_all(&model, val)?;

    let mask = TrainMask::all(model.params());
    let mut optimizer = Optimizer::<T>::new(config.optimizer, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let l2 = T::lit(config.l2);

    let mut best = (model.clone(), f64::NEG_INFINITY, 0usize);
    let mut curve = Vec::new();
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut order: Vec<usize> = (0..train_enc.len()).collect();

    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut batches = length_batches(&train_enc, &order, config.batch_size);
        batches.shuffle(&mut rng);
        for batch in batches {
            let refs: Vec<&EncodedExample> = batch.iter().map(|&i| &train_enc[i]).collect();
            let (loss, mut grads) = {
                let mut drop = Dropout::new(config.architecture.dropout, &mut rng);
                model.loss_and_grads(&refs, &mask, &mut drop)
            };
            let loss = loss + grads.add_l2(model.params(), &mask, l2);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!("training diverged at step {step}")));
            }
            optimizer.step(model.params_mut(), &grads);
            step += 1;
            loss_sum += loss.as_f64();
            loss_count += 1;

            let last = config.max_steps.is_some_and(|m| step >= m);
            if step.is_multiple_of(config.eval_every) || last {
                let report = evaluate_encoded(&model, &val_enc);
                curve.push(CurvePoint {
                    step,
                    epoch,
                    train_loss: loss_sum / loss_count as f64,
                    val_exact_match: report.exact_match,
                    val_token_accuracy: report.token_accuracy,
                });
                loss_sum = 0.0;
                loss_count = 0;
                log::debug!(
                    "{} step {step}: loss {:.4} val {:.4}",
                    config.architecture.name(),
                    curve.last().unwrap().train_loss,
                    report.exact_match
                );
                if report.exact_match > best.1 {
                    best = (model.clone(), report.exact_match, step);
                    stale = 0;
                } else {
                    stale += 1;
                }
                if stale >= config.patience || last || report.exact_match >= 1.0 {
                    break 'epochs;
                }
            }
        }
    }
    if curve.last().is_none_or(|p| p.step != step) {
        let report = evaluate_encoded(&model, &val_enc);
        curve.push(CurvePoint {
            step,
            epoch: config.max_epochs.saturating_sub(1),
            train_loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                f64::NAN
            },
            val_exact_match: report.exact_match,
            val_token_accuracy: report.token_accuracy,
        });
        if report.exact_match > best.1 {
            best = (model.clone(), report.exact_match, step);
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_val_exact_match: best.1,
        best_step: best.2,
        steps: step,
        curve,
    })
}

/// Hyperparameter grid; empty lists mean "use the base value".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub pairs: Vec<(EncoderKind, DecoderKind)>,
    #[serde(default)]
    pub lstm_layers: Vec<usize>,
    #[serde(default)]
    pub conv_layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training settings shared by every point; its architecture is ignored.
    pub base: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl SweepGrid {
    /// Layers {1,2} for LSTMs and {4,5} for convolutions, hidden
    /// {32,64,128,256}, dropout {0,0.2,0.5}.
    pub fn full(base: TrainConfig) -> Self {
        SweepGrid {
            pairs: Architecture::all_pairs().to_vec(),
            lstm_layers: vec![1, 2],
            conv_layers: vec![4, 5],
            hidden: vec![32, 64, 128, 256],
            dropout: vec![0.0, 0.2, 0.5],
            seeds: vec![0],
            base,
        }
    }

    /// Every configuration in a fixed order. Layer counts only vary for the
    /// kinds an architecture uses.
    pub fn points(&self) -> Vec<TrainConfig> {
        let or_base = |v: &Vec<usize>, b: usize| if v.is_empty() { vec![b] } else { v.clone() };
        let base_arch = self.base.architecture;
        let mut out = Vec::new();
        for &(enc, dec) in &self.pairs {
            let uses_lstm = enc == EncoderKind::Lstm || dec == DecoderKind::Lstm;
            let uses_conv = enc == EncoderKind::Conv || dec == DecoderKind::Conv;
            let lstm = if uses_lstm {
                or_base(&self.lstm_layers, base_arch.lstm_layers)
            } else {
                vec![base_arch.lstm_layers]
            };
            let conv = if uses_conv {
                or_base(&self.conv_layers, base_arch.conv_layers)
            } else {
                vec![base_arch.conv_layers]
            };
            for &ll in &lstm {
                for &cl in &conv {
                    for &h in &self.hidden {
                        for &d in &self.dropout {
                            for &seed in &self.seeds {
                                let mut arch = Architecture::new(enc, dec, h);
                                arch.lstm_layers = ll;
                                arch.conv_layers = cl;
                                arch.kernel_size = base_arch.kernel_size;
                                arch.dropout = d;
                                out.push(TrainConfig {
                                    architecture: arch,
                                    seed,
                                    ..self.base
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub index: usize,
    pub architecture: String,
    pub config: TrainConfig,
    pub val_exact_match: f64,
    pub val_token_accuracy: f64,
    pub best_step: usize,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// One record per evaluated configuration, in grid order.
    pub leaderboard: Vec<SweepRecord>,
    /// Highest validation exact match per architecture name; ties go to the earlier point.
    pub best: BTreeMap<String, SweepRecord>,
}

/// Trains every grid point (or the first `budget`) on `threads` workers.
/// Records are appended to `ledger` as JSON lines in completion order.
pub fn sweep<T: Scalar>(
    grid: &SweepGrid,
    budget: Option<usize>,
    threads: usize,
    train_set: &[ExampleTriple],
    val_set: &[ExampleTriple],
    ledger: Option<&Path>,
) -> Result<SweepResult> {
    let mut points = grid.points();
    if let Some(b) = budget {
        points.truncate(b);
    }
    let file = match ledger {
        Some(p) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Result<SweepRecord>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            scope.spawn(|| loop {
                let index = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(config) = points.get(index) else { break };
                let started = Instant::now();
                let record = train::<T>(config, train_set, val_set).map(|out| {
                    let best = out
                        .curve
                        .iter()
                        .find(|p| p.step == out.best_step)
                        .map_or(f64::NAN, |p| p.val_token_accuracy);
                    SweepRecord {
                        index,
                        architecture: config.architecture.name().to_string(),
                        config: *config,
                        val_exact_match: out.best_val_exact_match,
                        val_token_accuracy: best,
                        best_step: out.best_step,
                        steps: out.steps,
                        seconds: started.elapsed().as_secs_f64(),
                    }
                });
                if let (Ok(r), Some(f)) = (&record, &file) {
                    let line = serde_json::to_string(r).expect("record serializes");
                    let mut f = f.lock().unwrap();
                    if let Err(e) = writeln!(f, "{line}") {
                        log::warn!("could not append sweep record: {e}");
                    }
                }
                results.lock().unwrap().push(record);
            });
        }
    });
    let mut leaderboard = results.into_inner().unwrap().into_iter().collect::<Result<Vec<_>>>()?;
    leaderboard.sort_by_key(|r| r.index);
    let mut best: BTreeMap<String, SweepRecord> = BTreeMap::new();
    for r in &leaderboard {
        match best.get(&r.architecture) {
            Some(b) if b.val_exact_match >= r.val_exact_match => {}
            _ => {
                best.insert(r.architecture.clone(), r.clone());
            }
        }
    }
    Ok(SweepResult { leaderboard, best })
}
