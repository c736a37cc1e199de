//! Benchmarks built on the online learner: word recovery, human (or
//! synthetic-dialect) sessions, the scrambled-grammar control, and analyses.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::{deserialize_state, Instruction, Utterance};
use crate::datagen::{
    build_recovery_sessions, build_validation_session, novel_token, sample_state, CorruptionMap, ExampleTriple,
    RecoveryCondition, Scrambler, SplitSpec, SESSION_UTTERANCES, STATES_PER_UTTERANCE,
};
use crate::error::{Error, Result};
use crate::neural::{cosine, ModelBundle};
use crate::online::{
    run_session, AdaptConfig, AdaptScope, ReuseScope, SessionReport, TuneGrid, TuneRecord, TuneResult,
};
use crate::scalar::Scalar;

/// Wire form of one example: tokens only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub utt: Vec<String>,
    pub start: Vec<String>,
    pub target: Vec<String>,
}

impl ExampleRecord {
    pub fn from_example(ex: &ExampleTriple) -> Self {
        ExampleRecord {
            utt: ex.utterance.tokens.clone(),
            start: ex.start.to_tokens(),
            target: ex.target.to_tokens(),
        }
    }

    pub fn to_example(&self) -> Result<ExampleTriple> {
        if self.utt.is_empty() {
            return Err(Error::InvalidInput("empty utterance".into()));
        }
        Ok(ExampleTriple {
            utterance: Utterance::new(self.utt.clone()),
            start: deserialize_state(&self.start)?,
            target: deserialize_state(&self.target)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSession {
    pub id: String,
    pub examples: Vec<ExampleTriple>,
    /// Accuracy reported by another system on this session, for correlation.
    pub external_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    examples: Vec<ExampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub sessions: usize,
    pub examples: usize,
    pub skipped: usize,
}

fn convert(record: SessionRecord) -> std::result::Result<HumanSession, String> {
    let examples = record
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| e.to_example().map_err(|err| format!("example {}: {err}", i + 1)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(HumanSession {
        id: record.id,
        examples,
        external_accuracy: record.accuracy,
    })
}

/// Parses one file. Accepted layouts: JSON lines of session objects
/// (`{"id", "examples", "accuracy"?}`), JSON lines of examples (one
/// session named after the file), or a JSON array of either.
pub fn parse_sessions(text: &str, default_id: &str) -> Result<(Vec<HumanSession>, IngestSummary)> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Item {
        Session(SessionRecord),
        Example(ExampleRecord),
    }

    let trimmed = text.trim_start();
    let items: Vec<(usize, Item)> = if trimmed.starts_with('[') {
        let items: Vec<Item> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("line {}: {e}", e.line())))?;
        items.into_iter().map(|i| (0, i)).collect()
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str::<Item>(l)
                    .map(|i| (n + 1, i))
                    .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<_>>()?
    };

    let mut records = Vec::new();
    let mut loose = Vec::new();
    for (_, item) in items {
        match item {
            Item::Session(s) => records.push(s),
            Item::Example(e) => loose.push(e),
        }
    }
    if !loose.is_empty() {
        records.push(SessionRecord {
            id: default_id.to_string(),
            examples: loose,
            accuracy: None,
        });
    }

    let mut summary = IngestSummary::default();
    let mut sessions = Vec::new();
    for record in records {
        let id = record.id.clone();
        match convert(record) {
            Ok(s) => {
                summary.examples += s.examples.len();
                sessions.push(s);
            }
            Err(why) => {
                log::warn!("skipping session {id}: {why}");
                summary.skipped += 1;
            }
        }
    }
    summary.sessions = sessions.len();
    Ok((sessions, summary))
}

/// Reads a session file, or every `.json`/`.jsonl` file of a directory in name order.
pub fn ingest_human_sessions(path: impl AsRef<Path>) -> Result<(Vec<HumanSession>, IngestSummary)> {
    let path = path.as_ref();
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = Vec::new();
    let mut total = IngestSummary::default();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("session").to_string();
        let (sessions, summary) = parse_sessions(&std::fs::read_to_string(&f)?, &stem)
            .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        total.sessions += summary.sessions;
        total.examples += summary.examples;
        total.skipped += summary.skipped;
        all.extend(sessions);
    }
    Ok((all, total))
}

/// Writes sessions as JSON lines of session objects.
pub fn write_sessions(path: impl AsRef<Path>, sessions: &[HumanSession]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sessions {
        let record = SessionRecord {
            id: s.id.clone(),
            examples: s.examples.iter().map(ExampleRecord::from_example).collect(),
            accuracy: s.external_accuracy,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson needs two equal-length samples of size >= 2".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("pearson is undefined for constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Applies `f` to every item on up to `threads` workers, keeping order.
pub fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<O>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session: String,
    pub online_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: RecoveryCondition,
    pub mean_online_accuracy: f64,
    pub sessions: Vec<SessionScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub config: AdaptConfig,
    pub conditions: Vec<ConditionResult>,
}

impl VariantResult {
    pub fn condition(&self, c: RecoveryCondition) -> Option<&ConditionResult> {
        self.conditions.iter().find(|r| r.condition == c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub variants: Vec<VariantResult>,
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let conds: Vec<RecoveryCondition> = self
            .variants
            .first()
            .map(|v| v.conditions.iter().map(|c| c.condition).collect())
            .unwrap_or_default();
        write!(f, "{:<28}", "variant")?;
        for c in &conds {
            write!(f, "{:>9}", c.label())?;
        }
        writeln!(f)?;
        for v in &self.variants {
            write!(f, "{:<28}", v.name)?;
            for c in &v.conditions {
                write!(f, "{:>9.1}", 100.0 * c.mean_online_accuracy)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// A named online configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: AdaptConfig,
}

impl Variant {
    pub fn new(config: AdaptConfig) -> Self {
        Variant {
            name: format!("reuse={} adapt={} k={}", config.reuse, config.adapt, config.k),
            config,
        }
    }
}

/// The word-recovery comparison: embeddings only, a fresh encoder over the
/// kept decoder, a fresh model, and embeddings only with a single copy.
pub fn recovery_variants(base: AdaptConfig) -> Vec<Variant> {
    vec![
        Variant::new(AdaptConfig {
            reuse: ReuseScope::All,
            adapt: AdaptScope::Embeddings,
            k: 7,
            ..base
        }),
        Variant::new(AdaptConfig {
            reuse: ReuseScope::Dec,
            adapt: AdaptScope::Encoder,
            k: 7,
            ..base
        }),
        Variant::new(AdaptConfig {
            reuse: ReuseScope::None,
            adapt: AdaptScope::All,
            k: 7,
            ..base
        }),
        Variant::new(AdaptConfig {
            reuse: ReuseScope::All,
            adapt: AdaptScope::Embeddings,
            k: 1,
            ..base
        }),
    ]
}

/// Mean online accuracy of each variant on each condition's sessions.
pub fn run_recovery_benchmark<T: Scalar>(
    model: &ModelBundle<T>,
    split: &SplitSpec,
    conditions: &[RecoveryCondition],
    variants: &[Variant],
    threads: usize,
) -> Result<RecoveryReport> {
    let sessions: Vec<(RecoveryCondition, Vec<crate::datagen::RecoverySession>)> = conditions
        .iter()
        .map(|&c| Ok((c, build_recovery_sessions(split, c)?)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for v in variants {
        let mut conds = Vec::new();
        for (c, list) in &sessions {
            let scores = par_map(list, threads, |s| {
                run_session(model, v.config, &s.examples).map(|r| SessionScore {
                    session: s.name.clone(),
                    online_accuracy: r.online_accuracy,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let accs: Vec<f64> = scores.iter().map(|s| s.online_accuracy).collect();
            log::info!("{} {}: {:.3}", v.name, c.label(), mean(&accs));
            conds.push(ConditionResult {
                condition: *c,
                mean_online_accuracy: mean(&accs),
                sessions: scores,
            });
        }
        out.push(VariantResult {
            name: v.name.clone(),
            config: v.config,
            conditions: conds,
        });
    }
    Ok(RecoveryReport { variants: out })
}

/// Grid search per variant over `sessions`, grid points spread over
/// `threads` workers. Returns each variant with its best configuration;
/// the earlier point wins ties, as in [`tune_online`](crate::online::tune_online).
pub fn tune_variants<T: Scalar>(
    model: &ModelBundle<T>,
    variants: &[Variant],
    grid: &TuneGrid,
    sessions: &[&[ExampleTriple]],
    threads: usize,
) -> Result<Vec<(Variant, TuneResult)>> {
    if sessions.is_empty() || grid.is_empty() {
        return Err(Error::InvalidInput("tuning needs sessions and a non-empty grid".into()));
    }
    variants
        .iter()
        .map(|v| {
            let points = grid.points(v.config);
            let records = par_map(&points, threads, |&config| {
                let mut total = 0.0;
                for s in sessions {
                    total += run_session(model, config, s)?.online_accuracy;
                }
                Ok(TuneRecord {
                    config,
                    mean_online_accuracy: total / sessions.len() as f64,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let best = records
                .iter()
                .fold(&records[0], |b, r| {
                    if r.mean_online_accuracy > b.mean_online_accuracy {
                        r
                    } else {
                        b
                    }
                })
                .clone();
            log::info!(
                "tuned {}: {:.3} with {:?}",
                v.name,
                best.mean_online_accuracy,
                best.config
            );
            let tuned = Variant {
                name: v.name.clone(),
                config: best.config,
            };
            Ok((
                tuned,
                TuneResult {
                    best: best.config,
                    best_accuracy: best.mean_online_accuracy,
                    records,
                },
            ))
        })
        .collect()
}

/// The recovery validation session, for tuning.
pub fn recovery_validation_examples(split: &SplitSpec) -> Result<Vec<ExampleTriple>> {
    Ok(build_validation_session(split)?.examples)
}

/// The six reuse x adapt cells of the human benchmark.
pub fn human_cells() -> Vec<(ReuseScope, AdaptScope)> {
    vec![
        (ReuseScope::All, AdaptScope::Embeddings),
        (ReuseScope::All, AdaptScope::Encoder),
        (ReuseScope::All, AdaptScope::All),
        (ReuseScope::Dec, AdaptScope::Encoder),
        (ReuseScope::Dec, AdaptScope::All),
        (ReuseScope::None, AdaptScope::All),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub reuse: ReuseScope,
    pub adapt: AdaptScope,
    pub config: AdaptConfig,
    pub mean_online_accuracy: f64,
    /// Against the sessions' external accuracies, when all are present.
    pub pearson_r: Option<f64>,
    pub sessions: Vec<SessionScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub cells: Vec<MatrixCell>,
}

impl ResultsMatrix {
    pub fn cell(&self, reuse: ReuseScope, adapt: AdaptScope) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.reuse == reuse && c.adapt == adapt)
    }
}

impl fmt::Display for ResultsMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8}{:<12}{:>9}{:>8}{:>10}",
            "reuse", "adapt", "acc", "r", "sessions"
        )?;
        for c in &self.cells {
            let r = c.pearson_r.map_or("-".to_string(), |r| format!("{r:.2}"));
            writeln!(
                f,
                "{:<8}{:<12}{:>9.1}{:>8}{:>10}",
                c.reuse.to_string(),
                c.adapt.to_string(),
                100.0 * c.mean_online_accuracy,
                r,
                c.sessions.len()
            )?;
        }
        Ok(())
    }
}

/// Replays every session under each configuration.
pub fn run_human_benchmark<T: Scalar>(
    model: &ModelBundle<T>,
    sessions: &[HumanSession],
    configs: &[AdaptConfig],
    threads: usize,
) -> Result<ResultsMatrix> {
    let mut cells = Vec::new();
    for &config in configs {
        config.validate()?;
        let scores = par_map(sessions, threads, |s| {
            run_session(model, config, &s.examples).map(|r| SessionScore {
                session: s.id.clone(),
                online_accuracy: r.online_accuracy,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let accs: Vec<f64> = scores.iter().map(|s| s.online_accuracy).collect();
        let external: Option<Vec<f64>> = sessions.iter().map(|s| s.external_accuracy).collect();
        let pearson_r = external.and_then(|ext| pearson(&accs, &ext).ok());
        cells.push(MatrixCell {
            reuse: config.reuse,
            adapt: config.adapt,
            config,
            mean_online_accuracy: mean(&accs),
            pearson_r,
            sessions: scores,
        });
    }
    Ok(ResultsMatrix { cells })
}

/// Mean online accuracy with the decoder kept and the encoder relearned,
/// typically for a model trained on a scrambled grammar.
pub fn run_scramble_control<T: Scalar>(
    scrambled_model: &ModelBundle<T>,
    sessions: &[HumanSession],
    config: AdaptConfig,
    threads: usize,
) -> Result<f64> {
    let config = AdaptConfig {
        reuse: ReuseScope::Dec,
        adapt: if config.adapt == AdaptScope::All {
            AdaptScope::All
        } else {
            AdaptScope::Encoder
        },
        ..config
    };
    let m = run_human_benchmark(scrambled_model, sessions, &[config], threads)?;
    Ok(m.cells[0].mean_online_accuracy)
}

/// Grammar sessions in an invented language: words permuted and reordered
/// by a per-session scrambler, then every word replaced by a novel token.
pub fn synthetic_dialect_sessions(split: &SplitSpec, count: usize, seed: u64) -> Result<Vec<HumanSession>> {
    let words: Vec<&str> = crate::blockworld::grammar_vocabulary();
    let corruption = CorruptionMap::new(words.iter().map(|w| (w.to_string(), novel_token(w))))?;
    let instructions = Instruction::all();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 24));
            let scrambler = Scrambler::new(rng.gen());
            let chosen: Vec<&Instruction> = instructions.choose_multiple(&mut rng, SESSION_UTTERANCES).collect();
            let mut examples = Vec::new();
            for instr in chosen {
                for _ in 0..STATES_PER_UTTERANCE {
                    let start = sample_state(&split.test_columns, &mut rng);
                    examples.push(ExampleTriple::from_instruction(instr, start));
                }
            }
            examples.shuffle(&mut rng);
            Ok(HumanSession {
                id: format!("dialect-{i}"),
                examples: corruption.corrupt(&scrambler.apply(&examples)),
                external_accuracy: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub word: String,
    /// Offline-vocabulary words by descending cosine similarity.
    pub neighbours: Vec<(String, f64)>,
}

/// Cosine similarity of each probe word's embedding to every offline word.
pub fn embedding_similarity_report<T: Scalar, S: AsRef<str>>(
    model: &ModelBundle<T>,
    probes: &[S],
) -> Result<Vec<SimilarityRow>> {
    let vocab = model.vocabulary();
    let reference: Vec<&str> = vocab.words()[..vocab.offline_size()]
        .iter()
        .map(String::as_str)
        .collect();
    probes
        .iter()
        .map(|p| {
            let e = model.word_embedding(p.as_ref())?;
            let mut neighbours = reference
                .iter()
                .map(|w| Ok((w.to_string(), cosine(e, model.word_embedding(w)?)?.as_f64())))
                .collect::<Result<Vec<_>>>()?;
            neighbours.sort_by(|a, b| b.1.total_cmp(&a.1));
            Ok(SimilarityRow {
                word: p.as_ref().to_string(),
                neighbours,
            })
        })
        .collect()
}

/// Per-condition means of a set of reports, keyed by label.
pub fn condition_means(report: &RecoveryReport) -> BTreeMap<String, BTreeMap<String, f64>> {
    report
        .variants
        .iter()
        .map(|v| {
            (
                v.name.clone(),
                v.conditions
                    .iter()
                    .map(|c| (c.condition.label().to_string(), c.mean_online_accuracy))
                    .collect(),
            )
        })
        .collect()
}

/// Session report together with the model it left behind, for analyses.
pub fn run_session_keep_model<T: Scalar>(
    base: &ModelBundle<T>,
    config: AdaptConfig,
    examples: &[ExampleTriple],
) -> Result<(SessionReport, ModelBundle<T>)> {
    let mut session = crate::online::AdaptSession::new(base, config)?;
    for ex in examples {
        session.interact(ex)?;
    }
    let chosen = session.select_model();
    Ok((session.report(), session.model(chosen).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_split;

    #[test]
    fn pearson_examples() {
        let v = [1.0, 2.0, 5.0, 3.0];
        assert!((pearson(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((pearson(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        // sxy = 4.1, sxx = 2, syy = 25.22 / 3.
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.1]).unwrap();
        assert!((r - 4.1 / (2.0f64 * 25.22 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.999_900_867).abs() < 1e-8);
        assert!(pearson(&[1.0, 1.0], &[2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn sessions_round_trip_and_ingest_formats() {
        let split = make_split(0);
        let mut sessions = synthetic_dialect_sessions(&split, 2, 1).unwrap();
        sessions[0].external_accuracy = Some(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_sessions(&path, &sessions).unwrap();
        let (back, summary) = ingest_human_sessions(&path).unwrap();
        assert_eq!(back, sessions);
        assert_eq!(
            summary,
            IngestSummary {
                sessions: 2,
                examples: 90,
                skipped: 0
            }
        );

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(ingest_human_sessions(&empty).unwrap().0.is_empty());

        // A bare example array is one session named after the file.
        let ex = ExampleRecord::from_example(&sessions[0].examples[0]);
        let arr = dir.path().join("bare.json");
        std::fs::write(&arr, serde_json::to_string(&vec![ex.clone(), ex.clone()]).unwrap()).unwrap();
        let (one, _) = ingest_human_sessions(&arr).unwrap();
        assert_eq!((one.len(), one[0].id.as_str(), one[0].examples.len()), (1, "bare", 2));

        // Bad states skip the session; bad JSON is a located error.
        let mut tall = ex.clone();
        tall.start.push("RED".into());
        let bad = dir.path().join("bad.jsonl");
        let lines = [
            serde_json::to_string(&SessionRecord {
                id: "ok".into(),
                examples: vec![ex.clone()],
                accuracy: None,
            })
            .unwrap(),
            serde_json::to_string(&SessionRecord {
                id: "tall".into(),
                examples: vec![tall],
                accuracy: None,
            })
            .unwrap(),
        ];
        std::fs::write(&bad, lines.join("\n")).unwrap();
        let (kept, summary) = ingest_human_sessions(&bad).unwrap();
        assert_eq!((kept.len(), summary.skipped), (1, 1));
        std::fs::write(&bad, format!("{}\n{{oops", lines[0])).unwrap();
        let err = ingest_human_sessions(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn dialect_sessions_use_only_novel_words() {
        let split = make_split(0);
        let sessions = synthetic_dialect_sessions(&split, 3, 9).unwrap();
        let grammar = crate::blockworld::grammar_vocabulary();
        for s in &sessions {
            assert_eq!(s.examples.len(), 45);
            for ex in &s.examples {
                assert!(ex.utterance.tokens.iter().all(|t| !grammar.contains(&t.as_str())));
            }
        }
        assert_ne!(sessions[0].examples[0].utterance, sessions[1].examples[0].utterance);
    }

    #[test]
    fn similarity_table_shape() {
        use crate::neural::{Architecture, DecoderKind, EncoderKind, Vocabulary};
        let mut vocab = Vocabulary::new(crate::blockworld::grammar_vocabulary()).unwrap();
        vocab.freeze();
        let mut m =
            ModelBundle::<f64>::new(Architecture::new(EncoderKind::Bow, DecoderKind::Lstm, 8), vocab, 0).unwrap();
        m.register_new_words(&["braun"], 3).unwrap();
        let rows = embedding_similarity_report(&m, &["red", "braun"]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.neighbours.len() == 19));
        assert_eq!(rows[0].neighbours[0].0, "red");
        assert!((rows[0].neighbours[0].1 - 1.0).abs() < 1e-12);
        assert!(embedding_similarity_report(&m, &["nope"]).is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..50).collect();
        assert_eq!(par_map(&xs, 4, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
