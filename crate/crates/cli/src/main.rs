use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use shrdlurn::datagen::{
    build_recovery_sessions, generate, make_split, scramble_language, Counts, Dataset, RecoveryCondition, SplitSpec,
    SplitTag,
};
use shrdlurn::experiments::{
    embedding_similarity_report, human_cells, ingest_human_sessions, recovery_validation_examples, recovery_variants,
    run_human_benchmark, run_recovery_benchmark, run_scramble_control, run_session_keep_model,
    synthetic_dialect_sessions, tune_variants, write_sessions, HumanSession, Variant,
};
use shrdlurn::neural::{checkpoint, parse_pair_name, Architecture, OptimizerKind};
use shrdlurn::offline::{evaluate, sweep, train, SweepGrid, TrainConfig};
use shrdlurn::online::{run_session, AdaptConfig, AdaptScope, ReuseScope, Selection, TuneGrid};
use shrdlurn::Model;

#[derive(Parser)]
#[command(
    name = "shrdlurn",
    version,
    about = "Train and adapt a neural instruction follower for the blocks game"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a split and its train/val/test datasets.
    Datagen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42_000)]
        train: usize,
        #[arg(long, default_value_t = 4_000)]
        val: usize,
        #[arg(long, default_value_t = 4_000)]
        test: usize,
    },
    /// Write session files: recovery sessions or synthetic dialects.
    Sessions {
        #[command(subcommand)]
        kind: SessionKind,
    },
    /// Train one architecture offline.
    Train(TrainArgs),
    /// Grid search over architectures and sizes.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// JSON grid; the full grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value = "sweep.jsonl")]
        ledger: PathBuf,
    },
    /// Exact match and token accuracy of a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Replay session files through the online learner.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        #[command(flatten)]
        online: OnlineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word recovery, reuse x adapt matrix, scrambled-grammar control.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Embedding similarity after adaptation.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// JSON object of online config overrides used for new sessions.
        #[arg(long)]
        default_config: Option<PathBuf>,
        #[arg(long, default_value_t = 3600)]
        idle_secs: u64,
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Subcommand)]
enum SessionKind {
    /// Word-recovery sessions for one condition (1, 2, 3 or all).
    Recovery {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "all")]
        condition: RecoveryCondition,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grammar sessions reworded into invented languages.
    Dialect {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchKind {
    /// Word recovery: tuned variants on every corruption condition.
    Recovery {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        tune: TuneArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The reuse x adapt matrix on human (or dialect) sessions.
    Human {
        #[arg(long)]
        ckpt: PathBuf,
        /// Session file or directory; synthetic dialects when omitted.
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Leading sessions held out for tuning.
        #[arg(long, default_value_t = 3)]
        validation: usize,
        #[command(flatten)]
        tune: TuneArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoder reuse from a model trained on a scrambled grammar.
    Scramble {
        /// Checkpoint trained with `train --scramble`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[command(flatten)]
        online: OnlineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Adapt through one session, then compare new word embeddings to the original vocabulary.
    Embeddings {
        #[arg(long)]
        ckpt: PathBuf,
        /// Session file; its first session is used.
        #[arg(long)]
        sessions: PathBuf,
        /// Probe words; every word the session introduced when omitted.
        #[arg(long, value_delimiter = ',')]
        words: Vec<String>,
        #[command(flatten)]
        online: OnlineArgs,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by `datagen`; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "seq2conv")]
    arch: String,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long)]
    lstm_layers: Option<usize>,
    #[arg(long)]
    conv_layers: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Train on the grammar rewritten by a scrambler with this seed.
    #[arg(long)]
    scramble: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Learning curve as JSON lines.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Default)]
struct OnlineArgs {
    #[arg(long)]
    reuse: Option<ReuseScope>,
    #[arg(long)]
    adapt: Option<AdaptScope>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    selection: Option<Selection>,
    #[arg(long)]
    online_seed: Option<u64>,
}

impl OnlineArgs {
    fn config(&self) -> Result<AdaptConfig> {
        let d = AdaptConfig::default();
        let c = AdaptConfig {
            reuse: self.reuse.unwrap_or(d.reuse),
            adapt: self.adapt.unwrap_or(d.adapt),
            k: self.k.unwrap_or(d.k),
            steps: self.steps.unwrap_or(d.steps),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            lr: self.lr.unwrap_or(d.lr),
            l2: self.l2.unwrap_or(d.l2),
            selection: self.selection.unwrap_or(d.selection),
            seed: self.online_seed.unwrap_or(d.seed),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TuneArgs {
    /// JSON tuning grid; the full grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Skip tuning and use the default online config.
    #[arg(long)]
    no_tune: bool,
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

impl TuneArgs {
    fn grid(&self) -> Result<Option<TuneGrid>> {
        if self.no_tune {
            return Ok(None);
        }
        match &self.grid {
            Some(p) => Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?)),
            None => Ok(Some(TuneGrid::full())),
        }
    }
}

fn load_data(args: &DataArgs) -> Result<(SplitSpec, Dataset, Dataset, Dataset)> {
    let (split, mut train_set, mut val, test) = match &args.data {
        Some(dir) => (
            SplitSpec::load(dir.join("split.json"))?,
            Dataset::read(dir.join("train.tsv"), SplitTag::Train)?,
            Dataset::read(dir.join("val.tsv"), SplitTag::Val)?,
            Dataset::read(dir.join("test.tsv"), SplitTag::Test)?,
        ),
        None => {
            let split = make_split(args.seed);
            let counts = Counts {
                train: args.train_limit.unwrap_or(Counts::default().train),
                val: args.val_limit.unwrap_or(Counts::default().val),
                ..Counts::default()
            };
            let d = generate(&split, counts);
            (split, d.train, d.val, d.test)
        }
    };
    if let Some(n) = args.train_limit {
        train_set = train_set.truncated(n);
    }
    if let Some(n) = args.val_limit {
        val = val.truncated(n);
    }
    Ok((split, train_set, val, test))
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_sessions(path: Option<&Path>, seed: u64) -> Result<Vec<HumanSession>> {
    match path {
        Some(p) => {
            let (sessions, summary) = ingest_human_sessions(p)?;
            eprintln!(
                "ingested {} sessions, {} examples ({} skipped)",
                summary.sessions, summary.examples, summary.skipped
            );
            Ok(sessions)
        }
        None => Ok(synthetic_dialect_sessions(&make_split(seed), 13, seed)?),
    }
}

fn emit<R: Serialize + std::fmt::Display>(report: &R, out: Option<&Path>) -> Result<()> {
    println!("{report}");
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(report)?)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn write_json<R: Serialize>(value: &R, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let (_, train_set, val, _) = load_data(&a.data)?;
    let (enc, dec) = parse_pair_name(&a.arch)?;
    let mut arch = Architecture::new(enc, dec, a.hidden);
    arch.dropout = a.dropout;
    if let Some(n) = a.lstm_layers {
        arch.lstm_layers = n;
    }
    if let Some(n) = a.conv_layers {
        arch.conv_layers = n;
    }
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        max_steps: a.max_steps,
        max_epochs: a.max_epochs,
        eval_every: a.eval_every,
        patience: a.patience,
        seed: a.train_seed,
        ..TrainConfig::new(arch)
    };
    let (train_set, val) = match a.scramble {
        Some(seed) => (scramble_language(&train_set, seed).1, scramble_language(&val, seed).1),
        None => (train_set, val),
    };
    eprintln!("training {} on {} examples", arch.name(), train_set.len());
    let out = train::<f32>(&cfg, &train_set.examples, &val.examples)?;
    if let Some(p) = &a.curve {
        let lines: Vec<String> = out.curve.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
        std::fs::write(p, lines.join("\n") + "\n")?;
    }
    checkpoint::save(&out.model, &a.out)?;
    println!(
        "{}: best val exact match {:.4} at step {} of {}; saved {}",
        arch.name(),
        out.best_val_exact_match,
        out.best_step,
        out.steps,
        a.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen {
            seed,
            out,
            train,
            val,
            test,
        } => {
            std::fs::create_dir_all(&out)?;
            let split = make_split(seed);
            split.save(out.join("split.json"))?;
            let d = generate(&split, Counts { train, val, test });
            d.train.write(out.join("train.tsv"))?;
            d.val.write(out.join("val.tsv"))?;
            d.test.write(out.join("test.tsv"))?;
            println!(
                "wrote {} / {} / {} examples to {}",
                d.train.len(),
                d.val.len(),
                d.test.len(),
                out.display()
            );
        }
        Command::Sessions { kind } => match kind {
            SessionKind::Recovery { seed, condition, out } => {
                let sessions: Vec<HumanSession> = build_recovery_sessions(&make_split(seed), condition)?
                    .into_iter()
                    .map(|s| HumanSession {
                        id: s.name,
                        examples: s.examples,
                        external_accuracy: None,
                    })
                    .collect();
                write_sessions(&out, &sessions)?;
                println!("wrote {} sessions to {}", sessions.len(), out.display());
            }
            SessionKind::Dialect { seed, count, out } => {
                let sessions = synthetic_dialect_sessions(&make_split(seed), count, seed)?;
                write_sessions(&out, &sessions)?;
                println!("wrote {} sessions to {}", sessions.len(), out.display());
            }
        },
        Command::Train(a) => run_train(&a)?,
        Command::Sweep {
            data,
            grid,
            budget,
            threads,
            max_steps,
            ledger,
        } => {
            let (_, train_set, val, _) = load_data(&data)?;
            let mut grid = match grid {
                Some(p) => SweepGrid::load(p)?,
                None => SweepGrid::full(TrainConfig::new(Architecture::new(
                    shrdlurn::neural::EncoderKind::Lstm,
                    shrdlurn::neural::DecoderKind::Conv,
                    64,
                ))),
            };
            if max_steps.is_some() {
                grid.base.max_steps = max_steps;
            }
            let res = sweep::<f32>(
                &grid,
                budget,
                threads,
                &train_set.examples,
                &val.examples,
                Some(&ledger),
            )?;
            for (name, r) in &res.best {
                println!(
                    "{name:<10} {:.4}  hidden {} dropout {}",
                    r.val_exact_match, r.config.architecture.hidden, r.config.architecture.dropout
                );
            }
        }
        Command::Eval { ckpt, data, split } => {
            let model = load_model(&ckpt)?;
            let (_, train_set, val, test) = load_data(&data)?;
            let set = match split.as_str() {
                "train" => train_set,
                "val" => val,
                "test" => test,
                other => bail!("unknown split '{other}'"),
            };
            let r = evaluate(&model, &set.examples)?;
            println!(
                "{} examples: exact match {:.4}, token accuracy {:.4}",
                r.examples, r.exact_match, r.token_accuracy
            );
        }
        Command::Adapt {
            ckpt,
            sessions,
            online,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let config = online.config()?;
            let (sessions, _) = ingest_human_sessions(&sessions)?;
            let mut reports = Vec::new();
            for s in &sessions {
                let r = run_session(&model, config, &s.examples)?;
                println!(
                    "{:<24} {:>6.1}%  ({} interactions)",
                    s.id,
                    100.0 * r.online_accuracy,
                    r.interactions
                );
                reports.push(r);
            }
            if let Some(p) = out {
                write_json(&reports, Some(&p))?;
            }
        }
        Command::Bench { kind } => match kind {
            BenchKind::Recovery { ckpt, seed, tune, out } => {
                let model = load_model(&ckpt)?;
                let split = make_split(seed);
                let mut variants = recovery_variants(AdaptConfig::default());
                if let Some(grid) = tune.grid()? {
                    let val = recovery_validation_examples(&split)?;
                    variants = tune_variants(&model, &variants, &grid, &[&val], tune.threads)?
                        .into_iter()
                        .map(|(v, _)| v)
                        .collect();
                }
                let conditions = [
                    RecoveryCondition::OneWord,
                    RecoveryCondition::TwoWords,
                    RecoveryCondition::ThreeWords,
                    RecoveryCondition::All,
                ];
                let report = run_recovery_benchmark(&model, &split, &conditions, &variants, tune.threads)?;
                emit(&report, out.as_deref())?;
            }
            BenchKind::Human {
                ckpt,
                sessions,
                validation,
                tune,
                out,
            } => {
                let model = load_model(&ckpt)?;
                let sessions = load_sessions(sessions.as_deref(), 0)?;
                if sessions.len() <= validation {
                    bail!("need more than {validation} sessions");
                }
                let (val, test) = sessions.split_at(validation);
                let mut variants: Vec<Variant> = human_cells()
                    .into_iter()
                    .map(|(reuse, adapt)| {
                        Variant::new(AdaptConfig {
                            reuse,
                            adapt,
                            ..AdaptConfig::default()
                        })
                    })
                    .collect();
                if let Some(grid) = tune.grid()? {
                    let val: Vec<&[_]> = val.iter().map(|s| s.examples.as_slice()).collect();
                    variants = tune_variants(&model, &variants, &grid, &val, tune.threads)?
                        .into_iter()
                        .map(|(v, _)| v)
                        .collect();
                }
                let configs: Vec<AdaptConfig> = variants.iter().map(|v| v.config).collect();
                let matrix = run_human_benchmark(&model, test, &configs, tune.threads)?;
                emit(&matrix, out.as_deref())?;
            }
            BenchKind::Scramble {
                ckpt,
                sessions,
                online,
                out,
            } => {
                let model = load_model(&ckpt)?;
                let sessions = load_sessions(sessions.as_deref(), 0)?;
                let acc = run_scramble_control(&model, &sessions, online.config()?, 4)?;
                println!(
                    "scrambled-grammar decoder reuse: {:.1}% mean online accuracy",
                    100.0 * acc
                );
                if let Some(p) = out {
                    write_json(
                        &serde_json::json!({ "mean_online_accuracy": acc, "sessions": sessions.len() }),
                        Some(&p),
                    )?;
                }
            }
        },
        Command::Analyze { kind } => match kind {
            AnalyzeKind::Embeddings {
                ckpt,
                sessions,
                words,
                online,
                top,
            } => {
                let model = load_model(&ckpt)?;
                let (sessions, _) = ingest_human_sessions(&sessions)?;
                let session = sessions.first().context("no sessions in file")?;
                let (report, adapted) = run_session_keep_model(&model, online.config()?, &session.examples)?;
                println!("{}: online accuracy {:.1}%", session.id, 100.0 * report.online_accuracy);
                let probes: Vec<String> = if words.is_empty() {
                    let v = adapted.vocabulary();
                    v.words()[v.offline_size()..].to_vec()
                } else {
                    words
                };
                for row in embedding_similarity_report(&adapted, &probes)? {
                    let near: Vec<String> = row
                        .neighbours
                        .iter()
                        .take(top)
                        .map(|(w, c)| format!("{w} {c:.2}"))
                        .collect();
                    println!("{:<10} {}", row.word, near.join(", "));
                }
            }
        },
        Command::Serve {
            ckpt,
            port,
            default_config,
            idle_secs,
            cors_origin,
        } => {
            let model = load_model(&ckpt)?;
            let default_config = match default_config {
                Some(p) => shrdlurn_service::merge_config(
                    &AdaptConfig::default(),
                    &serde_json::from_str(&std::fs::read_to_string(&p)?)?,
                )
                .map_err(anyhow::Error::msg)?,
                None => AdaptConfig::default(),
            };
            let config = shrdlurn_service::ServiceConfig {
                default_config,
                idle_timeout: std::time::Duration::from_secs(idle_secs),
                cors_origin,
            };
            let state = shrdlurn_service::AppState::new(model, config);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                shrdlurn_service::serve(listener, state).await
            })?;
        }
    }
    Ok(())
}
