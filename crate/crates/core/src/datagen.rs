//! Grammar-generated datasets with compositional splits, plus the corrupted
//! and scrambled variants used for online experiments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockworld::{
    apply, deserialize_state, grammar_vocabulary, parse_utterance, Color, Instruction, Pile, Position, Utterance, Verb,
    WorldState, NUM_PILES,
};
use crate::error::{Error, Result};

pub const TRAIN_UTTERANCES: usize = 66;
pub const VAL_UTTERANCES: usize = 11;
pub const TEST_UTTERANCES: usize = 11;
pub const TRAIN_COLUMNS: usize = 69;
pub const VAL_COLUMNS: usize = 8;
pub const TEST_COLUMNS: usize = 8;

/// Recovery sessions: 15 utterances, 3 start states each.
pub const SESSION_UTTERANCES: usize = 15;
pub const STATES_PER_UTTERANCE: usize = 3;

/// Words corrupted in the recovery validation session.
pub const VALIDATION_CORRUPTION_WORDS: [&str; 7] = ["add", "orange", "red", "1st", "3rd", "5th", "even"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    fn stream(self) -> u64 {
        match self {
            SplitTag::Train => 1,
            SplitTag::Val => 2,
            SplitTag::Test => 3,
        }
    }
}

/// Partition of the 88 instructions and 85 columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_utterances: Vec<Instruction>,
    pub val_utterances: Vec<Instruction>,
    pub test_utterances: Vec<Instruction>,
    pub train_columns: Vec<Pile>,
    pub val_columns: Vec<Pile>,
    pub test_columns: Vec<Pile>,
}

impl SplitSpec {
    pub fn utterances(&self, tag: SplitTag) -> &[Instruction] {
        match tag {
            SplitTag::Train => &self.train_utterances,
            SplitTag::Val => &self.val_utterances,
            SplitTag::Test => &self.test_utterances,
        }
    }

    pub fn columns(&self, tag: SplitTag) -> &[Pile] {
        match tag {
            SplitTag::Train => &self.train_columns,
            SplitTag::Val => &self.val_columns,
            SplitTag::Test => &self.test_columns,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Seeded uniform partition into (66, 11, 11) instructions and (69, 8, 8) columns.
pub fn make_split(seed: u64) -> SplitSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instrs = Instruction::all();
    instrs.shuffle(&mut rng);
    let mut cols = Pile::enumerate_all();
    cols.shuffle(&mut rng);

    let (tr, rest) = instrs.split_at(TRAIN_UTTERANCES);
    let (va, te) = rest.split_at(VAL_UTTERANCES);
    let (ctr, crest) = cols.split_at(TRAIN_COLUMNS);
    let (cva, cte) = crest.split_at(VAL_COLUMNS);
    SplitSpec {
        seed,
        train_utterances: tr.to_vec(),
        val_utterances: va.to_vec(),
        test_utterances: te.to_vec(),
        train_columns: ctr.to_vec(),
        val_columns: cva.to_vec(),
        test_columns: cte.to_vec(),
    }
}

/// Six columns drawn i.i.d. uniformly, with replacement, from `pool`.
pub fn sample_state<R: Rng + ?Sized>(pool: &[Pile], rng: &mut R) -> WorldState {
    assert!(!pool.is_empty(), "column pool must be non-empty");
    let piles: [Pile; NUM_PILES] = std::array::from_fn(|_| pool[rng.gen_range(0..pool.len())].clone());
    WorldState::new(piles)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExampleTriple {
    pub utterance: Utterance,
    pub start: WorldState,
    pub target: WorldState,
}

impl ExampleTriple {
    pub fn from_instruction(instr: &Instruction, start: WorldState) -> Self {
        ExampleTriple {
            utterance: instr.utterance(),
            target: apply(instr, &start),
            start,
        }
    }

    /// `utterance \t start \t target`, space-separated tokens.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.utterance.tokens.join(" "),
            self.start.to_tokens().join(" "),
            self.target.to_tokens().join(" ")
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [utt, start, target] = fields.as_slice() else {
            return Err(Error::Format(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let utterance = Utterance::from_text(utt);
        if utterance.is_empty() {
            return Err(Error::Format("empty utterance".into()));
        }
        let start: Vec<&str> = start.split_whitespace().collect();
        let target: Vec<&str> = target.split_whitespace().collect();
        Ok(ExampleTriple {
            utterance,
            start: deserialize_state(&start)?,
            target: deserialize_state(&target)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: SplitTag,
    pub examples: Vec<ExampleTriple>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ex in &self.examples {
            writeln!(out, "{}", ex.to_line())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>, split: SplitTag) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut examples = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(ExampleTriple::from_line(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
        }
        Ok(Dataset { split, examples })
    }

    /// First `n` examples.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            split: self.split,
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            train: 42_000,
            val: 4_000,
            test: 4_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Independent RNG for one example; output does not depend on sharding.
pub fn example_rng(seed: u64, tag: SplitTag, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag.stream() << 48) | index);
    rng
}

/// Examples `range` of split `tag`, each pairing a uniformly drawn in-split
/// instruction with a state sampled from in-split columns.
pub fn generate_range(split: &SplitSpec, tag: SplitTag, range: std::ops::Range<usize>) -> Vec<ExampleTriple> {
    let instrs = split.utterances(tag);
    let cols = split.columns(tag);
    range
        .map(|i| {
            let mut rng = example_rng(split.seed, tag, i as u64);
            let instr = instrs[rng.gen_range(0..instrs.len())];
            let start = sample_state(cols, &mut rng);
            ExampleTriple::from_instruction(&instr, start)
        })
        .collect()
}

pub fn generate(split: &SplitSpec, counts: Counts) -> Datasets {
    let make = |tag, n| Dataset {
        split: tag,
        examples: generate_range(split, tag, 0..n),
    };
    Datasets {
        train: make(SplitTag::Train, counts.train),
        val: make(SplitTag::Val, counts.val),
        test: make(SplitTag::Test, counts.test),
    }
}

/// Injective word replacement whose outputs lie outside the grammar.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionMap {
    map: BTreeMap<String, String>,
}

impl CorruptionMap {
    pub fn new<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let grammar: HashSet<&str> = grammar_vocabulary().into_iter().collect();
        let mut map = BTreeMap::new();
        let mut images = HashSet::new();
        for (from, to) in pairs {
            let (from, to) = (from.into(), to.into());
            if grammar.contains(to.as_str()) {
                return Err(Error::InvalidConfig(format!("replacement '{to}' is a grammar word")));
            }
            if !images.insert(to.clone()) {
                return Err(Error::InvalidConfig(format!("replacement '{to}' used twice")));
            }
            if map.insert(from.clone(), to).is_some() {
                return Err(Error::InvalidConfig(format!("word '{from}' mapped twice")));
            }
        }
        Ok(CorruptionMap { map })
    }

    /// Corrupts each word with its entry in [`novel_token`].
    pub fn for_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        CorruptionMap::new(words.iter().map(|w| (w.as_ref().to_string(), novel_token(w.as_ref()))))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(String::as_str)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn inverse(&self) -> CorruptionMap {
        CorruptionMap {
            map: self.map.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
        }
    }

    pub fn corrupt_utterance(&self, utt: &Utterance) -> Utterance {
        Utterance::new(
            utt.tokens
                .iter()
                .map(|t| self.map.get(t).cloned().unwrap_or_else(|| t.clone()))
                .collect(),
        )
    }

    /// Corrupted copy; states are untouched.
    pub fn corrupt(&self, examples: &[ExampleTriple]) -> Vec<ExampleTriple> {
        examples
            .iter()
            .map(|ex| ExampleTriple {
                utterance: self.corrupt_utterance(&ex.utterance),
                start: ex.start.clone(),
                target: ex.target.clone(),
            })
            .collect()
    }
}

/// A fixed invented spelling for each grammar word.
pub fn novel_token(word: &str) -> String {
    let known = match word {
        "add" => "ad",
        "remove" => "rmv",
        "red" => "roze",
        "cyan" => "sian",
        "brown" => "braun",
        "orange" => "oranj",
        "at" => "att",
        "tile" => "tyl",
        "1st" => "fst",
        "2nd" => "scnd",
        "3rd" => "thrd",
        "4th" => "frth",
        "5th" => "ffth",
        "6th" => "sxth",
        "even" => "evn",
        "odd" => "od",
        "leftmost" => "lftmst",
        "rightmost" => "rtmst",
        "every" => "evr",
        _ => return format!("{word}~"),
    };
    known.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordType {
    Verb,
    Color,
    Position,
}

pub fn word_type(word: &str) -> Option<WordType> {
    if Verb::from_word(word).is_some() {
        Some(WordType::Verb)
    } else if Color::from_word(word).is_some() {
        Some(WordType::Color)
    } else if Position::from_word(word).is_some() {
        Some(WordType::Position)
    } else {
        None
    }
}

/// Content words not reserved for validation, in grammar order.
pub fn test_corruption_words() -> Vec<&'static str> {
    grammar_vocabulary()
        .into_iter()
        .filter(|w| word_type(w).is_some() && !VALIDATION_CORRUPTION_WORDS.contains(w))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryCondition {
    #[serde(rename = "1-word")]
    OneWord,
    #[serde(rename = "2-word")]
    TwoWords,
    #[serde(rename = "3-word")]
    ThreeWords,
    All,
}

impl RecoveryCondition {
    pub const ALL: [RecoveryCondition; 4] = [
        RecoveryCondition::OneWord,
        RecoveryCondition::TwoWords,
        RecoveryCondition::ThreeWords,
        RecoveryCondition::All,
    ];

    /// Number of sessions per condition.
    pub fn session_count(self) -> usize {
        match self {
            RecoveryCondition::OneWord => 7,
            RecoveryCondition::TwoWords => 17,
            RecoveryCondition::ThreeWords => 10,
            RecoveryCondition::All => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RecoveryCondition::OneWord => "1-word",
            RecoveryCondition::TwoWords => "2-word",
            RecoveryCondition::ThreeWords => "3-word",
            RecoveryCondition::All => "all",
        }
    }
}

impl std::str::FromStr for RecoveryCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RecoveryCondition::ALL
            .into_iter()
            .find(|c| c.label() == s || c.label().split('-').next() == Some(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown recovery condition '{s}'")))
    }
}

/// A simulated speaker with some words replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverySession {
    pub name: String,
    pub corruption: CorruptionMap,
    pub examples: Vec<ExampleTriple>,
}

fn contains_any(instr: &Instruction, words: &[&str]) -> bool {
    instr.utterance().tokens.iter().any(|t| words.contains(&t.as_str()))
}

/// 15 utterances (those mentioning a corrupted word first) x 3 test-column
/// states, corrupted and shuffled.
fn recovery_session(split: &SplitSpec, words: &[&str], name: String, seed: u64) -> Result<RecoverySession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Instruction> = split
        .val_utterances
        .iter()
        .chain(&split.test_utterances)
        .copied()
        .collect();
    let (mut hit, mut miss): (Vec<Instruction>, Vec<Instruction>) =
        pool.into_iter().partition(|i| contains_any(i, words));
    hit.shuffle(&mut rng);
    miss.shuffle(&mut rng);
    let chosen: Vec<Instruction> = hit.into_iter().chain(miss).take(SESSION_UTTERANCES).collect();

    let mut examples = Vec::with_capacity(chosen.len() * STATES_PER_UTTERANCE);
    for instr in &chosen {
        for _ in 0..STATES_PER_UTTERANCE {
            let start = sample_state(&split.test_columns, &mut rng);
            examples.push(ExampleTriple::from_instruction(instr, start));
        }
    }
    examples.shuffle(&mut rng);
    let corruption = CorruptionMap::for_words(words)?;
    Ok(RecoverySession {
        name,
        examples: corruption.corrupt(&examples),
        corruption,
    })
}

/// The session used to tune online hyperparameters.
pub fn build_validation_session(split: &SplitSpec) -> Result<RecoverySession> {
    recovery_session(
        split,
        &VALIDATION_CORRUPTION_WORDS,
        "validation".to_string(),
        split.seed ^ 0x5eed_0000,
    )
}

/// Word combinations of pairwise-distinct types drawn from the test words,
/// each word occurring in at least one val/test utterance.
pub fn corruption_combinations(split: &SplitSpec, size: usize) -> Vec<Vec<&'static str>> {
    let present: BTreeSet<String> = split
        .val_utterances
        .iter()
        .chain(&split.test_utterances)
        .flat_map(|i| i.utterance().tokens)
        .collect();
    let words: Vec<&'static str> = test_corruption_words()
        .into_iter()
        .filter(|w| present.contains(*w))
        .collect();
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn recurse(
        words: &[&'static str],
        start: usize,
        size: usize,
        current: &mut Vec<&'static str>,
        out: &mut Vec<Vec<&'static str>>,
    ) {
        if current.len() == size {
            out.push(current.clone());
            return;
        }
        for i in start..words.len() {
            let t = word_type(words[i]);
            if current.iter().any(|w| word_type(w) == t) {
                continue;
            }
            current.push(words[i]);
            recurse(words, i + 1, size, current, out);
            current.pop();
        }
    }
    recurse(&words, 0, size, &mut current, &mut out);
    out
}

pub fn build_recovery_sessions(split: &SplitSpec, condition: RecoveryCondition) -> Result<Vec<RecoverySession>> {
    let cond_seed = split.seed.wrapping_mul(31).wrapping_add(condition as u64 + 1);
    let combos = match condition {
        RecoveryCondition::All => vec![test_corruption_words()],
        RecoveryCondition::OneWord => corruption_combinations(split, 1),
        RecoveryCondition::TwoWords => corruption_combinations(split, 2),
        RecoveryCondition::ThreeWords => corruption_combinations(split, 3),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cond_seed);
    let mut combos = combos;
    combos.shuffle(&mut rng);
    combos.truncate(condition.session_count());
    combos
        .iter()
        .enumerate()
        .map(|(i, words)| {
            let name = format!("{}:{}", condition.label(), words.join("+"));
            recovery_session(split, words, name, cond_seed ^ ((i as u64 + 1) << 20))
        })
        .collect()
}

/// Consistent vocabulary bijection plus a fixed reordering of the five
/// template slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scrambler {
    pub words: BTreeMap<String, String>,
    /// Output slot `i` takes input token `order[i]`.
    pub order: Vec<usize>,
}

impl Scrambler {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = grammar_vocabulary();
        let mut images = vocab.clone();
        // A derangement-free shuffle is fine; fixed points are allowed.
        images.shuffle(&mut rng);
        let words = vocab
            .iter()
            .zip(images)
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut rng);
        Scrambler { words, order }
    }

    pub fn scramble(&self, utt: &Utterance) -> Utterance {
        let mapped: Vec<String> = utt
            .tokens
            .iter()
            .map(|t| self.words.get(t).cloned().unwrap_or_else(|| t.clone()))
            .collect();
        if mapped.len() != self.order.len() {
            return Utterance::new(mapped);
        }
        Utterance::new(self.order.iter().map(|&i| mapped[i].clone()).collect())
    }

    pub fn unscramble(&self, utt: &Utterance) -> Utterance {
        let inverse: BTreeMap<&str, &str> = self.words.iter().map(|(a, b)| (b.as_str(), a.as_str())).collect();
        let mut tokens = utt.tokens.clone();
        if tokens.len() == self.order.len() {
            let mut restored = vec![String::new(); tokens.len()];
            for (slot, &i) in self.order.iter().enumerate() {
                restored[i] = tokens[slot].clone();
            }
            tokens = restored;
        }
        Utterance::new(
            tokens
                .into_iter()
                .map(|t| inverse.get(t.as_str()).map(|s| s.to_string()).unwrap_or(t))
                .collect(),
        )
    }

    pub fn apply(&self, examples: &[ExampleTriple]) -> Vec<ExampleTriple> {
        examples
            .iter()
            .map(|ex| ExampleTriple {
                utterance: self.scramble(&ex.utterance),
                start: ex.start.clone(),
                target: ex.target.clone(),
            })
            .collect()
    }
}

pub fn scramble_language(dataset: &Dataset, seed: u64) -> (Scrambler, Dataset) {
    let scrambler = Scrambler::new(seed);
    let examples = scrambler.apply(&dataset.examples);
    (
        scrambler,
        Dataset {
            split: dataset.split,
            examples,
        },
    )
}

/// Checks that `target = apply(parse(utterance), start)` for grammar data.
pub fn is_consistent(ex: &ExampleTriple) -> bool {
    parse_utterance(&ex.utterance)
        .map(|i| apply(&i, &ex.start) == ex.target)
        .unwrap_or(false)
}
