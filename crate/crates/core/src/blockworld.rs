//! Block piles, the instruction grammar, and the rule-based interpreter.
//!
//! A world is six piles of at most three colored blocks. Instructions come
//! from the template `VERB COLOR at POS tile` and are interpreted by
//! [`apply`]. States travel as a fixed-width 23-token sequence (see
//! [`serialize_state`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_PILES: usize = 6;
pub const PILE_CAPACITY: usize = 3;
/// 6 groups of 3 slots plus 5 delimiters.
pub const STATE_TOKENS: usize = NUM_PILES * PILE_CAPACITY + NUM_PILES - 1;

pub const EMPTY_TOKEN: &str = "X";
pub const DELIMITER_TOKEN: &str = "#";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Cyan,
    Brown,
    Orange,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Cyan, Color::Brown, Color::Orange];

    /// Lowercase utterance word.
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Cyan => "cyan",
            Color::Brown => "brown",
            Color::Orange => "orange",
        }
    }

    /// Uppercase state token.
    pub fn token(self) -> &'static str {
        match self {
            Color::Red => "RED",
            Color::Cyan => "CYAN",
            Color::Brown => "BROWN",
            Color::Orange => "ORANGE",
        }
    }

    pub fn from_word(word: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == word)
    }

    pub fn from_token(token: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.token() == token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Add,
    Remove,
}

impl Verb {
    pub const ALL: [Verb; 2] = [Verb::Add, Verb::Remove];

    pub fn word(self) -> &'static str {
        match self {
            Verb::Add => "add",
            Verb::Remove => "remove",
        }
    }

    pub fn from_word(word: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.word() == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    Even,
    Odd,
    Leftmost,
    Rightmost,
    Every,
}

impl Position {
    pub const ALL: [Position; 11] = [
        Position::P1,
        Position::P2,
        Position::P3,
        Position::P4,
        Position::P5,
        Position::P6,
        Position::Even,
        Position::Odd,
        Position::Leftmost,
        Position::Rightmost,
        Position::Every,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Position::P1 => "1st",
            Position::P2 => "2nd",
            Position::P3 => "3rd",
            Position::P4 => "4th",
            Position::P5 => "5th",
            Position::P6 => "6th",
            Position::Even => "even",
            Position::Odd => "odd",
            Position::Leftmost => "leftmost",
            Position::Rightmost => "rightmost",
            Position::Every => "every",
        }
    }

    pub fn from_word(word: &str) -> Option<Position> {
        Position::ALL.into_iter().find(|p| p.word() == word)
    }
}

/// Piles addressed by a position word, 1-based, ascending.
///
/// `leftmost` and `rightmost` are the fixed end piles, independent of which
/// piles happen to be empty.
pub fn select_piles(pos: Position) -> Vec<usize> {
    match pos {
        Position::P1 | Position::Leftmost => vec![1],
        Position::P2 => vec![2],
        Position::P3 => vec![3],
        Position::P4 => vec![4],
        Position::P5 => vec![5],
        Position::P6 | Position::Rightmost => vec![6],
        Position::Even => vec![2, 4, 6],
        Position::Odd => vec![1, 3, 5],
        Position::Every => (1..=NUM_PILES).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub verb: Verb,
    pub color: Color,
    pub position: Position,
}

impl Instruction {
    /// All 88 grammar instructions in a fixed order (verb, color, position).
    pub fn all() -> Vec<Instruction> {
        let mut out = Vec::with_capacity(88);
        for verb in Verb::ALL {
            for color in Color::ALL {
                for position in Position::ALL {
                    out.push(Instruction { verb, color, position });
                }
            }
        }
        out
    }

    /// The grammar's surface form: `VERB COLOR at POS tile`.
    pub fn utterance(&self) -> Utterance {
        Utterance::new(vec![
            self.verb.word().to_string(),
            self.color.word().to_string(),
            "at".to_string(),
            self.position.word().to_string(),
            "tile".to_string(),
        ])
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.utterance())
    }
}

/// Every word the grammar can produce, in a fixed order.
pub fn grammar_vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(Verb::ALL.iter().map(|v| v.word()));
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.push("at");
    words.extend(Position::ALL.iter().map(|p| p.word()));
    words.push("tile");
    words
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Utterance {
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>) -> Self {
        Utterance { tokens }
    }

    /// Whitespace tokenization; tokens are kept verbatim.
    pub fn from_text(text: &str) -> Self {
        Utterance {
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens.join(" "))
    }
}

/// Parses a grammar utterance. Anything outside the 88-string language fails.
pub fn parse_utterance(utt: &Utterance) -> Result<Instruction> {
    let fail = || Error::Parse(utt.to_string());
    let [verb, color, at, pos, tile] = utt.tokens.as_slice() else {
        return Err(fail());
    };
    if at != "at" || tile != "tile" {
        return Err(fail());
    }
    Ok(Instruction {
        verb: Verb::from_word(verb).ok_or_else(fail)?,
        color: Color::from_word(color).ok_or_else(fail)?,
        position: Position::from_word(pos).ok_or_else(fail)?,
    })
}

/// A stack of blocks, bottom first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Color>", into = "Vec<Color>")]
pub struct Pile {
    blocks: Vec<Color>,
}

impl Pile {
    pub fn new(blocks: Vec<Color>) -> Result<Self> {
        if blocks.len() > PILE_CAPACITY {
            return Err(Error::Format(format!(
                "pile of height {} exceeds capacity {PILE_CAPACITY}",
                blocks.len()
            )));
        }
        Ok(Pile { blocks })
    }

    pub fn empty() -> Self {
        Pile::default()
    }

    pub fn blocks(&self) -> &[Color] {
        &self.blocks
    }

    pub fn height(&self) -> usize {
        self.blocks.len()
    }

    pub fn top(&self) -> Option<Color> {
        self.blocks.last().copied()
    }

    pub fn is_full(&self) -> bool {
        self.blocks.len() == PILE_CAPACITY
    }

    /// All 85 valid piles: heights 0..=3 over 4 colors, in a fixed order.
    pub fn enumerate_all() -> Vec<Pile> {
        let mut out = vec![Pile::empty()];
        let mut frontier = vec![Pile::empty()];
        for _ in 0..PILE_CAPACITY {
            let mut next = Vec::new();
            for pile in &frontier {
                for color in Color::ALL {
                    let mut blocks = pile.blocks.clone();
                    blocks.push(color);
                    next.push(Pile { blocks });
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Three slot tokens, bottom first, padded with `X`.
    pub fn slot_tokens(&self) -> [&'static str; PILE_CAPACITY] {
        let mut slots = [EMPTY_TOKEN; PILE_CAPACITY];
        for (slot, color) in slots.iter_mut().zip(&self.blocks) {
            *slot = color.token();
        }
        slots
    }
}

impl TryFrom<Vec<Color>> for Pile {
    type Error = Error;

    fn try_from(blocks: Vec<Color>) -> Result<Self> {
        Pile::new(blocks)
    }
}

impl From<Pile> for Vec<Color> {
    fn from(pile: Pile) -> Self {
        pile.blocks
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorldState {
    pub piles: [Pile; NUM_PILES],
}

impl WorldState {
    pub fn new(piles: [Pile; NUM_PILES]) -> Self {
        WorldState { piles }
    }

    pub fn empty() -> Self {
        WorldState::default()
    }

    /// Convenience constructor from color lists; panics on overfull piles.
    pub fn from_colors(piles: [&[Color]; NUM_PILES]) -> Self {
        WorldState {
            piles: piles.map(|p| Pile::new(p.to_vec()).expect("pile over capacity")),
        }
    }

    pub fn to_tokens(&self) -> Vec<String> {
        serialize_state(self)
    }
}

impl fmt::Display for WorldState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serialize_state(self).join(" "))
    }
}

/// Rule-based interpretation of an instruction.
///
/// `add` pushes onto each selected pile that is not full. `remove` pops the
/// top of each selected pile whose top block has the instruction's color.
pub fn apply(instr: &Instruction, state: &WorldState) -> WorldState {
    let mut next = state.clone();
    for index in select_piles(instr.position) {
        let pile = &mut next.piles[index - 1];
        match instr.verb {
            Verb::Add => {
                if !pile.is_full() {
                    pile.blocks.push(instr.color);
                }
            }
            Verb::Remove => {
                if pile.top() == Some(instr.color) {
                    pile.blocks.pop();
                }
            }
        }
    }
    next
}

/// Fixed-width 23-token encoding: `s s s # s s s # ... # s s s`.
pub fn serialize_state(state: &WorldState) -> Vec<String> {
    let mut out = Vec::with_capacity(STATE_TOKENS);
    for (i, pile) in state.piles.iter().enumerate() {
        if i > 0 {
            out.push(DELIMITER_TOKEN.to_string());
        }
        out.extend(pile.slot_tokens().iter().map(|t| t.to_string()));
    }
    out
}

/// Inverse of [`serialize_state`]; rejects anything it could not have produced.
pub fn deserialize_state<S: AsRef<str>>(tokens: &[S]) -> Result<WorldState> {
    if tokens.len() != STATE_TOKENS {
        return Err(Error::Format(format!(
            "expected {STATE_TOKENS} state tokens, got {}",
            tokens.len()
        )));
    }
    let mut piles: [Pile; NUM_PILES] = Default::default();
    for (p, pile) in piles.iter_mut().enumerate() {
        let base = p * (PILE_CAPACITY + 1);
        if p > 0 && tokens[base - 1].as_ref() != DELIMITER_TOKEN {
            return Err(Error::Format(format!(
                "expected '#' at position {}, got '{}'",
                base - 1,
                tokens[base - 1].as_ref()
            )));
        }
        let mut seen_empty = false;
        for slot in 0..PILE_CAPACITY {
            let tok = tokens[base + slot].as_ref();
            if tok == EMPTY_TOKEN {
                seen_empty = true;
            } else if let Some(color) = Color::from_token(tok) {
                if seen_empty {
                    return Err(Error::Format(format!("floating block '{tok}' in pile {}", p + 1)));
                }
                pile.blocks.push(color);
            } else {
                return Err(Error::Format(format!(
                    "unknown state token '{tok}' at position {}",
                    base + slot
                )));
            }
        }
    }
    Ok(WorldState { piles })
}

impl FromStr for WorldState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        deserialize_state(&tokens)
    }
}
