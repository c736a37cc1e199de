use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blockworld::{Color, DELIMITER_TOKEN, EMPTY_TOKEN, STATE_TOKENS};
use crate::error::{Error, Result};

/// State tokens in output-class order.
pub const STATE_VOCAB: [&str; 6] = ["RED", "CYAN", "BROWN", "ORANGE", EMPTY_TOKEN, DELIMITER_TOKEN];

pub fn state_token_id(token: &str) -> Result<usize> {
    STATE_VOCAB
        .iter()
        .position(|t| *t == token)
        .ok_or_else(|| Error::UnknownToken(token.to_string()))
}

pub fn state_ids<S: AsRef<str>>(tokens: &[S]) -> Result<[usize; STATE_TOKENS]> {
    if tokens.len() != STATE_TOKENS {
        return Err(Error::Format(format!(
            "expected {STATE_TOKENS} state tokens, got {}",
            tokens.len()
        )));
    }
    let mut ids = [0; STATE_TOKENS];
    for (slot, tok) in ids.iter_mut().zip(tokens) {
        *slot = state_token_id(tok.as_ref())?;
    }
    Ok(ids)
}

pub fn state_tokens(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| STATE_VOCAB[i].to_string()).collect()
}

pub fn color_state_id(color: Color) -> usize {
    Color::ALL.iter().position(|c| *c == color).unwrap()
}

/// Utterance word ids. Ids are dense and never reassigned; words added after
/// [`Vocabulary::freeze`] are the "new words" of an online session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    offline_size: Option<usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
            offline_size: None,
        };
        for w in words {
            vocab.push(w.into())?;
        }
        Ok(vocab)
    }

    fn push(&mut self, word: String) -> Result<usize> {
        if self.index.contains_key(&word) {
            return Err(Error::DuplicateWord(word));
        }
        let id = self.words.len();
        self.index.insert(word.clone(), id);
        self.words.push(word);
        Ok(id)
    }

    /// Rebuilds the lookup table after deserialization.
    pub(crate) fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    /// Marks the current words as the offline vocabulary.
    pub fn freeze(&mut self) {
        self.offline_size = Some(self.words.len());
    }

    pub fn is_frozen(&self) -> bool {
        self.offline_size.is_some()
    }

    /// Number of words known before any online additions.
    pub fn offline_size(&self) -> usize {
        self.offline_size.unwrap_or(self.words.len())
    }

    pub fn new_word_ids(&self) -> std::ops::Range<usize> {
        self.offline_size()..self.words.len()
    }

    pub fn is_new_word(&self, id: usize) -> bool {
        id >= self.offline_size()
    }

    pub(crate) fn add_word(&mut self, word: &str) -> Result<usize> {
        self.push(word.to_string())
    }
}
