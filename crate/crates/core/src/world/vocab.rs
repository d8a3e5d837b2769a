use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type Token = usize;

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

/// Token table with the four specials at fixed ids 0..4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub const PAD: Token = 0;
    pub const START: Token = 1;
    pub const END: Token = 2;
    pub const UNK: Token = 3;

    /// Specials first, then `words` in order with duplicates dropped.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = [PAD, START, END, UNK].iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    pub fn id(&self, word: &str) -> Token {
        self.get(word).unwrap_or(Self::UNK)
    }

    pub fn word(&self, t: Token) -> &str {
        self.tokens.get(t).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<Token> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> Vec<String> {
        tokens.iter().map(|&t| self.word(t).to_string()).collect()
    }

    /// Whitespace split + lowercase, unknown words become `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    /// Space-joined words, dropping `<end>` and padding.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != Self::END && t != Self::PAD)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
