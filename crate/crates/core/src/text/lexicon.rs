use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// ARPAbet phonemes without stress markers.
pub const PHONEMES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH",
    "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

pub const PAD_ID: u32 = 0;
pub const UNK_PHONEME_ID: u32 = 1;
/// Size of the phoneme id space including PAD and UNK.
pub const PHONEME_VOCAB: usize = PHONEMES.len() + 2;

/// One phoneme per letter or digit for words missing from the lexicon.
pub const LETTER_FALLBACK: [(char, &str); 36] = [
    ('a', "AE"), ('b', "B"), ('c', "K"), ('d', "D"), ('e', "EH"), ('f', "F"), ('g', "G"), ('h', "HH"),
    ('i', "IH"), ('j', "JH"), ('k', "K"), ('l', "L"), ('m', "M"), ('n', "N"), ('o', "AA"), ('p', "P"),
    ('q', "K"), ('r', "R"), ('s', "S"), ('t', "T"), ('u', "AH"), ('v', "V"), ('w', "W"), ('x', "K"),
    ('y', "Y"), ('z', "Z"), ('0', "Z"), ('1', "W"), ('2', "T"), ('3', "TH"), ('4', "F"), ('5', "F"),
    ('6', "S"), ('7', "S"), ('8', "EY"), ('9', "N"),
];

pub fn phoneme_id(symbol: &str) -> u32 {
    let bare = symbol.trim_end_matches(|c: char| c.is_ascii_digit()).to_ascii_uppercase();
    PHONEMES
        .iter()
        .position(|&p| p == bare)
        .map(|i| i as u32 + 2)
        .unwrap_or(UNK_PHONEME_ID)
}

fn fallback(c: char) -> Option<u32> {
    LETTER_FALLBACK.iter().find(|(l, _)| *l == c).map(|(_, p)| phoneme_id(p))
}

/// Pronunciation dictionary, word → phoneme ids.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<u32>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, word: &str, phonemes: &[&str]) {
        self.entries.insert(word.to_lowercase(), phonemes.iter().map(|p| phoneme_id(p)).collect());
    }

    /// Parses CMU-dictionary style text: `WORD  PH1 PH2 …` per line.
    /// `;;;` comments are skipped, alternate pronunciations `WORD(2)` are
    /// ignored in favor of the first, and stress digits are stripped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default();
            let phones: Vec<&str> = parts.collect();
            if phones.is_empty() {
                return Err(Error::format(format!("{source}:{}", n + 1), format!("no phonemes for '{word}'")));
            }
            if word.ends_with(')') && word.contains('(') {
                continue;
            }
            let key = word.to_lowercase();
            if !lex.entries.contains_key(&key) {
                lex.insert(&key, &phones);
            }
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text, &path.display().to_string())
    }

    pub fn lookup(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    /// Lexicon pronunciation or, failing that, one fallback phoneme per
    /// letter/digit. Returns `None` only for words with no usable characters.
    pub fn pronounce(&self, word: &str) -> Option<Vec<u32>> {
        if let Some(p) = self.lookup(word) {
            return Some(p.to_vec());
        }
        let spelled: Vec<u32> = word.chars().filter_map(fallback).collect();
        (!spelled.is_empty()).then_some(spelled)
    }
}

/// Words of a transcript and the phonemes of each word.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub words: Vec<String>,
    pub phonemes: Vec<Vec<u32>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn normalize_word(raw: &str) -> String {
    raw.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_ascii_alphanumeric() || *c == '\'')
        .collect()
}

/// Whitespace tokenization, lowercasing, punctuation stripping, then G2P.
pub fn tokenize_and_g2p(transcript: &str, lexicon: &Lexicon) -> Result<TokenSeq> {
    let mut words = Vec::new();
    let mut phonemes = Vec::new();
    for raw in transcript.split_whitespace() {
        let w = normalize_word(raw);
        if w.is_empty() {
            continue;
        }
        if let Some(p) = lexicon.pronounce(&w) {
            words.push(w);
            phonemes.push(p);
        }
    }
    if words.is_empty() {
        return Err(Error::validation(format!("transcript {transcript:?} has no words")));
    }
    Ok(TokenSeq { words, phonemes })
}
