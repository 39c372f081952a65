//! Transcript → words and phonemes, plus word vector tables.

mod lexicon;
mod vectors;

pub use lexicon::{
    phoneme_id, tokenize_and_g2p, Lexicon, TokenSeq, LETTER_FALLBACK, PAD_ID, PHONEMES, PHONEME_VOCAB,
    UNK_PHONEME_ID,
};
pub use vectors::{WordVectors, WORD_DIM};
