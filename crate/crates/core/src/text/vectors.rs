use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WORD_DIM: usize = 300;

#[derive(Clone, Debug)]
enum Source {
    File,
    Hashed { seed: u64 },
}

/// Pre-trained word vectors. Row `vocab_len()` of the matrix is the UNK
/// vector (mean of all loaded rows).
#[derive(Clone, Debug)]
pub struct WordVectors {
    dim: usize,
    vocab: HashMap<String, usize>,
    matrix: Tensor,
    source: Source,
}

impl WordVectors {
    /// Parses whitespace-separated text: a word followed by `dim` decimals per line.
    pub fn parse(text: &str, dim: usize, source: &str) -> Result<Self> {
        let mut vocab = HashMap::new();
        let mut data = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default().to_lowercase();
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("{source}:{}", n + 1), e.to_string()))?;
            if values.len() != dim {
                return Err(Error::format(
                    format!("{source}:{}", n + 1),
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            if vocab.contains_key(&word) {
                continue;
            }
            vocab.insert(word, vocab.len());
            data.extend(values);
        }
        if vocab.is_empty() {
            return Err(Error::format(source, "no vectors"));
        }
        let v = vocab.len();
        let unk: Vec<f64> = (0..dim).map(|j| (0..v).map(|i| data[i * dim + j]).sum::<f64>() / v as f64).collect();
        data.extend(unk);
        Ok(WordVectors { dim, vocab, matrix: Tensor::new(vec![v + 1, dim], data)?, source: Source::File })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        WordVectors::parse(&text, WORD_DIM, &path.display().to_string())
    }

    /// Stand-in vectors when no pre-trained file is configured: each word
    /// maps to a fixed Gaussian vector derived from its hash.
    pub fn hashed(dim: usize, seed: u64) -> Self {
        WordVectors {
            dim,
            vocab: HashMap::new(),
            matrix: Tensor::zeros([1, dim]),
            source: Source::Hashed { seed },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_hashed(&self) -> bool {
        matches!(self.source, Source::Hashed { .. })
    }

    /// `[V+1 × dim]` with the UNK row last.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn unk_id(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.vocab.get(word).copied().unwrap_or(self.unk_id())
    }

    pub fn vector(&self, word: &str) -> Vec<f64> {
        match self.source {
            Source::File => self.matrix.row(self.id(word)).to_vec(),
            Source::Hashed { seed } => {
                let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(word.as_bytes()).finalize();
                let mut rng = ChaCha8Rng::from_seed(digest.into());
                let normal = Normal::new(0.0, 0.4).expect("valid std");
                (0..self.dim).map(|_| normal.sample(&mut rng)).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> String {
        let a: Vec<String> = (0..WORD_DIM).map(|i| format!("{}", i as f64 * 0.01)).collect();
        let b: Vec<String> = (0..WORD_DIM).map(|i| format!("{}", 1.0 - i as f64 * 0.02)).collect();
        format!("hello {}\nworld {}\n", a.join(" "), b.join(" "))
    }

    #[test]
    fn two_lines_plus_unk() {
        let wv = WordVectors::parse(&fixture(), WORD_DIM, "f").unwrap();
        assert_eq!(wv.vocab_len(), 2);
        assert_eq!(wv.matrix().shape(), &[3, WORD_DIM]);
        assert_eq!(wv.vector("nope"), wv.matrix().row(2).to_vec());
    }

    #[test]
    fn unk_is_column_mean() {
        let wv = WordVectors::parse(&fixture(), WORD_DIM, "f").unwrap();
        let unk = wv.vector("unseen");
        for j in 0..WORD_DIM {
            let mean = (j as f64 * 0.01 + (1.0 - j as f64 * 0.02)) / 2.0;
            assert!((unk[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_width_names_line() {
        let mut text = fixture();
        text.push_str("bad 1 2 3\n");
        let err = WordVectors::parse(&text, WORD_DIM, "glove.txt").unwrap_err();
        assert!(err.to_string().contains("glove.txt:3"), "{err}");
    }

    #[test]
    fn hashed_vectors_are_stable() {
        let a = WordVectors::hashed(WORD_DIM, 1);
        let b = WordVectors::hashed(WORD_DIM, 1);
        assert_eq!(a.vector("sad"), b.vector("sad"));
        assert_ne!(a.vector("sad"), a.vector("glad"));
        assert_eq!(a.vector("sad").len(), WORD_DIM);
    }
}
