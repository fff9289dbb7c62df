//! Deterministic hash-based prompt embeddings.
//!
//! Each lowercase whitespace-separated word maps to a unit vector derived from
//! `sha256(word ‖ seed)`. No semantics, just distinct reproducible
//! conditioning rows.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{FiaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<u64>,
    /// One unit-norm row per token, `tokens.len() × d_model`.
    pub matrix: Array2<f64>,
    pub d_model: usize,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub const MIN_EMBED_DIM: usize = 4;

pub fn embed_prompt(text: &str, d_model: usize, seed: u64) -> Result<PromptEmbedding> {
    if d_model < MIN_EMBED_DIM {
        return Err(FiaError::invalid(format!(
            "embedding width must be at least {MIN_EMBED_DIM}, got {d_model}"
        )));
    }
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Err(FiaError::invalid("empty prompt"));
    }
    let mut tokens = Vec::with_capacity(words.len());
    let mut matrix = Array2::<f64>::zeros((words.len(), d_model));
    for (word, mut row) in words.iter().zip(matrix.rows_mut()) {
        let digest = Sha256::new()
            .chain_update(word.as_bytes())
            .chain_update(seed.to_le_bytes())
            .finalize();
        let key: [u8; 32] = digest.into();
        tokens.push(u64::from_le_bytes(key[..8].try_into().unwrap()));
        let mut rng = ChaCha8Rng::from_seed(key);
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    Ok(PromptEmbedding {
        tokens,
        matrix,
        d_model,
    })
}

/// Bitwise equality of token lists and matrices.
pub fn embeddings_equal(a: &PromptEmbedding, b: &PromptEmbedding) -> bool {
    a.tokens == b.tokens
        && a.matrix.dim() == b.matrix.dim()
        && a
            .matrix
            .iter()
            .zip(b.matrix.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
