//! Deterministic text-encoder stand-in.
//!
//! A prompt is hashed together with a seed into an RNG stream and the
//! embedding matrix is filled with unit Gaussian draws. The interface
//! (string in, `tokens × dim` matrix out) is the same one a real encoder
//! would expose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// `tokens × dim` embedding matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    tokens: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embedding {
    pub fn new(tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(Error::invalid(
                "embedding needs at least one token and one dim",
            ));
        }
        if data.len() != tokens * dim {
            return Err(Error::shape(tokens * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self {
            tokens,
            dim,
            data: vec![0.0; tokens * dim],
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, token: usize, d: usize) -> f64 {
        self.data[token * self.dim + d]
    }

    pub fn with_entry(&self, token: usize, d: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[token * self.dim + d] = value;
        out
    }

    pub fn ensure_same_shape(&self, other: &Embedding) -> Result<()> {
        if (self.tokens, self.dim) != (other.tokens, other.dim) {
            return Err(Error::shape(
                (self.tokens, self.dim),
                (other.tokens, other.dim),
            ));
        }
        Ok(())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Embedding, b: f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            tokens: self.tokens,
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            tokens: self.tokens,
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Embedding) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Checkpoint layout `(1, 1, tokens, dim)`.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::new([1, 1, self.tokens, self.dim], self.data.clone())
            .expect("embedding is finite and non-empty")
    }

    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        let [a, b, tokens, dim] = t.shape();
        if a != 1 || b != 1 {
            return Err(Error::shape([1, 1, tokens, dim], t.shape()));
        }
        Self::new(tokens, dim, t.data().to_vec())
    }
}

fn stream_seed(prompt: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"advlogo-text-encoder\0");
    h.update(seed.to_le_bytes());
    h.update((prompt.len() as u64).to_le_bytes());
    h.update(prompt.as_bytes());
    h.finalize().into()
}

/// Embeds `prompt` as a `tokens × dim` matrix of unit Gaussian entries
/// drawn from a stream keyed by `(prompt, seed)`.
pub fn encode_prompt(prompt: &str, seed: u64, tokens: usize, dim: usize) -> Result<Embedding> {
    if tokens == 0 || dim == 0 {
        return Err(Error::invalid(
            "embedding needs at least one token and one dim",
        ));
    }
    let mut rng = ChaCha8Rng::from_seed(stream_seed(prompt, seed));
    let t = Tensor4::randn([1, 1, tokens, dim], &mut rng);
    Embedding::new(tokens, dim, t.into_data())
}

/// Per-timestep unconditional embeddings `Φ_1 … Φ_T`, all starting at `base`.
/// Index `t - 1` holds `Φ_t`.
pub fn init_unconditional(steps: usize, base: &Embedding) -> Result<Vec<Embedding>> {
    if steps == 0 {
        return Err(Error::EmptySchedule);
    }
    Ok(vec![base.clone(); steps])
}
