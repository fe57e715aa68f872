//! Toy bidirectional transformer: configuration, seeded initialization and
//! the full-sequence forward pass.

mod io;

pub(crate) use io::{read_f32s, write_f32s};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{self, FlopCounter, FlopScope, Matrix};
use crate::{Error, Result};

pub use io::{WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub num_heads: u32,
    pub ffn_dim: u32,
    pub vocab_size: u32,
    pub mask_token_id: TokenId,
    pub eos_token_id: TokenId,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    /// 32 layers so that skipping at 1/8 and 1/4 depth lands on layers 4 and 8.
    fn default() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 128,
            mask_token_id: 127,
            eos_token_id: 126,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.mask_token_id == self.eos_token_id {
            return Err(Error::config("mask_token_id must differ from eos_token_id"));
        }
        if self.mask_token_id >= self.vocab_size || self.eos_token_id >= self.vocab_size {
            return Err(Error::config(format!(
                "mask ({}) and eos ({}) ids must be below vocab_size {}",
                self.mask_token_id, self.eos_token_id, self.vocab_size
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be positive and finite"));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.num_layers as usize
    }

    pub fn dim(&self) -> usize {
        self.hidden_dim as usize
    }

    pub fn heads(&self) -> usize {
        self.num_heads as usize
    }

    pub fn head_dim(&self) -> usize {
        (self.hidden_dim / self.num_heads.max(1)) as usize
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim as usize
    }

    pub fn vocab(&self) -> usize {
        self.vocab_size as usize
    }

    /// `len` token ids drawn uniformly from the vocabulary minus the mask
    /// and EOS ids, from a ChaCha8 stream seeded with `seed`.
    pub fn random_prompt(&self, len: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let allowed: Vec<TokenId> = (0..self.vocab_size)
            .filter(|&t| t != self.mask_token_id && t != self.eos_token_id)
            .collect();
        (0..len)
            .map(|_| allowed[rng.random_range(0..allowed.len())])
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> u64 {
        let (l, d, f, v) = (
            self.num_layers as u64,
            self.hidden_dim as u64,
            self.ffn_dim as u64,
            self.vocab_size as u64,
        );
        let per_layer = 4 * d * d + 3 * d * f + 2 * d;
        l * per_layer + 2 * v * d + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub head: Matrix,
}

/// Query, key and value projections of the active rows. Keys and queries
/// already carry rotary embeddings.
#[derive(Debug, Clone)]
pub struct Projections {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Everything a full-sequence forward produces, indexed by layer.
#[derive(Debug, Clone)]
pub struct FullForward {
    pub logits: Matrix,
    pub hidden: Vec<Matrix>,
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches by construction")
}

impl Model {
    /// Random weights from a ChaCha8 stream seeded with `seed`; projections
    /// are scaled by `1/sqrt(fan_in)`, norm gains start at one.
    pub fn init_toy(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.dim(), config.ffn(), config.vocab());
        let sd = 1.0 / (d as f32).sqrt();
        let sf = 1.0 / (f as f32).sqrt();

        let embedding = gaussian(&mut rng, v, d, 1.0);
        let layers = (0..config.layers())
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: gaussian(&mut rng, d, d, sd),
                wk: gaussian(&mut rng, d, d, sd),
                wv: gaussian(&mut rng, d, d, sd),
                wo: gaussian(&mut rng, d, d, sd),
                ffn_norm: vec![1.0; d],
                w_gate: gaussian(&mut rng, d, f, sd),
                w_up: gaussian(&mut rng, d, f, sd),
                w_down: gaussian(&mut rng, f, d, sf),
            })
            .collect();
        let head = gaussian(&mut rng, d, v, sd);
        Ok(Self {
            config,
            weights: ModelWeights {
                embedding,
                layers,
                final_norm: vec![1.0; d],
                head,
            },
        })
    }

    pub fn param_count(&self) -> u64 {
        let w = &self.weights;
        let layer: usize = w
            .layers
            .iter()
            .map(|l| {
                l.attn_norm.len()
                    + l.ffn_norm.len()
                    + [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down]
                        .iter()
                        .map(|m| m.data().len())
                        .sum::<usize>()
            })
            .sum();
        (w.embedding.data().len() + layer + w.final_norm.len() + w.head.data().len()) as u64
    }

    /// Embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.weights.embedding.gather_rows(&idx))
    }

    /// First half of a transformer block: pre-norm Q/K/V projections with
    /// rotary embeddings at the absolute `positions`.
    pub fn project(
        &self,
        layer: usize,
        x: &Matrix,
        positions: &[usize],
        counter: &mut FlopCounter,
    ) -> Result<Projections> {
        let lw = &self.weights.layers[layer];
        counter.set_scope(FlopScope::Layer(layer));
        let normed = tensor::rmsnorm(x, &lw.attn_norm)?;
        let mut query = tensor::matmul(&normed, &lw.wq, counter)?;
        let mut key = tensor::matmul(&normed, &lw.wk, counter)?;
        let value = tensor::matmul(&normed, &lw.wv, counter)?;
        let hd = self.config.head_dim();
        tensor::rope_apply(&mut query, positions, hd, self.config.rope_base)?;
        tensor::rope_apply(&mut key, positions, hd, self.config.rope_base)?;
        Ok(Projections { query, key, value })
    }

    /// Second half of a transformer block: attention of the active queries
    /// over the full key/value rows, output projection, residual, FFN and
    /// residual. Returns the layer's hidden states for the active rows.
    pub fn complete(
        &self,
        layer: usize,
        x: &Matrix,
        query: &Matrix,
        keys: &Matrix,
        values: &Matrix,
        counter: &mut FlopCounter,
    ) -> Result<Matrix> {
        let lw = &self.weights.layers[layer];
        counter.set_scope(FlopScope::Layer(layer));
        let attn = tensor::attention(query, keys, values, self.config.heads(), counter)?;
        let mut attn_out = tensor::matmul(&attn, &lw.wo, counter)?;
        attn_out.add_assign(x)?;
        let normed = tensor::rmsnorm(&attn_out, &lw.ffn_norm)?;
        let mut hidden = tensor::gated_ffn(&normed, &lw.w_gate, &lw.w_up, &lw.w_down, counter)?;
        hidden.add_assign(&attn_out)?;
        Ok(hidden)
    }

    /// Final norm and output head.
    pub fn logits(&self, x: &Matrix, counter: &mut FlopCounter) -> Result<Matrix> {
        counter.set_scope(FlopScope::Head);
        let normed = tensor::rmsnorm(x, &self.weights.final_norm)?;
        tensor::matmul(&normed, &self.weights.head, counter)
    }

    /// Bidirectional forward over the whole sequence. Keys and values come
    /// back post-rotary, ready to seed a cache.
    pub fn full_forward(&self, tokens: &[TokenId], counter: &mut FlopCounter) -> Result<FullForward> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.embed(tokens)?;
        let l = self.config.layers();
        let mut out = FullForward {
            logits: Matrix::zeros(0, 0),
            hidden: Vec::with_capacity(l),
            queries: Vec::with_capacity(l),
            keys: Vec::with_capacity(l),
            values: Vec::with_capacity(l),
        };
        for layer in 0..l {
            let p = self.project(layer, &x, &positions, counter)?;
            let h = self.complete(layer, &x, &p.query, &p.key, &p.value, counter)?;
            out.queries.push(p.query);
            out.keys.push(p.key);
            out.values.push(p.value);
            out.hidden.push(h.clone());
            x = h;
        }
        out.logits = self.logits(&x, counter)?;
        Ok(out)
    }
}
