//! Tiny byte-level decoder-only transformer: pre-norm blocks with rotary
//! positions, (grouped-query) causal attention and a gated MLP.
//!
//! Each block has seven projections (`q k v o up gate down`). Inference is
//! generic over a [`Projector`] that computes those projections, so the dense
//! model, factorized models and planned execution share one skeleton.

mod forward;
mod train;

use serde::{Deserialize, Serialize};

pub use forward::{
    forward, ActivationRecorder, DenseProjector, ForwardOutput, KvCache, Projector, Skeleton,
};
pub use train::{train_lm, LmTrainConfig, TrainLog};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const VOCAB: usize = 256;
pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLmConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            d_model: 96,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 256,
            max_seq: 256,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config("n_heads must be divisible by n_kv_heads".into()));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary positions".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn gqa(&self) -> bool {
        self.n_kv_heads != self.n_heads
    }

    /// `(m, n)` of a projection weight (`y = W x`).
    pub fn dims(&self, p: Projection) -> (usize, usize) {
        let (d, kv, ff) = (self.d_model, self.kv_dim(), self.d_ff);
        match p {
            Projection::Q | Projection::O => (d, d),
            Projection::K | Projection::V => (kv, d),
            Projection::Up | Projection::Gate => (ff, d),
            Projection::Down => (d, ff),
        }
    }
}

/// The seven compressible projections of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Up,
        Projection::Gate,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Up => "up",
            Projection::Gate => "gate",
            Projection::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Which recorded block input feeds this projection.
    pub fn input_slot(self) -> InputSlot {
        match self {
            Projection::Q | Projection::K | Projection::V => InputSlot::AttnIn,
            Projection::O => InputSlot::AttnOut,
            Projection::Up | Projection::Gate => InputSlot::MlpIn,
            Projection::Down => InputSlot::MlpOut,
        }
    }
}

/// The four distinct projection inputs inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSlot {
    AttnIn = 0,
    AttnOut = 1,
    MlpIn = 2,
    MlpOut = 3,
}

/// `blocks.<l>.<proj>`.
pub fn tensor_id(block: usize, p: Projection) -> String {
    format!("blocks.{block}.{}", p.name())
}

pub fn parse_tensor_id(id: &str) -> Option<(usize, Projection)> {
    let rest = id.strip_prefix("blocks.")?;
    let (b, name) = rest.split_once('.')?;
    let p = Projection::ALL.into_iter().find(|p| p.name() == name)?;
    Some((b.parse().ok()?, p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    /// Indexed by [`Projection::index`]; each is `m × n`.
    pub proj: Vec<Matrix>,
}

impl DenseBlock {
    pub fn weight(&self, p: Projection) -> &Matrix {
        &self.proj[p.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    pub cfg: ToyLmConfig,
    /// `VOCAB × d_model`.
    pub embed: Matrix,
    pub blocks: Vec<DenseBlock>,
    pub final_norm: Vec<f64>,
    /// `VOCAB × d_model`.
    pub lm_head: Matrix,
}

impl DenseModel {
    /// Seeded uniform initialization with `1/sqrt(fan_in)` scale.
    pub fn init(cfg: &ToyLmConfig) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uniform = |rows: usize, cols: usize, std: f64| {
            let a = std * 3f64.sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
        };
        let d = cfg.d_model;
        let embed = uniform(VOCAB, d, 1.0);
        let resid_scale = 1.0 / (2.0 * cfg.n_blocks as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                let proj = Projection::ALL
                    .iter()
                    .map(|&p| {
                        let (m, n) = cfg.dims(p);
                        let mut std = 1.0 / (n as f64).sqrt();
                        if matches!(p, Projection::O | Projection::Down) {
                            std *= resid_scale;
                        }
                        uniform(m, n, std)
                    })
                    .collect();
                DenseBlock { attn_norm: vec![1.0; d], mlp_norm: vec![1.0; d], proj }
            })
            .collect();
        let lm_head = uniform(VOCAB, d, 1.0 / (d as f64).sqrt());
        Ok(Self { cfg: cfg.clone(), embed, blocks, final_norm: vec![1.0; d], lm_head })
    }

    /// Model whose logits are identically zero (uniform next-byte distribution).
    pub fn uniform(cfg: &ToyLmConfig) -> Result<Self> {
        let mut m = Self::init(cfg)?;
        m.lm_head = Matrix::zeros(VOCAB, cfg.d_model);
        Ok(m)
    }

    pub fn weight(&self, block: usize, p: Projection) -> &Matrix {
        self.blocks[block].weight(p)
    }

    pub fn skeleton<T: crate::numerics::Scalar>(&self) -> Skeleton<T> {
        Skeleton::from_dense(self)
    }

    pub fn projector<T: crate::numerics::Scalar>(&self) -> DenseProjector<T> {
        DenseProjector::new(self)
    }

    /// Full-sequence forward for a single prompt.
    pub fn prefill(&self, tokens: &[u8]) -> Result<(ForwardOutput<f64>, KvCache<f64>)> {
        let sk = self.skeleton::<f64>();
        let mut proj = self.projector::<f64>();
        let mut cache = KvCache::new(&self.cfg, 1);
        let out = forward(&sk, &mut proj, &[tokens.to_vec()], &mut cache, true)?;
        Ok((out, cache))
    }

    /// One incremental step; returns the logits of the new position.
    pub fn decode_step(&self, cache: &mut KvCache<f64>, token: u8) -> Result<Vec<f64>> {
        let sk = self.skeleton::<f64>();
        let mut proj = self.projector::<f64>();
        let out = forward(&sk, &mut proj, &[vec![token]], cache, false)?;
        Ok(out.logits.row(0).to_vec())
    }

    /// Named tensors in a fixed order (checkpoint layout).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, b) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                out.push((tensor_id(l, p), b.weight(p)));
            }
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn norm_vectors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{l}.mlp_norm"), &b.mlp_norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }
}

/// Per-position next-token negative log-likelihoods of a sequence.
pub trait TokenScorer {
    /// Returns `tokens.len() − 1` values, one per predicted byte.
    fn token_nll(&mut self, tokens: &[u8]) -> Result<Vec<f64>>;
}

impl TokenScorer for DenseModel {
    fn token_nll(&mut self, tokens: &[u8]) -> Result<Vec<f64>> {
        let (out, _) = self.prefill(tokens)?;
        Ok(nll_from_logits(&out.logits, tokens))
    }
}

/// NLL of `tokens[t+1]` under row `t` of the logits.
pub fn nll_from_logits<T: crate::numerics::Scalar>(logits: &crate::numerics::Mat<T>, tokens: &[u8]) -> Vec<f64> {
    (0..tokens.len().saturating_sub(1))
        .map(|t| {
            let row = logits.row(t);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            lse - row[tokens[t + 1] as usize].as_f64()
        })
        .collect()
}

/// Perplexity of each contiguous non-overlapping window.
pub fn window_ppl(model: &mut dyn TokenScorer, tokens: &[u8], window: usize) -> Result<Vec<f64>> {
    if window < 2 || tokens.len() < window {
        return Err(Error::InsufficientData(format!(
            "{} tokens for window {window}",
            tokens.len()
        )));
    }
    tokens
        .chunks_exact(window)
        .map(|w| {
            let nll = model.token_nll(w)?;
            Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
        })
        .collect()
}

/// Byte-level tokenizer; the identity on bytes.
pub fn encode(text: &[u8]) -> Vec<u8> {
    text.to_vec()
}

pub fn decode(tokens: &[u8]) -> Vec<u8> {
    tokens.to_vec()
}

/// Greedy argmax with ties toward the lower byte.
pub fn argmax(row: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests;
