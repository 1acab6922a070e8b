use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Mat, Scalar};

use super::{DenseModel, InputSlot, Projection, ToyLmConfig, NORM_EPS, VOCAB};

/// Non-projection parameters plus rotary tables, in the serving precision.
#[derive(Clone, Debug)]
pub struct Skeleton<T> {
    pub cfg: ToyLmConfig,
    pub embed: Mat<T>,
    pub attn_norms: Vec<Vec<T>>,
    pub mlp_norms: Vec<Vec<T>>,
    pub final_norm: Vec<T>,
    /// `d_model × VOCAB`.
    pub lm_head_t: Mat<T>,
    /// `max_seq × head_dim/2`.
    pub(crate) cos: Mat<T>,
    pub(crate) sin: Mat<T>,
}

pub(crate) fn rope_tables(cfg: &ToyLmConfig) -> (Mat<f64>, Mat<f64>) {
    let half = cfg.head_dim() / 2;
    let freq = |i: usize| cfg.rope_base.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
    let cos = Mat::from_fn(cfg.max_seq, half, |p, i| (p as f64 * freq(i)).cos());
    let sin = Mat::from_fn(cfg.max_seq, half, |p, i| (p as f64 * freq(i)).sin());
    (cos, sin)
}

fn cast_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of_f64(x)).collect()
}

impl<T: Scalar> Skeleton<T> {
    pub fn from_dense(m: &DenseModel) -> Self {
        let (cos, sin) = rope_tables(&m.cfg);
        Self {
            cfg: m.cfg.clone(),
            embed: m.embed.cast(),
            attn_norms: m.blocks.iter().map(|b| cast_vec(&b.attn_norm)).collect(),
            mlp_norms: m.blocks.iter().map(|b| cast_vec(&b.mlp_norm)).collect(),
            final_norm: cast_vec(&m.final_norm),
            lm_head_t: m.lm_head.transpose().cast(),
            cos: cos.cast(),
            sin: sin.cast(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Skeleton<U> {
        let vecs = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect::<Vec<U>>();
        Skeleton {
            cfg: self.cfg.clone(),
            embed: self.embed.cast(),
            attn_norms: self.attn_norms.iter().map(|v| vecs(v)).collect(),
            mlp_norms: self.mlp_norms.iter().map(|v| vecs(v)).collect(),
            final_norm: vecs(&self.final_norm),
            lm_head_t: self.lm_head_t.cast(),
            cos: self.cos.cast(),
            sin: self.sin.cast(),
        }
    }
}

/// Compares parameters; the rotary tables are derived from the config.
impl<T: Scalar> PartialEq for Skeleton<T> {
    fn eq(&self, o: &Self) -> bool {
        self.cfg == o.cfg
            && self.embed == o.embed
            && self.attn_norms == o.attn_norms
            && self.mlp_norms == o.mlp_norms
            && self.final_norm == o.final_norm
            && self.lm_head_t == o.lm_head_t
    }
}

/// Computes the seven projections of a block. Inputs hold `batch` sequences
/// of equal length stacked row-wise (tokens × features).
pub trait Projector<T: Scalar> {
    /// Returns `[q, k, v]`.
    fn attn_in(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<[Mat<T>; 3]>;
    fn attn_out(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<Mat<T>>;
    /// Returns `[up, gate]`.
    fn mlp_in(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<[Mat<T>; 2]>;
    fn mlp_out(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<Mat<T>>;
}

/// Dense projections `X · Wᵀ`.
#[derive(Clone, Debug)]
pub struct DenseProjector<T> {
    /// Per block, per projection, `Wᵀ` (`n × m`).
    wt: Vec<Vec<Mat<T>>>,
}

impl<T: Scalar> DenseProjector<T> {
    pub fn new(m: &DenseModel) -> Self {
        let wt = m
            .blocks
            .iter()
            .map(|b| b.proj.iter().map(|w| w.transpose().cast()).collect())
            .collect();
        Self { wt }
    }

    fn apply(&self, block: usize, p: Projection, x: &Mat<T>) -> Mat<T> {
        x.matmul(&self.wt[block][p.index()])
    }
}

impl<T: Scalar> Projector<T> for DenseProjector<T> {
    fn attn_in(&mut self, block: usize, x: &Mat<T>, _: usize) -> Result<[Mat<T>; 3]> {
        Ok([
            self.apply(block, Projection::Q, x),
            self.apply(block, Projection::K, x),
            self.apply(block, Projection::V, x),
        ])
    }
    fn attn_out(&mut self, block: usize, x: &Mat<T>, _: usize) -> Result<Mat<T>> {
        Ok(self.apply(block, Projection::O, x))
    }
    fn mlp_in(&mut self, block: usize, x: &Mat<T>, _: usize) -> Result<[Mat<T>; 2]> {
        Ok([self.apply(block, Projection::Up, x), self.apply(block, Projection::Gate, x)])
    }
    fn mlp_out(&mut self, block: usize, x: &Mat<T>, _: usize) -> Result<Mat<T>> {
        Ok(self.apply(block, Projection::Down, x))
    }
}

/// Wraps a projector and records every projection input.
#[derive(Debug)]
pub struct ActivationRecorder<P, T> {
    pub inner: P,
    /// `inputs[block][slot]`, in call order.
    pub inputs: Vec<[Vec<Mat<T>>; 4]>,
}

impl<P, T: Scalar> ActivationRecorder<P, T> {
    pub fn new(inner: P, n_blocks: usize) -> Self {
        Self { inner, inputs: (0..n_blocks).map(|_| Default::default()).collect() }
    }

    fn record(&mut self, block: usize, slot: InputSlot, x: &Mat<T>) {
        self.inputs[block][slot as usize].push(x.clone());
    }
}

impl<P: Projector<T>, T: Scalar> Projector<T> for ActivationRecorder<P, T> {
    fn attn_in(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<[Mat<T>; 3]> {
        self.record(block, InputSlot::AttnIn, x);
        self.inner.attn_in(block, x, batch)
    }
    fn attn_out(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<Mat<T>> {
        self.record(block, InputSlot::AttnOut, x);
        self.inner.attn_out(block, x, batch)
    }
    fn mlp_in(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<[Mat<T>; 2]> {
        self.record(block, InputSlot::MlpIn, x);
        self.inner.mlp_in(block, x, batch)
    }
    fn mlp_out(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<Mat<T>> {
        self.record(block, InputSlot::MlpOut, x);
        self.inner.mlp_out(block, x, batch)
    }
}

/// Keys and values of every block for each sequence of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    len: usize,
    max_seq: usize,
    kv_dim: usize,
    /// `keys[seq][block]`: `len × kv_dim` row-major, rotary already applied.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ToyLmConfig, batch: usize) -> Self {
        let empty = || vec![vec![]; cfg.n_blocks];
        Self {
            len: 0,
            max_seq: cfg.max_seq,
            kv_dim: cfg.kv_dim(),
            keys: (0..batch).map(|_| empty()).collect(),
            values: (0..batch).map(|_| empty()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.keys.len()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `(batch · new_tokens) × VOCAB`.
    pub logits: Mat<T>,
    /// Residual stream after each block (only when requested).
    pub block_outputs: Vec<Mat<T>>,
}

pub(crate) fn rmsnorm<T: Scalar>(x: &Mat<T>, w: &[T]) -> Mat<T> {
    let mut out = x.clone();
    let d = T::of_f64(x.cols() as f64);
    let eps = T::of_f64(NORM_EPS);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = dot(row, row) / d;
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(w) {
            *v = *v * inv * g;
        }
    }
    out
}

/// Rotates consecutive pairs of each head by position-dependent angles.
pub(crate) fn apply_rope<T: Scalar>(
    x: &mut Mat<T>,
    heads: usize,
    head_dim: usize,
    pos: impl Fn(usize) -> usize,
    cos: &Mat<T>,
    sin: &Mat<T>,
    inverse: bool,
) {
    let half = head_dim / 2;
    for r in 0..x.rows() {
        let p = pos(r);
        let (c, s) = (cos.row(p), sin.row(p));
        let row = x.row_mut(r);
        for h in 0..heads {
            let base = h * head_dim;
            for i in 0..half {
                let (a, b) = (row[base + 2 * i], row[base + 2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                row[base + 2 * i] = a * c[i] - b * sn;
                row[base + 2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Runs `tokens` (one equal-length row per sequence) through the model,
/// appending to `cache`. Logits are returned for every new position.
pub fn forward<T: Scalar, P: Projector<T> + ?Sized>(
    sk: &Skeleton<T>,
    proj: &mut P,
    tokens: &[Vec<u8>],
    cache: &mut KvCache<T>,
    keep_block_outputs: bool,
) -> Result<ForwardOutput<T>> {
    let cfg = &sk.cfg;
    let batch = tokens.len();
    if batch == 0 || batch != cache.batch() {
        return Err(Error::Shape(format!("batch {batch} against cache of {}", cache.batch())));
    }
    let new = tokens[0].len();
    if new == 0 || tokens.iter().any(|t| t.len() != new) {
        return Err(Error::Shape("sequences in a batch must be non-empty and equal length".into()));
    }
    let start = cache.len;
    if start + new > cache.max_seq {
        return Err(Error::Overlength { len: start + new, max: cache.max_seq });
    }
    let (d, hd, nh, nkv) = (cfg.d_model, cfg.head_dim(), cfg.n_heads, cfg.n_kv_heads);
    let group = nh / nkv;
    let scale = T::of_f64(1.0 / (hd as f64).sqrt());

    let mut h = Mat::<T>::zeros(batch * new, d);
    for (s, seq) in tokens.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            h.row_mut(s * new + t).copy_from_slice(sk.embed.row(tok as usize));
        }
    }
    let pos = |r: usize| start + r % new;
    let mut block_outputs = Vec::new();

    for l in 0..cfg.n_blocks {
        let xn = rmsnorm(&h, &sk.attn_norms[l]);
        let [mut q, mut k, v] = proj.attn_in(l, &xn, batch)?;
        apply_rope(&mut q, nh, hd, pos, &sk.cos, &sk.sin, false);
        apply_rope(&mut k, nkv, hd, pos, &sk.cos, &sk.sin, false);
        for s in 0..batch {
            for t in 0..new {
                cache.keys[s][l].extend_from_slice(k.row(s * new + t));
                cache.values[s][l].extend_from_slice(v.row(s * new + t));
            }
        }
        let total = start + new;
        let mut att = Mat::<T>::zeros(batch * new, d);
        let mut scores = vec![T::zero(); total];
        for s in 0..batch {
            let keys = &cache.keys[s][l];
            let vals = &cache.values[s][l];
            for t in 0..new {
                let p = start + t;
                let r = s * new + t;
                for head in 0..nh {
                    let kvh = head / group;
                    let qh = &q.row(r)[head * hd..(head + 1) * hd];
                    let mut max = T::neg_infinity();
                    for (j, sc) in scores[..=p].iter_mut().enumerate() {
                        let kj = &keys[j * cache.kv_dim + kvh * hd..j * cache.kv_dim + (kvh + 1) * hd];
                        *sc = dot(qh, kj) * scale;
                        max = max.max(*sc);
                    }
                    let mut denom = T::zero();
                    for sc in scores[..=p].iter_mut() {
                        *sc = (*sc - max).exp();
                        denom = denom + *sc;
                    }
                    let out = &mut att.row_mut(r)[head * hd..(head + 1) * hd];
                    for (j, &sc) in scores[..=p].iter().enumerate() {
                        let vj = &vals[j * cache.kv_dim + kvh * hd..j * cache.kv_dim + (kvh + 1) * hd];
                        axpy(sc / denom, vj, out);
                    }
                }
            }
        }
        h.add_assign(&proj.attn_out(l, &att, batch)?);

        let xn2 = rmsnorm(&h, &sk.mlp_norms[l]);
        let [up, gate] = proj.mlp_in(l, &xn2, batch)?;
        let mut act = up;
        for (a, &g) in act.data_mut().iter_mut().zip(gate.data()) {
            *a = *a * silu(g);
        }
        h.add_assign(&proj.mlp_out(l, &act, batch)?);
        if keep_block_outputs {
            block_outputs.push(h.clone());
        }
    }
    cache.len += new;
    let logits = rmsnorm(&h, &sk.final_norm).matmul(&sk.lm_head_t);
    debug_assert_eq!(logits.cols(), VOCAB);
    Ok(ForwardOutput { logits, block_outputs })
}
