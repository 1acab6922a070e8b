//! f64 training with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::forward::{rope_tables, silu};
use super::{DenseModel, Projection, NORM_EPS, VOCAB};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};
use crate::router::{cosine_lr, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            seq_len: 64,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            warmup_fraction: 0.05,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean next-byte cross-entropy (nats) of each step's batch.
    pub losses: Vec<f64>,
}

pub(crate) fn param_slices(m: &DenseModel) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![m.embed.data()];
    for b in &m.blocks {
        out.push(&b.attn_norm);
        out.push(&b.mlp_norm);
        out.extend(b.proj.iter().map(|w| w.data()));
    }
    out.push(&m.final_norm);
    out.push(m.lm_head.data());
    out
}

pub(crate) fn param_slices_mut(m: &mut DenseModel) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![m.embed.data_mut()];
    for b in &mut m.blocks {
        out.push(&mut b.attn_norm);
        out.push(&mut b.mlp_norm);
        out.extend(b.proj.iter_mut().map(|w| w.data_mut()));
    }
    out.push(&mut m.final_norm);
    out.push(m.lm_head.data_mut());
    out
}

fn zeroed(m: &DenseModel) -> DenseModel {
    let mut g = m.clone();
    for s in param_slices_mut(&mut g) {
        s.fill(0.0);
    }
    g
}

fn rmsnorm_fwd(x: &Matrix, w: &[f64]) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let ri = 1.0 / (dot(row, row) / d + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(w) {
            *v *= ri * g;
        }
        inv.push(ri);
    }
    (y, inv)
}

/// Returns `dx`; accumulates into `dw`.
fn rmsnorm_bwd(x: &Matrix, inv: &[f64], w: &[f64], dy: &Matrix, dw: &mut [f64]) -> Matrix {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (xr, dyr, ri) = (x.row(r), dy.row(r), inv[r]);
        let mut s = 0.0;
        for k in 0..xr.len() {
            dw[k] += dyr[k] * xr[k] * ri;
            s += dyr[k] * w[k] * xr[k];
        }
        let c = ri * ri * ri * s / d;
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = ri * w[k] * dyr[k] - c * xr[k];
        }
    }
    dx
}

fn rope(x: &mut Matrix, heads: usize, hd: usize, seq: usize, cos: &Matrix, sin: &Matrix, inverse: bool) {
    super::forward::apply_rope(x, heads, hd, |r| r % seq, cos, sin, inverse);
}

struct BlockTape {
    h_in: Matrix,
    inv1: Vec<f64>,
    xn: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<f64>,
    att: Matrix,
    h_mid: Matrix,
    inv2: Vec<f64>,
    xn2: Matrix,
    up: Matrix,
    gate: Matrix,
    act: Matrix,
}

/// Mean next-byte cross-entropy of a batch and its gradient.
pub(crate) fn loss_and_grad(model: &DenseModel, batch: &[Vec<u8>]) -> Result<(f64, DenseModel)> {
    let cfg = &model.cfg;
    let bsz = batch.len();
    let seq = batch.first().map_or(0, Vec::len);
    if bsz == 0 || seq < 2 || batch.iter().any(|s| s.len() != seq) {
        return Err(Error::Shape("training batch needs equal-length sequences of at least 2".into()));
    }
    if seq > cfg.max_seq {
        return Err(Error::Overlength { len: seq, max: cfg.max_seq });
    }
    let (d, hd, nh, nkv) = (cfg.d_model, cfg.head_dim(), cfg.n_heads, cfg.n_kv_heads);
    let group = nh / nkv;
    let kvd = cfg.kv_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n = bsz * seq;
    let (cos, sin) = rope_tables(cfg);
    let wts: Vec<Vec<Matrix>> =
        model.blocks.iter().map(|b| b.proj.iter().map(Matrix::transpose).collect()).collect();

    let mut h = Matrix::zeros(n, d);
    for (s, toks) in batch.iter().enumerate() {
        for (t, &tok) in toks.iter().enumerate() {
            h.row_mut(s * seq + t).copy_from_slice(model.embed.row(tok as usize));
        }
    }

    let mut tapes = Vec::with_capacity(cfg.n_blocks);
    for (l, blk) in model.blocks.iter().enumerate() {
        let wt = &wts[l];
        let h_in = h.clone();
        let (xn, inv1) = rmsnorm_fwd(&h, &blk.attn_norm);
        let mut q = xn.matmul(&wt[Projection::Q.index()]);
        let mut k = xn.matmul(&wt[Projection::K.index()]);
        let v = xn.matmul(&wt[Projection::V.index()]);
        rope(&mut q, nh, hd, seq, &cos, &sin, false);
        rope(&mut k, nkv, hd, seq, &cos, &sin, false);
        let mut probs = vec![0.0; bsz * nh * seq * seq];
        let mut att = Matrix::zeros(n, d);
        for s in 0..bsz {
            for head in 0..nh {
                let kvh = head / group;
                for t in 0..seq {
                    let r = s * seq + t;
                    let qh = &q.row(r)[head * hd..(head + 1) * hd];
                    let p = &mut probs[((s * nh + head) * seq + t) * seq..][..=t];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = dot(qh, &k.row(s * seq + j)[kvh * hd..(kvh + 1) * hd]) * scale;
                        max = max.max(*pj);
                    }
                    let mut denom = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        denom += *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj /= denom;
                    }
                    let out = &mut att.row_mut(r)[head * hd..(head + 1) * hd];
                    for (j, &pj) in p.iter().enumerate() {
                        axpy(pj, &v.row(s * seq + j)[kvh * hd..(kvh + 1) * hd], out);
                    }
                }
            }
        }
        h.add_assign(&att.matmul(&wt[Projection::O.index()]));
        let h_mid = h.clone();
        let (xn2, inv2) = rmsnorm_fwd(&h, &blk.mlp_norm);
        let up = xn2.matmul(&wt[Projection::Up.index()]);
        let gate = xn2.matmul(&wt[Projection::Gate.index()]);
        let mut act = up.clone();
        for (a, &g) in act.data_mut().iter_mut().zip(gate.data()) {
            *a *= silu(g);
        }
        h.add_assign(&act.matmul(&wt[Projection::Down.index()]));
        tapes.push(BlockTape { h_in, inv1, xn, q, k, v, probs, att, h_mid, inv2, xn2, up, gate, act });
    }

    let (xf, invf) = rmsnorm_fwd(&h, &model.final_norm);
    let logits = xf.matmul(&model.lm_head.transpose());
    let n_pred = (bsz * (seq - 1)) as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, VOCAB);
    for (s, toks) in batch.iter().enumerate() {
        for t in 0..seq - 1 {
            let r = s * seq + t;
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let target = toks[t + 1] as usize;
            loss += z.ln() + max - row[target];
            let dr = dlogits.row_mut(r);
            for (o, &v) in dr.iter_mut().zip(row) {
                *o = (v - max).exp() / z / n_pred;
            }
            dr[target] -= 1.0 / n_pred;
        }
    }
    loss /= n_pred;

    let mut grad = zeroed(model);
    grad.lm_head = dlogits.t_matmul(&xf);
    let dxf = dlogits.matmul(&model.lm_head);
    let mut dh = rmsnorm_bwd(&h, &invf, &model.final_norm, &dxf, &mut grad.final_norm);

    for l in (0..cfg.n_blocks).rev() {
        let blk = &model.blocks[l];
        let tp = &tapes[l];
        let g = &mut grad.blocks[l];

        g.proj[Projection::Down.index()] = dh.t_matmul(&tp.act);
        let dact = dh.matmul(blk.weight(Projection::Down));
        let mut dup = dact.clone();
        let mut dgate = dact;
        for i in 0..dup.data().len() {
            let (u, gt) = (tp.up.data()[i], tp.gate.data()[i]);
            let sg = 1.0 / (1.0 + (-gt).exp());
            let da = dup.data()[i];
            dup.data_mut()[i] = da * gt * sg;
            dgate.data_mut()[i] = da * u * sg * (1.0 + gt * (1.0 - sg));
        }
        g.proj[Projection::Up.index()] = dup.t_matmul(&tp.xn2);
        g.proj[Projection::Gate.index()] = dgate.t_matmul(&tp.xn2);
        let mut dxn2 = dup.matmul(blk.weight(Projection::Up));
        dxn2.add_assign(&dgate.matmul(blk.weight(Projection::Gate)));
        dh.add_assign(&rmsnorm_bwd(&tp.h_mid, &tp.inv2, &blk.mlp_norm, &dxn2, &mut g.mlp_norm));

        g.proj[Projection::O.index()] = dh.t_matmul(&tp.att);
        let datt = dh.matmul(blk.weight(Projection::O));
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, kvd);
        let mut dv = Matrix::zeros(n, kvd);
        let mut dp = vec![0.0; seq];
        for s in 0..bsz {
            for head in 0..nh {
                let kvh = head / group;
                let ks = kvh * hd..(kvh + 1) * hd;
                for t in 0..seq {
                    let r = s * seq + t;
                    let p = &tp.probs[((s * nh + head) * seq + t) * seq..][..=t];
                    let dout = &datt.row(r)[head * hd..(head + 1) * hd];
                    let mut pdp = 0.0;
                    for j in 0..=t {
                        dp[j] = dot(dout, &tp.v.row(s * seq + j)[ks.clone()]);
                        pdp += p[j] * dp[j];
                        axpy(p[j], dout, &mut dv.row_mut(s * seq + j)[ks.clone()]);
                    }
                    let qh: Vec<f64> = tp.q.row(r)[head * hd..(head + 1) * hd].to_vec();
                    for j in 0..=t {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &tp.k.row(s * seq + j)[ks.clone()], &mut dq.row_mut(r)[head * hd..(head + 1) * hd]);
                        axpy(ds, &qh, &mut dk.row_mut(s * seq + j)[ks.clone()]);
                    }
                }
            }
        }
        rope(&mut dq, nh, hd, seq, &cos, &sin, true);
        rope(&mut dk, nkv, hd, seq, &cos, &sin, true);
        g.proj[Projection::Q.index()] = dq.t_matmul(&tp.xn);
        g.proj[Projection::K.index()] = dk.t_matmul(&tp.xn);
        g.proj[Projection::V.index()] = dv.t_matmul(&tp.xn);
        let mut dxn = dq.matmul(blk.weight(Projection::Q));
        dxn.add_assign(&dk.matmul(blk.weight(Projection::K)));
        dxn.add_assign(&dv.matmul(blk.weight(Projection::V)));
        dh.add_assign(&rmsnorm_bwd(&tp.h_in, &tp.inv1, &blk.attn_norm, &dxn, &mut g.attn_norm));
    }

    for (s, toks) in batch.iter().enumerate() {
        for (t, &tok) in toks.iter().enumerate() {
            axpy(1.0, dh.row(s * seq + t), grad.embed.row_mut(tok as usize));
        }
    }
    Ok((loss, grad))
}

/// Trains on random windows of `stream` with AdamW and a warmup-cosine schedule.
pub fn train_lm(model: &mut DenseModel, stream: &[u8], cfg: &LmTrainConfig) -> Result<TrainLog> {
    if cfg.seq_len < 2 || stream.len() < cfg.seq_len || cfg.batch_size == 0 {
        return Err(Error::InsufficientData(format!(
            "{} training bytes for windows of {}",
            stream.len(),
            cfg.seq_len
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opts: Vec<AdamW> =
        param_slices(model).iter().map(|s| AdamW::new(s.len(), cfg.weight_decay)).collect();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch: Vec<Vec<u8>> = (0..cfg.batch_size)
            .map(|_| {
                let start = rng.random_range(0..=stream.len() - cfg.seq_len);
                stream[start..start + cfg.seq_len].to_vec()
            })
            .collect();
        let (loss, grad) = loss_and_grad(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite);
        }
        let grads = param_slices(&grad);
        let norm = grads.iter().map(|g| dot(g, g)).sum::<f64>().sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let lr = cosine_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_fraction);
        for ((p, g), opt) in param_slices_mut(model).into_iter().zip(grads).zip(&mut opts) {
            if clip == 1.0 {
                opt.step(p, g, lr);
            } else {
                let scaled: Vec<f64> = g.iter().map(|v| v * clip).collect();
                opt.step(p, &scaled, lr);
            }
        }
        log.losses.push(loss);
    }
    Ok(log)
}
