//! Whole-model compression: calibration capture, per-projection whitened
//! factorization, global budget allocation, and a [`Projector`] that serves
//! the factorized model under static, routed or frozen selections.

use crate::error::{Error, Result};
use crate::factorizer::{allocate_budgets, factorize_full, BudgetAllocation, CompressionConfig, FactorizedLayer};
use crate::numerics::{Mat, Matrix, Scalar};
use crate::rank_experts::RankSelection;
use crate::router::{route, RouterParams};
use crate::toy_lm::{
    forward, nll_from_logits, tensor_id, ActivationRecorder, DenseModel, DenseProjector, ForwardOutput,
    KvCache, Projection, Projector, Skeleton, TokenScorer,
};

/// Sequences per forward when capturing activations.
pub(crate) const CAPTURE_BATCH: usize = 16;

/// Per-sequence projection inputs of the dense model: `[block][slot]`, each
/// `tokens × features`.
pub type SeqActivations = Vec<[Matrix; 4]>;

/// Runs the dense model over `seqs`, batching runs of equal length, and
/// hands each sequence's projection inputs to `visit`.
pub fn capture_activations(
    dense: &DenseModel,
    seqs: &[Vec<u8>],
    mut visit: impl FnMut(usize, SeqActivations) -> Result<()>,
) -> Result<()> {
    let sk = dense.skeleton::<f64>();
    let mut idx = 0;
    let mut start = 0;
    while start < seqs.len() {
        let len = seqs[start].len();
        let mut end = start + 1;
        while end < seqs.len() && end - start < CAPTURE_BATCH && seqs[end].len() == len {
            end += 1;
        }
        let chunk = &seqs[start..end];
        start = end;
        let mut rec = ActivationRecorder::new(dense.projector::<f64>(), dense.cfg.n_blocks);
        let mut cache = KvCache::new(&dense.cfg, chunk.len());
        forward(&sk, &mut rec, chunk, &mut cache, false)?;
        for s in 0..chunk.len() {
            let rows: Vec<usize> = (s * len..(s + 1) * len).collect();
            let acts = rec
                .inputs
                .iter()
                .map(|slots| std::array::from_fn(|j| slots[j][0].select_rows(&rows)))
                .collect();
            visit(idx, acts)?;
            idx += 1;
        }
    }
    Ok(())
}

/// A model whose seven projections per block are factorized.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel {
    pub skeleton: Skeleton<f64>,
    /// `[block][projection]`.
    pub layers: Vec<Vec<FactorizedLayer>>,
    pub compression: CompressionConfig,
    pub allocation: BudgetAllocation,
}

impl FactorizedModel {
    pub fn layer(&self, block: usize, p: Projection) -> &FactorizedLayer {
        &self.layers[block][p.index()]
    }

    pub fn layers_flat(&self) -> impl Iterator<Item = (usize, Projection, &FactorizedLayer)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(b, ls)| Projection::ALL.into_iter().map(move |p| (b, p, &ls[p.index()])))
    }

    /// Static-prefix pattern `{0..K−1}` for every matrix.
    pub fn static_pattern(&self) -> Pattern {
        Pattern(
            self.layers
                .iter()
                .map(|ls| ls.iter().map(|l| RankSelection::prefix(l.k).expect("K ≥ 1")).collect())
                .collect(),
        )
    }

    /// Stored-parameter count `Σ r_store (m+n)`.
    pub fn storage_params(&self) -> usize {
        self.layers_flat().map(|(_, _, l)| l.r_store() * (l.m + l.n)).sum()
    }

    pub fn dense_params(&self) -> usize {
        self.layers_flat().map(|(_, _, l)| l.m * l.n).sum()
    }

    pub fn projector<'a, T: Scalar>(&'a self, routing: Routing<'a>) -> FactorizedProjector<'a, T> {
        FactorizedProjector::new(self, routing)
    }

    /// Forward over a batch with fresh caches.
    pub fn run(&self, routing: Routing<'_>, seqs: &[Vec<u8>], keep_block_outputs: bool) -> Result<ForwardOutput<f64>> {
        let mut proj = self.projector::<f64>(routing);
        let mut cache = KvCache::new(&self.skeleton.cfg, seqs.len());
        forward(&self.skeleton, &mut proj, seqs, &mut cache, keep_block_outputs)
    }
}

/// Calibrates on `calib` (each sequence one forward) and factorizes every
/// projection under the global compute ratio.
pub fn compress_model(dense: &DenseModel, calib: &[Vec<u8>], cfg: &CompressionConfig) -> Result<FactorizedModel> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration corpus"));
    }
    let mcfg = &dense.cfg;
    let mut cov: Vec<[Option<Matrix>; 4]> = (0..mcfg.n_blocks).map(|_| Default::default()).collect();
    capture_activations(dense, calib, |_, acts| {
        for (b, slots) in acts.iter().enumerate() {
            for (s, x) in slots.iter().enumerate() {
                let c = x.t_matmul(x);
                match &mut cov[b][s] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    })?;

    let mut full = Vec::with_capacity(mcfg.n_blocks);
    for (b, covs) in cov.iter().enumerate() {
        let mut row = Vec::with_capacity(7);
        for p in Projection::ALL {
            let c = covs[p.input_slot() as usize].as_ref().filter(|_| cfg.whitening);
            row.push(factorize_full(&tensor_id(b, p), dense.weight(b, p), c, cfg.jitter_scale)?);
        }
        full.push(row);
    }
    let spectra: Vec<Vec<f64>> = full.iter().flatten().map(|l| l.sigma.clone()).collect();
    let dims: Vec<(usize, usize)> = full.iter().flatten().map(|l| (l.m, l.n)).collect();
    let allocation = allocate_budgets(&spectra, &dims, cfg.ratio, cfg.effective_rank_weighting)?;
    let mut i = 0;
    let layers = full
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|l| {
                    let k = allocation.k[i];
                    i += 1;
                    Ok(l.with_budget(k)?.truncate_storage(cfg.r_store(k, l.r_max())))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FactorizedModel { skeleton: dense.skeleton(), layers, compression: cfg.clone(), allocation })
}

/// One selection per factorized matrix, `[block][projection]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pattern(pub Vec<Vec<RankSelection>>);

impl Pattern {
    pub fn get(&self, block: usize, p: Projection) -> &RankSelection {
        &self.0[block][p.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Projection, &RankSelection)> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(b, row)| Projection::ALL.into_iter().map(move |p| (b, p, &row[p.index()])))
    }

    /// Errors unless every selection has its layer's K and fits `r_store`.
    pub fn check(&self, model: &FactorizedModel) -> Result<()> {
        if self.0.len() != model.layers.len() || self.0.iter().any(|r| r.len() != 7) {
            return Err(Error::Shape("pattern does not cover every matrix".into()));
        }
        for (b, p, sel) in self.iter() {
            sel.check(model.layer(b, p))?;
        }
        Ok(())
    }
}

/// Trained gates, `[block][projection]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Routers(pub Vec<Vec<RouterParams>>);

impl Routers {
    pub fn get(&self, block: usize, p: Projection) -> &RouterParams {
        &self.0[block][p.index()]
    }

    /// Selections for every matrix from pooled inputs `h[block][slot]`.
    pub fn route_pooled(&self, model: &FactorizedModel, pooled: &[[Vec<f64>; 4]]) -> Result<Pattern> {
        let rows = (0..model.layers.len())
            .map(|b| {
                Projection::ALL
                    .iter()
                    .map(|&p| route(self.get(b, p), &pooled[b][p.input_slot() as usize], model.layer(b, p).k))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pattern(rows))
    }
}

/// How a [`FactorizedProjector`] picks experts.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Prefix `{0..K−1}` everywhere.
    Static,
    /// Route each sequence from the mean of its first `prefix` input rows
    /// (all rows when `prefix == 0`).
    Online { routers: &'a Routers, prefix: usize },
    /// Serve a fixed pattern. With `shadow`, routers are also evaluated on
    /// each call and logged without affecting the output.
    Frozen { pattern: &'a Pattern, shadow: Option<&'a Routers> },
}

/// A selection made (or observed) during a forward.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteEvent {
    pub seq: usize,
    pub block: usize,
    pub proj: Projection,
    pub selection: RankSelection,
}

/// Serves a [`FactorizedModel`] with scattered per-expert factors.
#[derive(Clone, Debug)]
pub struct FactorizedProjector<'a, T> {
    model: &'a FactorizedModel,
    /// `[block][projection]` → `(A, B)` in the serving precision.
    factors: Vec<Vec<(Mat<T>, Mat<T>)>>,
    routing: Routing<'a>,
    pub events: Vec<RouteEvent>,
}

fn pooled_rows<T: Scalar>(x: &Mat<T>, rows: std::ops::Range<usize>) -> Vec<f64> {
    let mut h = vec![0.0; x.cols()];
    let count = rows.len() as f64;
    for r in rows {
        for (acc, v) in h.iter_mut().zip(x.row(r)) {
            *acc += v.as_f64();
        }
    }
    h.iter_mut().for_each(|v| *v /= count);
    h
}

/// `X · A_selᵀ` after `X · B_sel`, accumulating experts in ascending order.
pub(crate) fn apply_selection<T: Scalar>(a: &Mat<T>, b: &Mat<T>, sel: &[usize], x: &Mat<T>) -> Mat<T> {
    let coeff = x.matmul(&b.select_columns(sel));
    coeff.matmul(&a.select_columns(sel).transpose())
}

impl<'a, T: Scalar> FactorizedProjector<'a, T> {
    pub fn new(model: &'a FactorizedModel, routing: Routing<'a>) -> Self {
        let factors = model
            .layers
            .iter()
            .map(|ls| ls.iter().map(|l| (l.a.cast(), l.b.cast())).collect())
            .collect();
        Self { model, factors, routing, events: Vec::new() }
    }

    /// The per-sequence pattern assembled from the most recent routed events.
    pub fn last_pattern(&self, seq: usize) -> Option<Pattern> {
        let n_blocks = self.model.layers.len();
        let mut rows: Vec<Vec<Option<RankSelection>>> = vec![vec![None; 7]; n_blocks];
        for e in self.events.iter().filter(|e| e.seq == seq) {
            rows[e.block][e.proj.index()] = Some(e.selection.clone());
        }
        rows.into_iter()
            .map(|r| r.into_iter().collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .map(Pattern)
    }

    fn apply(&mut self, block: usize, p: Projection, x: &Mat<T>, batch: usize) -> Result<Mat<T>> {
        let layer = self.model.layer(block, p);
        let (a, b) = &self.factors[block][p.index()];
        if x.cols() != layer.n || x.rows() % batch != 0 {
            return Err(Error::Shape(format!("{} input {:?}", layer.layer_id, x.shape())));
        }
        let len = x.rows() / batch;
        match self.routing {
            Routing::Static => Ok(apply_selection(a, b, &(0..layer.k).collect::<Vec<_>>(), x)),
            Routing::Frozen { pattern, shadow } => {
                if let Some(routers) = shadow {
                    for s in 0..batch {
                        let h = pooled_rows(x, s * len..(s + 1) * len);
                        let selection = route(routers.get(block, p), &h, layer.k)?;
                        self.events.push(RouteEvent { seq: s, block, proj: p, selection });
                    }
                }
                let sel = pattern.get(block, p);
                sel.check_bound(layer.r_store())?;
                Ok(apply_selection(a, b, sel.indices(), x))
            }
            Routing::Online { routers, prefix } => {
                let mut out = Mat::zeros(x.rows(), layer.m);
                let take = if prefix == 0 { len } else { prefix.min(len) };
                for s in 0..batch {
                    let h = pooled_rows(x, s * len..s * len + take);
                    let selection = route(routers.get(block, p), &h, layer.k)?;
                    let rows: Vec<usize> = (s * len..(s + 1) * len).collect();
                    let y = apply_selection(a, b, selection.indices(), &x.select_rows(&rows));
                    for (i, &r) in rows.iter().enumerate() {
                        out.row_mut(r).copy_from_slice(y.row(i));
                    }
                    self.events.push(RouteEvent { seq: s, block, proj: p, selection });
                }
                Ok(out)
            }
        }
    }
}

impl<T: Scalar> Projector<T> for FactorizedProjector<'_, T> {
    fn attn_in(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<[Mat<T>; 3]> {
        Ok([
            self.apply(block, Projection::Q, x, batch)?,
            self.apply(block, Projection::K, x, batch)?,
            self.apply(block, Projection::V, x, batch)?,
        ])
    }
    fn attn_out(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<Mat<T>> {
        self.apply(block, Projection::O, x, batch)
    }
    fn mlp_in(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<[Mat<T>; 2]> {
        Ok([self.apply(block, Projection::Up, x, batch)?, self.apply(block, Projection::Gate, x, batch)?])
    }
    fn mlp_out(&mut self, block: usize, x: &Mat<T>, batch: usize) -> Result<Mat<T>> {
        self.apply(block, Projection::Down, x, batch)
    }
}

/// Scores sequences with a factorized model under a fixed routing mode.
pub struct FactorizedScorer<'a> {
    pub model: &'a FactorizedModel,
    pub routing: Routing<'a>,
}

impl TokenScorer for FactorizedScorer<'_> {
    fn token_nll(&mut self, tokens: &[u8]) -> Result<Vec<f64>> {
        let out = self.model.run(self.routing, &[tokens.to_vec()], false)?;
        Ok(nll_from_logits(&out.logits, tokens))
    }
}

/// Dense scorer through the generic forward (same code path as factorized).
pub struct DenseScorer<'a>(pub &'a DenseModel);

impl TokenScorer for DenseScorer<'_> {
    fn token_nll(&mut self, tokens: &[u8]) -> Result<Vec<f64>> {
        let sk = self.0.skeleton::<f64>();
        let mut proj: DenseProjector<f64> = self.0.projector();
        let mut cache = KvCache::new(&self.0.cfg, 1);
        let out = forward(&sk, &mut proj, &[tokens.to_vec()], &mut cache, false)?;
        Ok(nll_from_logits(&out.logits, tokens))
    }
}

/// Mean next-byte cross-entropy over a set of sequences.
pub fn mean_nll(scorer: &mut dyn TokenScorer, seqs: &[Vec<u8>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        let nll = scorer.token_nll(s)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    if count == 0 {
        return Err(Error::Empty("evaluation sequences"));
    }
    Ok(total / count as f64)
}

/// Leave-one-out importance of each stored expert of the listed matrices:
/// mean cross-entropy with that expert removed minus the baseline.
pub fn connection_sensitivity(
    model: &FactorizedModel,
    layer_set: &[(usize, Projection)],
    eval: &[Vec<u8>],
) -> Result<Vec<Vec<f64>>> {
    let all = Pattern(
        model
            .layers
            .iter()
            .map(|ls| ls.iter().map(|l| RankSelection::new((0..l.r_store()).collect())).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?,
    );
    let ce = |pattern: &Pattern| -> Result<f64> {
        let mut scorer = FactorizedScorer { model, routing: Routing::Frozen { pattern, shadow: None } };
        mean_nll(&mut scorer, eval)
    };
    let base = ce(&all)?;
    layer_set
        .iter()
        .map(|&(b, p)| {
            let r = model.layer(b, p).r_store();
            (0..r)
                .map(|i| {
                    if r == 1 {
                        return Err(Error::Config("cannot remove the only expert".into()));
                    }
                    let mut pat = all.clone();
                    pat.0[b][p.index()] = RankSelection::new((0..r).filter(|&j| j != i).collect())?;
                    Ok(ce(&pat)? - base)
                })
                .collect()
        })
        .collect()
}
