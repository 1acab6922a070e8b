//! Serving a factorized model under cached patterns.
//!
//! Two independent optimizations, giving four variants:
//!
//! * **Aggregation** stores each matrix's experts in slots: experts chosen by
//!   at least a `psi` fraction of cached patterns first (descending σ), then
//!   each pattern's remaining experts as its own contiguous block. Serving a
//!   cached pattern therefore reads at most two slot ranges per factor. The
//!   residual blocks duplicate columns; [`ExecModel::storage_ratio`] reports
//!   the cost. [`LayoutMode::SingleCopy`] keeps one copy and gives up the
//!   two-range bound.
//! * **Fusion** replays an [`ExecPlan`] in which the B-side multiplies that
//!   share an input are one launch and the matching A-side multiplies are one
//!   batched launch.
//!
//! Factors are stored transposed (`slots × m`, `slots × n`) so that one slot
//! is one contiguous row.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::{FactorizedModel, Pattern};
use crate::error::{Error, Result};
use crate::factorizer::FactorizedLayer;
use crate::numerics::{Mat, Scalar};
use crate::rank_experts::RankSelection;
use crate::toy_lm::{forward, tensor_id, ForwardOutput, InputSlot, KvCache, Projection, Projector, Skeleton};

pub const DEFAULT_PSI: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    /// Shared block plus one private block per pattern.
    #[default]
    Duplicated,
    /// Shared block, then every other used expert once, most frequent first.
    SingleCopy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedLayer<T = f64> {
    pub layer_id: String,
    pub psi: f64,
    pub mode: LayoutMode,
    /// Experts chosen by at least a `psi` fraction of patterns, stored in the
    /// head slots in descending σ order.
    pub shared_ids: Vec<usize>,
    /// Expert held by each storage slot.
    pub slot_expert: Vec<usize>,
    /// `slots × m`, row `j` is the A column of slot `j`.
    pub a_slots: Mat<T>,
    /// `slots × n`.
    pub b_slots: Mat<T>,
    /// Per cached pattern, the slots of its selected experts, in read order.
    pub pattern_slots: Vec<Vec<usize>>,
    /// Per cached pattern, the slot ranges it reads. The whole shared block
    /// is read; shared experts the pattern did not select are masked out.
    pub pattern_reads: Vec<Vec<Range<usize>>>,
}

/// Maximal runs of consecutive values, in order.
pub fn runs(slots: &[usize]) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for &s in slots {
        match out.last_mut() {
            Some(r) if r.end == s => r.end += 1,
            _ => out.push(s..s + 1),
        }
    }
    out
}

pub fn aggregate_layout(
    layer: &FactorizedLayer,
    patterns: &[&RankSelection],
    psi: f64,
    mode: LayoutMode,
) -> Result<AggregatedLayer> {
    if !(psi > 0.0 && psi <= 1.0) {
        return Err(Error::Config(format!("psi {psi} outside (0, 1]")));
    }
    if patterns.is_empty() {
        return Err(Error::Empty("cached patterns"));
    }
    let r = layer.r_store();
    let mut freq = vec![0usize; r];
    for p in patterns {
        p.check_bound(r)?;
        for &i in p.indices() {
            freq[i] += 1;
        }
    }
    let n = patterns.len() as f64;
    let mut shared_ids: Vec<usize> = (0..r).filter(|&i| freq[i] as f64 >= psi * n).collect();
    shared_ids.sort_by(|&a, &b| layer.sigma[b].total_cmp(&layer.sigma[a]).then(a.cmp(&b)));
    let mut slot_expert = shared_ids.clone();
    let residual = |p: &RankSelection| -> Vec<usize> {
        p.indices().iter().copied().filter(|i| !shared_ids.contains(i)).collect()
    };
    let shared_of = |p: &RankSelection| -> Vec<usize> {
        (0..shared_ids.len()).filter(|&s| p.contains(shared_ids[s])).collect()
    };
    let mut pattern_slots = Vec::with_capacity(patterns.len());
    let mut pattern_reads = Vec::with_capacity(patterns.len());
    match mode {
        LayoutMode::Duplicated => {
            for p in patterns {
                let own = residual(p);
                let start = slot_expert.len();
                slot_expert.extend(&own);
                pattern_slots.push(shared_of(p).into_iter().chain(start..start + own.len()).collect());
                let read: Vec<usize> = (0..shared_ids.len()).chain(start..start + own.len()).collect();
                pattern_reads.push(runs(&read));
            }
        }
        LayoutMode::SingleCopy => {
            let mut rest: Vec<usize> = (0..r).filter(|&i| freq[i] > 0 && !shared_ids.contains(&i)).collect();
            rest.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            slot_expert.extend(&rest);
            let slot_of = |e: usize| slot_expert.iter().position(|&x| x == e).expect("stored expert");
            for p in patterns {
                let mut own: Vec<usize> = residual(p).into_iter().map(slot_of).collect();
                own.sort_unstable();
                pattern_slots.push(shared_of(p).into_iter().chain(own.iter().copied()).collect());
                let read: Vec<usize> = (0..shared_ids.len()).chain(own).collect();
                pattern_reads.push(runs(&read));
            }
        }
    }
    let a_t = layer.a.transpose();
    let b_t = layer.b.transpose();
    Ok(AggregatedLayer {
        layer_id: layer.layer_id.clone(),
        psi,
        mode,
        a_slots: a_t.select_rows(&slot_expert),
        b_slots: b_t.select_rows(&slot_expert),
        shared_ids,
        slot_expert,
        pattern_slots,
        pattern_reads,
    })
}

impl<T: Scalar> AggregatedLayer<T> {
    pub fn cast<U: Scalar>(&self) -> AggregatedLayer<U> {
        AggregatedLayer {
            layer_id: self.layer_id.clone(),
            psi: self.psi,
            mode: self.mode,
            shared_ids: self.shared_ids.clone(),
            slot_expert: self.slot_expert.clone(),
            a_slots: self.a_slots.cast(),
            b_slots: self.b_slots.cast(),
            pattern_slots: self.pattern_slots.clone(),
            pattern_reads: self.pattern_reads.clone(),
        }
    }

    fn slots(&self, pattern_id: usize) -> Result<&[usize]> {
        self.pattern_slots.get(pattern_id).map(Vec::as_slice).ok_or(Error::UnknownPattern(pattern_id))
    }

    /// The experts a cached pattern selects, ascending.
    pub fn selection(&self, pattern_id: usize) -> Result<Vec<usize>> {
        let mut e: Vec<usize> = self.slots(pattern_id)?.iter().map(|&s| self.slot_expert[s]).collect();
        e.sort_unstable();
        Ok(e)
    }

    /// The pattern's experts outside the shared block, ascending.
    pub fn residual_ids(&self, pattern_id: usize) -> Result<Vec<usize>> {
        Ok(self.selection(pattern_id)?.into_iter().filter(|i| !self.shared_ids.contains(i)).collect())
    }

    pub fn storage_slots(&self) -> usize {
        self.slot_expert.len()
    }

    /// `(Bᵀ_sel, Aᵀ_sel)`: the pattern's ranges are read whole, then the
    /// unselected shared rows are dropped.
    fn gather(&self, pattern_id: usize, trace: Option<&mut AccessTrace>, call: usize) -> Result<(Mat<T>, Mat<T>)> {
        let wanted = self.slots(pattern_id)?;
        let rs = &self.pattern_reads[pattern_id];
        if let Some(t) = trace {
            for r in rs {
                for factor in [Factor::B, Factor::A] {
                    t.reads.push(Read { call, layer_id: self.layer_id.clone(), factor, slots: r.clone() });
                }
            }
        }
        let read: Vec<usize> = rs.iter().flat_map(|r| r.clone()).collect();
        let keep: Vec<usize> =
            wanted.iter().map(|s| read.iter().position(|x| x == s).expect("selected slot is read")).collect();
        let stack = |m: &Mat<T>| -> Result<Mat<T>> {
            let parts: Vec<Mat<T>> = rs.iter().map(|r| m.row_range(r.clone())).collect();
            let block = Mat::vstack(&parts.iter().collect::<Vec<_>>())?;
            Ok(if keep.len() == block.rows() { block } else { block.select_rows(&keep) })
        };
        Ok((stack(&self.b_slots)?, stack(&self.a_slots)?))
    }
}

/// `X · B_sel · A_selᵀ` for a cached pattern, with `X` as tokens × n.
pub fn aggregated_forward<T: Scalar>(
    agg: &AggregatedLayer<T>,
    pattern_id: usize,
    x: &Mat<T>,
    trace: Option<&mut AccessTrace>,
) -> Result<Mat<T>> {
    if x.cols() != agg.b_slots.cols() {
        return Err(Error::Shape(format!("{} input {:?}", agg.layer_id, x.shape())));
    }
    let call = trace.as_ref().map_or(0, |t| t.next_call());
    let (bt, at) = agg.gather(pattern_id, trace, call)?;
    Ok(x.matmul_t(&bt).matmul(&at))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Read {
    pub call: usize,
    pub layer_id: String,
    pub factor: Factor,
    pub slots: Range<usize>,
}

/// Slot ranges read from aggregated storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessTrace {
    pub reads: Vec<Read>,
}

impl AccessTrace {
    fn next_call(&self) -> usize {
        self.reads.last().map_or(0, |r| r.call + 1)
    }

    /// The most maximal runs any one factor needed within one call.
    pub fn max_runs_per_factor(&self) -> usize {
        let mut groups: std::collections::BTreeMap<(usize, &str, Factor), Vec<usize>> = Default::default();
        for r in &self.reads {
            groups.entry((r.call, &r.layer_id, r.factor)).or_default().extend(r.slots.clone());
        }
        groups
            .into_values()
            .map(|mut s| {
                s.sort_unstable();
                s.dedup();
                runs(&s).len()
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchKind {
    FusedB,
    BatchedA,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

/// One planned matrix multiply (a "kernel launch").
#[derive(Clone, Debug, PartialEq)]
pub struct Launch {
    pub block: usize,
    pub kind: LaunchKind,
    pub side: Side,
    pub projections: Vec<Projection>,
    pub tensor_ids: Vec<String>,
    /// Factor block shapes: `n × K` for B, `m × K` for A.
    pub shapes: Vec<(usize, usize)>,
}

impl Launch {
    fn stage(&self) -> InputSlot {
        self.projections[0].input_slot()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecPlan {
    pub launches: Vec<Launch>,
    pub per_block: Vec<usize>,
    pub gqa: bool,
    pub fused: bool,
}

impl ExecPlan {
    pub fn launches_per_block(&self) -> usize {
        self.per_block.iter().copied().max().unwrap_or(0)
    }
}

fn launch(model: &FactorizedModel, block: usize, kind: LaunchKind, side: Side, ps: &[Projection]) -> Launch {
    let shapes = ps
        .iter()
        .map(|&p| {
            let l = model.layer(block, p);
            (if side == Side::B { l.n } else { l.m }, l.k)
        })
        .collect();
    Launch { block, kind, side, projections: ps.to_vec(), tensor_ids: ps.iter().map(|&p| tensor_id(block, p)).collect(), shapes }
}

fn make_plan(model: &FactorizedModel, pattern: &Pattern, gqa: bool, fused: bool) -> Result<ExecPlan> {
    use Projection::*;
    pattern.check(model)?;
    let mut launches = Vec::new();
    let mut per_block = Vec::with_capacity(model.layers.len());
    for b in 0..model.layers.len() {
        let before = launches.len();
        if fused {
            launches.push(launch(model, b, LaunchKind::FusedB, Side::B, &[Q, K, V]));
            if gqa {
                launches.push(launch(model, b, LaunchKind::BatchedA, Side::A, &[Q]));
                launches.push(launch(model, b, LaunchKind::BatchedA, Side::A, &[K, V]));
            } else {
                launches.push(launch(model, b, LaunchKind::BatchedA, Side::A, &[Q, K, V]));
            }
            launches.push(launch(model, b, LaunchKind::Single, Side::B, &[O]));
            launches.push(launch(model, b, LaunchKind::Single, Side::A, &[O]));
            launches.push(launch(model, b, LaunchKind::FusedB, Side::B, &[Up, Gate]));
            launches.push(launch(model, b, LaunchKind::BatchedA, Side::A, &[Up, Gate]));
            launches.push(launch(model, b, LaunchKind::Single, Side::B, &[Down]));
            launches.push(launch(model, b, LaunchKind::Single, Side::A, &[Down]));
        } else {
            for p in Projection::ALL {
                launches.push(launch(model, b, LaunchKind::Single, Side::B, &[p]));
                launches.push(launch(model, b, LaunchKind::Single, Side::A, &[p]));
            }
        }
        per_block.push(launches.len() - before);
    }
    Ok(ExecPlan { launches, per_block, gqa, fused })
}

/// Fused plan. With `gqa` the q and k/v A-side multiplies have different
/// output widths and cannot share one batched launch.
pub fn build_plan(model: &FactorizedModel, pattern: &Pattern, gqa: bool) -> Result<ExecPlan> {
    make_plan(model, pattern, gqa, true)
}

/// Two launches per projection.
pub fn unfused_plan(model: &FactorizedModel, pattern: &Pattern) -> Result<ExecPlan> {
    make_plan(model, pattern, false, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ScatteredUnfused,
    AggregatedOnly,
    FusedOnly,
    AggregatedFused,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ScatteredUnfused, Variant::AggregatedOnly, Variant::FusedOnly, Variant::AggregatedFused];

    pub fn aggregated(self) -> bool {
        matches!(self, Variant::AggregatedOnly | Variant::AggregatedFused)
    }

    pub fn fused(self) -> bool {
        matches!(self, Variant::FusedOnly | Variant::AggregatedFused)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ScatteredUnfused => "scattered_unfused",
            Variant::AggregatedOnly => "aggregated_only",
            Variant::FusedOnly => "fused_only",
            Variant::AggregatedFused => "aggregated_fused",
        }
    }

    pub fn plan(self, model: &FactorizedModel, pattern: &Pattern, gqa: bool) -> Result<ExecPlan> {
        if self.fused() {
            build_plan(model, pattern, gqa)
        } else {
            unfused_plan(model, pattern)
        }
    }
}

/// A factorized model prepared for serving a fixed set of cached patterns.
#[derive(Clone, Debug)]
pub struct ExecModel<T> {
    pub skeleton: Skeleton<T>,
    pub patterns: Vec<Pattern>,
    /// `[block][projection]` full stored factors, transposed.
    a_t: Vec<Vec<Mat<T>>>,
    b_t: Vec<Vec<Mat<T>>>,
    pub aggregated: Vec<Vec<AggregatedLayer<T>>>,
    dense_params: usize,
    scattered_params: usize,
}

impl<T: Scalar> ExecModel<T> {
    pub fn new(model: &FactorizedModel, patterns: Vec<Pattern>, psi: f64, mode: LayoutMode) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::Empty("cached patterns"));
        }
        for p in &patterns {
            p.check(model)?;
        }
        let mut a_t = Vec::new();
        let mut b_t = Vec::new();
        let mut aggregated = Vec::new();
        for (b, ls) in model.layers.iter().enumerate() {
            a_t.push(ls.iter().map(|l| l.a.transpose().cast()).collect());
            b_t.push(ls.iter().map(|l| l.b.transpose().cast()).collect());
            let row = Projection::ALL
                .iter()
                .map(|&p| {
                    let sels: Vec<&RankSelection> = patterns.iter().map(|pt| pt.get(b, p)).collect();
                    Ok(aggregate_layout(model.layer(b, p), &sels, psi, mode)?.cast())
                })
                .collect::<Result<Vec<_>>>()?;
            aggregated.push(row);
        }
        Ok(Self {
            skeleton: model.skeleton.cast(),
            patterns,
            a_t,
            b_t,
            aggregated,
            dense_params: model.dense_params(),
            scattered_params: model.storage_params(),
        })
    }

    /// Stored factor parameters over dense projection parameters.
    pub fn storage_ratio(&self, aggregated: bool) -> f64 {
        let stored = if aggregated {
            self.aggregated.iter().flatten().map(|a| a.storage_slots() * (a.a_slots.cols() + a.b_slots.cols())).sum()
        } else {
            self.scattered_params
        };
        stored as f64 / self.dense_params as f64
    }

    pub fn executor<'a>(&'a self, plan: &'a ExecPlan, variant: Variant, pattern_id: usize) -> Result<PlanExecutor<'a, T>> {
        if pattern_id >= self.patterns.len() {
            return Err(Error::UnknownPattern(pattern_id));
        }
        if plan.fused != variant.fused() || plan.per_block.len() != self.a_t.len() {
            return Err(Error::Config(format!("plan does not match variant {}", variant.name())));
        }
        Ok(PlanExecutor {
            model: self,
            plan,
            aggregated: variant.aggregated(),
            pattern_id,
            launches: vec![0; plan.per_block.len()],
            trace: None,
            calls: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

/// Replays a plan as a [`Projector`], counting launches per block.
#[derive(Debug)]
pub struct PlanExecutor<'a, T> {
    model: &'a ExecModel<T>,
    plan: &'a ExecPlan,
    aggregated: bool,
    pattern_id: usize,
    pub launches: Vec<usize>,
    /// Aggregated reads, when set to `Some`.
    pub trace: Option<AccessTrace>,
    calls: usize,
}

impl<T: Scalar> PlanExecutor<'_, T> {
    /// Runs the plan over `tokens`. Prefill needs an empty cache; decode
    /// takes one new token per sequence.
    pub fn forward(&mut self, tokens: &[Vec<u8>], cache: &mut KvCache<T>, phase: Phase) -> Result<ForwardOutput<T>> {
        match phase {
            Phase::Prefill if !cache.is_empty() => {
                return Err(Error::Shape("prefill on a non-empty cache".into()));
            }
            Phase::Decode if cache.is_empty() || tokens.iter().any(|t| t.len() != 1) => {
                return Err(Error::Shape("decode takes one token per sequence after a prefill".into()));
            }
            _ => {}
        }
        forward(&self.model.skeleton, self, tokens, cache, false)
    }

    /// `(Bᵀ_sel, Aᵀ_sel)` of one matrix for the served pattern.
    fn factors(&mut self, block: usize, p: Projection) -> Result<(Mat<T>, Mat<T>)> {
        if self.aggregated {
            let call = self.calls;
            self.model.aggregated[block][p.index()].gather(self.pattern_id, self.trace.as_mut(), call)
        } else {
            let sel = self.model.patterns[self.pattern_id].get(block, p).indices();
            Ok((self.model.b_t[block][p.index()].select_rows(sel), self.model.a_t[block][p.index()].select_rows(sel)))
        }
    }

    fn run_stage(&mut self, block: usize, stage: InputSlot, x: &Mat<T>) -> Result<Vec<Mat<T>>> {
        let plan = self.plan;
        let mut z: [Option<Mat<T>>; 7] = Default::default();
        let mut a_side: [Option<Mat<T>>; 7] = Default::default();
        let mut out: [Option<Mat<T>>; 7] = Default::default();
        for l in plan.launches.iter().filter(|l| l.block == block && l.stage() == stage) {
            self.launches[block] += 1;
            match l.side {
                Side::B => {
                    let mut bts = Vec::with_capacity(l.projections.len());
                    for &p in &l.projections {
                        let (bt, at) = self.factors(block, p)?;
                        if bt.cols() != x.cols() {
                            return Err(Error::Shape(format!("{} input {:?}", tensor_id(block, p), x.shape())));
                        }
                        bts.push(bt);
                        a_side[p.index()] = Some(at);
                    }
                    let stacked = Mat::vstack(&bts.iter().collect::<Vec<_>>())?;
                    let zz = x.matmul_t(&stacked);
                    let mut col = 0;
                    for (&p, bt) in l.projections.iter().zip(&bts) {
                        let cols: Vec<usize> = (col..col + bt.rows()).collect();
                        col += bt.rows();
                        z[p.index()] = Some(if l.projections.len() == 1 { zz.clone() } else { zz.select_columns(&cols) });
                    }
                }
                Side::A => {
                    for &p in &l.projections {
                        let (zp, at) = z[p.index()].take().zip(a_side[p.index()].take()).ok_or_else(|| {
                            Error::Shape(format!("A-side launch for {} before its B side", tensor_id(block, p)))
                        })?;
                        out[p.index()] = Some(zp.matmul(&at));
                    }
                }
            }
        }
        self.calls += 1;
        Projection::ALL
            .iter()
            .filter(|p| p.input_slot() == stage)
            .map(|p| out[p.index()].take().ok_or_else(|| Error::Shape(format!("plan misses {}", tensor_id(block, *p)))))
            .collect()
    }
}

impl<T: Scalar> Projector<T> for PlanExecutor<'_, T> {
    fn attn_in(&mut self, block: usize, x: &Mat<T>, _batch: usize) -> Result<[Mat<T>; 3]> {
        let mut v = self.run_stage(block, InputSlot::AttnIn, x)?.into_iter();
        Ok(std::array::from_fn(|_| v.next().expect("three outputs")))
    }
    fn attn_out(&mut self, block: usize, x: &Mat<T>, _batch: usize) -> Result<Mat<T>> {
        Ok(self.run_stage(block, InputSlot::AttnOut, x)?.remove(0))
    }
    fn mlp_in(&mut self, block: usize, x: &Mat<T>, _batch: usize) -> Result<[Mat<T>; 2]> {
        let mut v = self.run_stage(block, InputSlot::MlpIn, x)?.into_iter();
        Ok(std::array::from_fn(|_| v.next().expect("two outputs")))
    }
    fn mlp_out(&mut self, block: usize, x: &Mat<T>, _batch: usize) -> Result<Mat<T>> {
        Ok(self.run_stage(block, InputSlot::MlpOut, x)?.remove(0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub seq_len: usize,
    pub repeats: usize,
    pub gqa: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch_sizes: vec![1, 8], seq_len: 64, repeats: 5, gqa: false }
    }
}

/// One `bench.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub ratio: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub phase: Phase,
    pub median_ms: f64,
    pub launches_per_block: usize,
    pub storage_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock of prefill (`seq_len` tokens) and of one decode step
/// for every variant and batch size, serving cached pattern 0 in f32.
pub fn bench(model: &FactorizedModel, patterns: Vec<Pattern>, psi: f64, prompt: &[u8], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats < 3 {
        return Err(Error::Config("bench needs at least 3 repeats".into()));
    }
    if prompt.len() < cfg.seq_len || cfg.seq_len == 0 {
        return Err(Error::InsufficientData(format!("bench prompt shorter than seq_len {}", cfg.seq_len)));
    }
    let exec: ExecModel<f32> = ExecModel::new(model, patterns, psi, LayoutMode::Duplicated)?;
    let pattern = exec.patterns[0].clone();
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let plan = variant.plan(model, &pattern, cfg.gqa)?;
        for &batch in &cfg.batch_sizes {
            let tokens: Vec<Vec<u8>> = vec![prompt[..cfg.seq_len].to_vec(); batch];
            let next: Vec<Vec<u8>> = vec![vec![prompt[0]]; batch];
            let mut prefill_ms = Vec::with_capacity(cfg.repeats);
            let mut decode_ms = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let mut ex = exec.executor(&plan, variant, 0)?;
                let mut cache = KvCache::new(&exec.skeleton.cfg, batch);
                let t = Instant::now();
                ex.forward(&tokens, &mut cache, Phase::Prefill)?;
                prefill_ms.push(t.elapsed().as_secs_f64() * 1e3);
                let t = Instant::now();
                ex.forward(&next, &mut cache, Phase::Decode)?;
                decode_ms.push(t.elapsed().as_secs_f64() * 1e3);
            }
            for (phase, ms) in [(Phase::Prefill, prefill_ms), (Phase::Decode, decode_ms)] {
                rows.push(BenchRow {
                    variant,
                    ratio: model.compression.ratio,
                    batch,
                    seq_len: cfg.seq_len,
                    phase,
                    median_ms: median(ms),
                    launches_per_block: plan.launches_per_block(),
                    storage_ratio: exec.storage_ratio(variant.aggregated()),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
