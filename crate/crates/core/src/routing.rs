//! Router training and evaluation over a whole factorized model.
//!
//! Each matrix's router is trained on its own reconstruction loss against the
//! dense layer output, with the dense model supplying the inputs. The gate
//! input is the layer input pooled over the first `route_prefix` tokens of a
//! sequence (all tokens when zero); the loss covers every token.

use serde::{Deserialize, Serialize};

use crate::compress::{capture_activations, FactorizedModel, Routers};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pattern_cache::overlap;
use crate::rank_experts::RankSelection;
use crate::router::{route, train_layer_router, GateStats, RouterTrainConfig, TrainReport};
use crate::toy_lm::{DenseModel, Projection};

fn pooled_prefix(x_rows: &Matrix, prefix: usize) -> Vec<f64> {
    let take = if prefix == 0 { x_rows.rows() } else { prefix.min(x_rows.rows()) };
    let mut h = vec![0.0; x_rows.cols()];
    for r in 0..take {
        for (acc, v) in h.iter_mut().zip(x_rows.row(r)) {
            *acc += v;
        }
    }
    h.iter_mut().for_each(|v| *v /= take as f64);
    h
}

/// Gate statistics for every matrix (flat `[block·7 + proj]`) and sequence.
pub fn gate_statistics(
    dense: &DenseModel,
    model: &FactorizedModel,
    seqs: &[Vec<u8>],
    route_prefix: usize,
) -> Result<Vec<Vec<GateStats>>> {
    let mut out: Vec<Vec<GateStats>> = vec![Vec::with_capacity(seqs.len()); model.layers.len() * 7];
    capture_activations(dense, seqs, |_, acts| {
        for (b, p, layer) in model.layers_flat() {
            let x_rows = &acts[b][p.input_slot() as usize];
            let y_rows = x_rows.matmul_t(dense.weight(b, p));
            let mut stats = GateStats::new(layer, &x_rows.transpose(), &y_rows.transpose())?;
            stats.h = pooled_prefix(x_rows, route_prefix);
            out[b * 7 + p.index()].push(stats);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Trains one router per matrix with the factors frozen.
pub fn train_routers(
    model: &FactorizedModel,
    stats: &[Vec<GateStats>],
    cfg: &RouterTrainConfig,
) -> Result<(Routers, Vec<TrainReport>)> {
    if stats.len() != model.layers.len() * 7 {
        return Err(Error::Shape("gate statistics do not cover every matrix".into()));
    }
    let mut reports = Vec::with_capacity(stats.len());
    let mut rows = Vec::with_capacity(model.layers.len());
    for (b, ls) in model.layers.iter().enumerate() {
        let mut row = Vec::with_capacity(7);
        for p in Projection::ALL {
            let layer = &ls[p.index()];
            let (params, report) = train_layer_router(&stats[b * 7 + p.index()], &layer.sigma, layer.k, cfg)?;
            row.push(params);
            reports.push(report);
        }
        rows.push(row);
    }
    Ok((Routers(rows), reports))
}

/// Held-out reconstruction quality of one matrix's router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRouteStats {
    pub tensor_id: String,
    pub k: usize,
    pub r_store: usize,
    /// Mean `ℒ_rec` per sequence under each selection rule.
    pub routed_loss: f64,
    pub static_loss: f64,
    pub oracle_loss: f64,
    /// Mean `|routed ∩ oracle| / K`.
    pub oracle_overlap: f64,
}

pub fn evaluate_routers(model: &FactorizedModel, routers: &Routers, stats: &[Vec<GateStats>]) -> Result<Vec<MatrixRouteStats>> {
    model
        .layers_flat()
        .map(|(b, p, layer)| {
            let samples = &stats[b * 7 + p.index()];
            if samples.is_empty() {
                return Err(Error::Empty("held-out sequences"));
            }
            let prefix = RankSelection::prefix(layer.k)?;
            let (mut routed, mut stat, mut orac, mut ov) = (0.0, 0.0, 0.0, 0.0);
            for s in samples {
                let sel = route(routers.get(b, p), &s.h, layer.k)?;
                let best = s.oracle(layer.k)?;
                routed += s.loss(&sel);
                stat += s.loss(&prefix);
                orac += s.loss(&best);
                ov += overlap(&sel, &best)?;
            }
            let n = samples.len() as f64;
            Ok(MatrixRouteStats {
                tensor_id: layer.layer_id.clone(),
                k: layer.k,
                r_store: layer.r_store(),
                routed_loss: routed / n,
                static_loss: stat / n,
                oracle_loss: orac / n,
                oracle_overlap: ov / n,
            })
        })
        .collect()
}
