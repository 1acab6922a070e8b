//! A factorized projection viewed as a bank of rank-one experts
//! `Eᵢ x = aᵢ (bᵢᵀ x)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorizer::FactorizedLayer;
use crate::numerics::{axpy, dot, Matrix};

/// Sorted, duplicate-free set of expert indices with `|indices| = K ≥ 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RankSelection(Vec<usize>);

impl RankSelection {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::InvalidSelection("duplicate expert index".into()));
        }
        if indices.is_empty() {
            return Err(Error::InvalidSelection("empty selection".into()));
        }
        Ok(Self(indices))
    }

    /// `{0, …, k−1}`, the static truncation.
    pub fn prefix(k: usize) -> Result<Self> {
        Self::new((0..k).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn check(&self, layer: &FactorizedLayer) -> Result<()> {
        if self.k() != layer.k {
            return Err(Error::MismatchedK(self.k(), layer.k));
        }
        self.check_bound(layer.r_store())
    }

    pub fn check_bound(&self, r_store: usize) -> Result<()> {
        match self.0.last() {
            Some(&i) if i >= r_store => Err(Error::IndexOutOfRange { index: i, bound: r_store }),
            _ => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for RankSelection {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RankSelection> for Vec<usize> {
    fn from(s: RankSelection) -> Self {
        s.0
    }
}

/// `aᵢ (bᵢᵀ x)` for a single activation vector.
pub fn expert_output(layer: &FactorizedLayer, i: usize, x: &[f64]) -> Result<Vec<f64>> {
    if i >= layer.r_store() {
        return Err(Error::IndexOutOfRange { index: i, bound: layer.r_store() });
    }
    if x.len() != layer.n {
        return Err(Error::Shape(format!("input of length {} for n={}", x.len(), layer.n)));
    }
    let coeff = dot(&layer.b.column(i), x);
    Ok(layer.a.column(i).iter().map(|a| a * coeff).collect())
}

/// Expert projections `P = B_selᵀ X` as a `|sel| × d` matrix.
pub(crate) fn project(layer: &FactorizedLayer, sel: &[usize], x: &Matrix) -> Matrix {
    let bt = layer.b.transpose().select_rows(sel);
    bt.matmul(x)
}

/// `Σ_{i∈sel} aᵢ (bᵢᵀ X)` for `X` of shape `n × d`, summed in ascending expert order.
pub fn masked_forward(layer: &FactorizedLayer, sel: &RankSelection, x: &Matrix) -> Result<Matrix> {
    sel.check_bound(layer.r_store())?;
    masked_forward_indices(layer, sel.indices(), x)
}

/// [`masked_forward`] over an arbitrary ascending index list (any size).
pub fn masked_forward_indices(layer: &FactorizedLayer, sel: &[usize], x: &Matrix) -> Result<Matrix> {
    if x.rows() != layer.n {
        return Err(Error::Shape(format!("activations with {} rows for n={}", x.rows(), layer.n)));
    }
    let p = project(layer, sel, x);
    let at = layer.a.transpose();
    let d = x.cols();
    let mut out = Matrix::zeros(layer.m, d);
    for (row, &i) in sel.iter().enumerate() {
        let ai = at.row(i);
        let pi = p.row(row);
        for (r, &a) in ai.iter().enumerate() {
            if a != 0.0 {
                axpy(a, pi, out.row_mut(r));
            }
        }
    }
    Ok(out)
}

/// `‖Ŵ X − dense_out‖_F²`.
pub fn reconstruction_loss(
    layer: &FactorizedLayer,
    sel: &RankSelection,
    x: &Matrix,
    dense_out: &Matrix,
) -> Result<f64> {
    let y = masked_forward(layer, sel, x)?;
    if y.shape() != dense_out.shape() {
        return Err(Error::Shape("dense output shape differs".into()));
    }
    Ok(y.sub(dense_out).frobenius_sq())
}

/// Per-expert energy `cᵢ = ‖aᵢ‖² Σ_t (bᵢᵀ x_t)²` over all stored experts.
pub fn energy_scores(layer: &FactorizedLayer, x: &Matrix) -> Vec<f64> {
    let all: Vec<usize> = (0..layer.r_store()).collect();
    let p = project(layer, &all, x);
    all.iter()
        .map(|&i| {
            let a = layer.a.column(i);
            dot(&a, &a) * dot(p.row(i), p.row(i))
        })
        .collect()
}

/// Top-`k` indices by score, ties toward the lower index, returned ascending.
pub(crate) fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

/// Loss-optimal K-subset by energy ranking. Exact whenever the columns of `A`
/// are mutually orthogonal, because the dropped contributions are then
/// orthogonal and their squared norms add.
pub fn oracle_select(layer: &FactorizedLayer, x: &Matrix, k: usize) -> Result<RankSelection> {
    if k == 0 || k > layer.r_store() {
        return Err(Error::Config(format!("K={k} outside 1..={}", layer.r_store())));
    }
    RankSelection::new(top_k_indices(&energy_scores(layer, x), k))
}

/// Disjoint union helper used in tests and layout code.
pub fn union(a: &RankSelection, b: &RankSelection) -> Result<RankSelection> {
    let set: BTreeSet<usize> = a.indices().iter().chain(b.indices()).copied().collect();
    RankSelection::new(set.into_iter().collect())
}
