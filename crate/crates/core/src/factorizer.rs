//! Whitened truncated SVD of a single projection and rank-budget allocation
//! across projections.
//!
//! The whitening factor `S` is the lower Cholesky factor of the (ridged)
//! calibration covariance `XXᵀ + jitter·I`. The SVD runs on `W·S` and the
//! factors are absorbed offline as `A = UΣ` and `B = S⁻ᵀV`, so that
//! `W x = A (Bᵀ x)` at full rank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_lower, solve_lower_triangular, svd, Matrix};

/// Relative ridge used when the caller leaves `jitter_scale` at its default.
pub const DEFAULT_JITTER_SCALE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    /// Fraction of dense projection parameters removed from the compute path.
    pub ratio: f64,
    pub whitening: bool,
    /// `r_store = min(r_max, ceil(store_multiplier · K))`.
    pub store_multiplier: f64,
    /// Ridge added to `XXᵀ`, as a multiple of `trace(XXᵀ)/n`.
    pub jitter_scale: f64,
    /// Weight each layer's rank scores by the exponential of its spectrum entropy.
    pub effective_rank_weighting: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            whitening: true,
            store_multiplier: 2.0,
            jitter_scale: DEFAULT_JITTER_SCALE,
            effective_rank_weighting: false,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio {} outside [0,1)", self.ratio)));
        }
        if !(self.store_multiplier >= 1.0) {
            return Err(Error::Config("store_multiplier must be ≥ 1".into()));
        }
        if !(self.jitter_scale >= 0.0) {
            return Err(Error::Config("jitter_scale must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn r_store(&self, k: usize, r_max: usize) -> usize {
        ((self.store_multiplier * k as f64).ceil() as usize).clamp(k, r_max)
    }
}

#[derive(Clone, Debug)]
pub struct WhiteningTransform {
    /// Lower-triangular Cholesky factor of `XXᵀ + jitter·I`.
    pub s: Matrix,
    pub jitter: f64,
}

impl WhiteningTransform {
    /// `‖S⁻¹ C S⁻ᵀ − I‖_max` for a symmetric `C`, via two triangular solves.
    pub fn identity_error(&self, cov: &Matrix) -> Result<f64> {
        let left = solve_lower_triangular(&self.s, cov, false)?;
        let both = solve_lower_triangular(&self.s, &left.transpose(), false)?;
        Ok(both.sub(&Matrix::identity(cov.rows())).max_abs())
    }

    /// `S⁻¹ X`.
    pub fn apply_inverse(&self, x: &Matrix) -> Result<Matrix> {
        solve_lower_triangular(&self.s, x, false)
    }
}

/// `X·Xᵀ` for activations laid out as `n × d` (one column per token).
pub fn covariance(x: &Matrix) -> Matrix {
    x.matmul_t(x)
}

/// Default ridge for a covariance: `scale · trace/n`.
pub fn default_jitter(cov: &Matrix, scale: f64) -> f64 {
    scale * cov.trace() / cov.rows().max(1) as f64
}

/// Whitens `W` against activations `X` (`n × d`): returns `S` and `W·S`.
pub fn whiten(w: &Matrix, x: &Matrix, jitter: f64) -> Result<(WhiteningTransform, Matrix)> {
    if x.rows() != w.cols() {
        return Err(Error::Shape(format!(
            "activations have {} rows, weight has {} columns",
            x.rows(),
            w.cols()
        )));
    }
    whiten_covariance(w, &covariance(x), jitter)
}

/// Same as [`whiten`] with a precomputed `XXᵀ`.
pub fn whiten_covariance(
    w: &Matrix,
    cov: &Matrix,
    jitter: f64,
) -> Result<(WhiteningTransform, Matrix)> {
    if cov.rows() != w.cols() || cov.cols() != w.cols() {
        return Err(Error::Shape("covariance does not match weight".into()));
    }
    let s = cholesky_with_jitter(cov, jitter)?;
    let ws = w.matmul(&s.s);
    Ok((s, ws))
}

fn cholesky_with_jitter(cov: &Matrix, jitter: f64) -> Result<WhiteningTransform> {
    let attempt = |j: f64| {
        let mut c = cov.clone();
        for i in 0..c.rows() {
            c[(i, i)] += j;
        }
        cholesky_lower(&c)
    };
    match attempt(jitter) {
        Ok(s) => Ok(WhiteningTransform { s, jitter }),
        Err(Error::NotPositiveDefinite) => {
            // one escalation; a zero ridge escalates to the 1e-6 relative floor
            let floor = default_jitter(cov, 1e-6);
            let escalated = (jitter * 10.0).max(floor);
            attempt(escalated)
                .map(|s| WhiteningTransform { s, jitter: escalated })
                .map_err(|_| Error::CovarianceDegenerate)
        }
        Err(e) => Err(e),
    }
}

/// One projection in absorbed low-rank form.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLayer {
    pub layer_id: String,
    pub m: usize,
    pub n: usize,
    /// `m × r_store`, columns `aᵢ = σᵢuᵢ`.
    pub a: Matrix,
    /// `n × r_store`, columns `bᵢ` with `bᵢᵀx = vᵢᵀS⁻¹x`.
    pub b: Matrix,
    pub sigma: Vec<f64>,
    /// Compute budget (experts used per forward).
    pub k: usize,
    pub whitened: bool,
}

impl FactorizedLayer {
    pub fn r_store(&self) -> usize {
        self.sigma.len()
    }

    pub fn r_max(&self) -> usize {
        self.m.min(self.n)
    }

    /// Same factors with a different compute budget.
    pub fn with_budget(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.r_store() {
            return Err(Error::Config(format!(
                "budget {k} outside 1..={}",
                self.r_store()
            )));
        }
        Ok(Self { k, ..self.clone() })
    }

    /// Drops experts beyond `r` from storage.
    pub fn truncate_storage(&self, r: usize) -> Self {
        let r = r.clamp(self.k, self.r_store());
        let idx: Vec<usize> = (0..r).collect();
        Self {
            a: self.a.select_columns(&idx),
            b: self.b.select_columns(&idx),
            sigma: self.sigma[..r].to_vec(),
            ..self.clone()
        }
    }
}

/// Full-rank factorization with all `r_max` experts stored.
pub fn factorize_full(
    layer_id: &str,
    w: &Matrix,
    cov: Option<&Matrix>,
    jitter_scale: f64,
) -> Result<FactorizedLayer> {
    let (m, n) = w.shape();
    let (target, s) = match cov {
        Some(cov) => {
            let jitter = default_jitter(cov, jitter_scale);
            let (s, ws) = whiten_covariance(w, cov, jitter)?;
            (ws, Some(s))
        }
        None => (w.clone(), None),
    };
    let dec = svd(&target)?;
    let r = dec.rank();
    let mut a = dec.u.clone();
    for row in 0..m {
        for c in 0..r {
            a[(row, c)] *= dec.sigma[c];
        }
    }
    let b = match &s {
        Some(s) => solve_lower_triangular(&s.s, &dec.v, true)?,
        None => dec.v.clone(),
    };
    Ok(FactorizedLayer {
        layer_id: layer_id.to_string(),
        m,
        n,
        a,
        b,
        sigma: dec.sigma,
        k: r,
        whitened: s.is_some(),
    })
}

/// Whitens (when enabled), decomposes and truncates `W` with calibration
/// activations `X` (`n × d`) and compute budget `k`.
pub fn factorize_layer(
    layer_id: &str,
    w: &Matrix,
    x: &Matrix,
    cfg: &CompressionConfig,
    k: usize,
) -> Result<FactorizedLayer> {
    cfg.validate()?;
    let r_max = w.rows().min(w.cols());
    if k == 0 || k > r_max {
        return Err(Error::Config(format!("budget {k} outside 1..={r_max}")));
    }
    let cov = if cfg.whitening {
        if x.rows() != w.cols() {
            return Err(Error::Shape("activations do not match weight".into()));
        }
        Some(covariance(x))
    } else {
        None
    };
    let full = factorize_full(layer_id, w, cov.as_ref(), cfg.jitter_scale)?;
    Ok(full.with_budget(k)?.truncate_storage(cfg.r_store(k, r_max)))
}

/// Result of the per-layer rank budget search.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetAllocation {
    pub k: Vec<usize>,
    /// Threshold on `σ²/(m+n)` (times the optional layer weight).
    pub lambda: f64,
    pub compute_params: usize,
    pub budget_params: f64,
}

/// Exponential of the entropy of the normalized spectrum.
pub fn effective_rank(sigma: &[f64]) -> f64 {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Lagrangian threshold allocation of per-layer ranks under a global ratio.
///
/// Rank `(l, i)` is retained iff its score `σ²/(m+n)` is at least `λ*`, where
/// `λ*` is located by bisection over the score-ordered candidates so that the
/// retained compute `Σ K_l (m_l + n_l)` fits `(1 − ratio) Σ m_l n_l`. Every
/// layer keeps at least one rank. `ratio == 0` keeps every rank.
pub fn allocate_budgets(
    spectra: &[Vec<f64>],
    dims: &[(usize, usize)],
    ratio: f64,
    effective_rank_weighting: bool,
) -> Result<BudgetAllocation> {
    if spectra.len() != dims.len() {
        return Err(Error::Shape("spectra and dims differ in length".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("ratio {ratio} outside [0,1)")));
    }
    for s in spectra {
        if s.is_empty() || s.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("spectrum empty or not non-increasing".into()));
        }
    }
    let dense: usize = dims.iter().map(|(m, n)| m * n).sum();
    let cost = |l: usize| dims[l].0 + dims[l].1;
    if ratio == 0.0 {
        let k: Vec<usize> = spectra.iter().map(Vec::len).collect();
        let compute = k.iter().enumerate().map(|(l, &k)| k * cost(l)).sum();
        return Ok(BudgetAllocation {
            k,
            lambda: 0.0,
            compute_params: compute,
            budget_params: dense as f64,
        });
    }
    let budget = (1.0 - ratio) * dense as f64;
    let floor: usize = (0..dims.len()).map(cost).sum();
    if floor as f64 > budget {
        return Err(Error::RatioTooAggressive);
    }
    let weights: Vec<f64> = spectra
        .iter()
        .map(|s| if effective_rank_weighting { effective_rank(s) } else { 1.0 })
        .collect();
    let score = |l: usize, i: usize| weights[l] * spectra[l][i].powi(2) / cost(l) as f64;

    let mut cand: Vec<(usize, usize)> = spectra
        .iter()
        .enumerate()
        .flat_map(|(l, s)| (1..s.len()).map(move |i| (l, i)))
        .collect();
    cand.sort_by(|&(la, ia), &(lb, ib)| {
        score(lb, ib)
            .total_cmp(&score(la, ia))
            .then(la.cmp(&lb))
            .then(ia.cmp(&ib))
    });
    let mut prefix = Vec::with_capacity(cand.len() + 1);
    prefix.push(floor);
    for &(l, _) in &cand {
        prefix.push(prefix.last().unwrap() + cost(l));
    }
    // bisection: largest prefix length whose cost fits
    let (mut lo, mut hi) = (0usize, cand.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if prefix[mid] as f64 <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let taken = lo;
    let mut k = vec![1usize; spectra.len()];
    for &(l, _) in &cand[..taken] {
        k[l] += 1;
    }
    let lambda = if taken > 0 {
        let (l, i) = cand[taken - 1];
        score(l, i)
    } else if let Some(&(l, i)) = cand.first() {
        score(l, i)
    } else {
        0.0
    };
    Ok(BudgetAllocation {
        k,
        lambda,
        compute_params: prefix[taken],
        budget_params: budget,
    })
}
