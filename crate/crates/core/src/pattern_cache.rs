//! Prompt-keyed cache of rank patterns.
//!
//! A prompt is embedded by mean-pooling the first block's output (the raw
//! residual stream, before any norm) of the static-prefix factorized model
//! and normalizing. That embedding does not depend on routing, so it can be
//! computed before a pattern is known. Retrieval is an exact linear scan by
//! cosine similarity.

use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f64s, read_json, read_u32s, write_f64s, write_json, write_u32s, FORMAT_VERSION};
use crate::compress::{FactorizedModel, Pattern, Routers, Routing};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm2};
use crate::rank_experts::RankSelection;
use crate::toy_lm::{argmax, forward, tensor_id, KvCache, Projection, VOCAB};

pub const CACHE_MANIFEST: &str = "cache.json";
pub const EMBEDDINGS_BLOB: &str = "embeddings.f64";
pub const SELECTIONS_BLOB: &str = "selections.u32";

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    /// Unit-norm, `d_model` long.
    pub vec: Vec<f64>,
    /// Index of the prompt this came from.
    pub source: usize,
}

pub fn embed_prompt(model: &FactorizedModel, tokens: &[u8]) -> Result<PromptEmbedding> {
    if tokens.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let out = model.run(Routing::Static, &[tokens.to_vec()], true)?;
    let mut vec = out.block_outputs[0].column_means();
    let norm = norm2(&vec);
    if !(norm >= 1e-12) {
        return Err(Error::DegenerateEmbedding);
    }
    vec.iter_mut().for_each(|v| *v /= norm);
    Ok(PromptEmbedding { vec, source: 0 })
}

pub fn cosine(a: &PromptEmbedding, b: &PromptEmbedding) -> f64 {
    dot(&a.vec, &b.vec)
}

/// `|a ∩ b| / K`.
pub fn overlap(a: &RankSelection, b: &RankSelection) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::MismatchedK(a.k(), b.k()));
    }
    let shared = a.indices().iter().filter(|&&i| b.contains(i)).count();
    Ok(shared as f64 / a.k() as f64)
}

/// Mean selection overlap across every matrix of two patterns.
pub fn pattern_overlap(a: &Pattern, b: &Pattern) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((_, _, sa), (_, _, sb)) in a.iter().zip(b.iter()) {
        total += overlap(sa, sb)?;
        count += 1;
    }
    if count == 0 || a.0.len() != b.0.len() {
        return Err(Error::Shape("patterns cover different matrices".into()));
    }
    Ok(total / count as f64)
}

/// The pattern a prompt gets under online routing.
pub fn route_prompt(model: &FactorizedModel, routers: &Routers, tokens: &[u8], route_prefix: usize) -> Result<Pattern> {
    let mut proj = model.projector::<f64>(Routing::Online { routers, prefix: route_prefix });
    let mut cache = KvCache::new(&model.skeleton.cfg, 1);
    forward(&model.skeleton, &mut proj, &[tokens.to_vec()], &mut cache, false)?;
    proj.last_pattern(0).ok_or(Error::Empty("routing events"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    /// Retrieval floor; below it a lookup is a miss.
    pub min_similarity: f64,
    /// Maximum entries; zero means "the number of build prompts".
    pub capacity: usize,
    /// Prefill rows pooled into the gate input (zero pools the whole prompt).
    pub route_prefix: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { min_similarity: 0.0, capacity: 0, route_prefix: 32 }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.min_similarity) {
            return Err(Error::Config(format!("min_similarity {} outside [-1, 1]", self.min_similarity)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub embedding: PromptEmbedding,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternCache {
    pub entries: Vec<CacheEntry>,
    pub min_similarity: f64,
    pub capacity: usize,
    pub route_prefix: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<'a> {
    pub index: usize,
    pub pattern: &'a Pattern,
    pub similarity: f64,
    pub hit: bool,
}

pub fn build_cache(
    model: &FactorizedModel,
    routers: &Routers,
    prompts: &[Vec<u8>],
    cfg: &CacheConfig,
) -> Result<PatternCache> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Empty("cache prompts"));
    }
    let capacity = if cfg.capacity == 0 { prompts.len() } else { cfg.capacity };
    if capacity < prompts.len() {
        return Err(Error::Config(format!("{} prompts exceed capacity {capacity}", prompts.len())));
    }
    let entries = prompts
        .iter()
        .enumerate()
        .map(|(source, p)| {
            let embedding = PromptEmbedding { source, ..embed_prompt(model, p)? };
            let pattern = route_prompt(model, routers, p, cfg.route_prefix)?;
            Ok(CacheEntry { embedding, pattern })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternCache { entries, min_similarity: cfg.min_similarity, capacity, route_prefix: cfg.route_prefix })
}

impl PatternCache {
    /// Nearest entry by cosine; ties go to the earliest entry.
    pub fn retrieve(&self, emb: &PromptEmbedding) -> Result<Retrieval<'_>> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let s = cosine(&e.embedding, emb);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (index, similarity) = best.ok_or(Error::EmptyCache)?;
        Ok(Retrieval {
            index,
            pattern: &self.entries[index].pattern,
            similarity,
            hit: similarity >= self.min_similarity,
        })
    }

    /// Adds an entry if there is room; there is no eviction.
    pub fn insert(&mut self, embedding: PromptEmbedding, pattern: Pattern) -> bool {
        if self.entries.len() >= self.capacity {
            return false;
        }
        self.entries.push(CacheEntry { embedding, pattern });
        true
    }

    /// The pattern to serve `prompt` with: the cached one on a hit, a freshly
    /// routed one (inserted when capacity allows) on a miss.
    pub fn resolve(&mut self, model: &FactorizedModel, routers: &Routers, prompt: &[u8]) -> Result<(Pattern, bool)> {
        let emb = embed_prompt(model, prompt)?;
        if !self.entries.is_empty() {
            let r = self.retrieve(&emb)?;
            if r.hit {
                return Ok((r.pattern.clone(), true));
            }
        }
        let pattern = route_prompt(model, routers, prompt, self.route_prefix)?;
        let source = self.entries.len();
        self.insert(PromptEmbedding { source, ..emb }, pattern.clone());
        Ok((pattern, false))
    }

    pub fn save(&self, dir: &Path, model: &FactorizedModel) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let d_model = model.skeleton.cfg.d_model;
        let mut emb = Vec::with_capacity(self.entries.len() * d_model);
        let mut sel = Vec::new();
        for e in &self.entries {
            e.pattern.check(model)?;
            emb.extend_from_slice(&e.embedding.vec);
            for (_, _, s) in e.pattern.iter() {
                sel.extend(s.indices().iter().map(|&i| i as u32));
            }
        }
        write_f64s(&dir.join(EMBEDDINGS_BLOB), &emb)?;
        write_u32s(&dir.join(SELECTIONS_BLOB), &sel)?;
        let manifest = CacheManifest {
            format_version: FORMAT_VERSION,
            entries: self.entries.len(),
            d_model,
            min_similarity: self.min_similarity,
            capacity: self.capacity,
            route_prefix: self.route_prefix,
            sources: self.entries.iter().map(|e| e.embedding.source).collect(),
            tensors: model.layers_flat().map(|(b, p, l)| CacheTensor { id: tensor_id(b, p), k: l.k }).collect(),
        };
        write_json(&dir.join(CACHE_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path, model: &FactorizedModel) -> Result<Self> {
        let path = dir.join(CACHE_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "build-cache", path });
        }
        let m: CacheManifest = read_json(&path)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported cache format {}", m.format_version)));
        }
        if m.d_model != model.skeleton.cfg.d_model || m.sources.len() != m.entries {
            return Err(Error::Checkpoint("cache manifest does not match the model".into()));
        }
        let expected: Vec<CacheTensor> =
            model.layers_flat().map(|(b, p, l)| CacheTensor { id: tensor_id(b, p), k: l.k }).collect();
        if m.tensors != expected {
            return Err(Error::Checkpoint("cache tensors do not match the model".into()));
        }
        let emb = read_f64s(&dir.join(EMBEDDINGS_BLOB), m.entries * m.d_model)?;
        let sel = read_u32s(&dir.join(SELECTIONS_BLOB))?;
        let per_entry: usize = expected.iter().map(|t| t.k).sum();
        if sel.len() != per_entry * m.entries {
            return Err(Error::Checkpoint(format!("{SELECTIONS_BLOB} holds {} indices", sel.len())));
        }
        let n_blocks = model.layers.len();
        let mut entries = Vec::with_capacity(m.entries);
        let mut cursor = 0;
        for (e, &source) in m.sources.iter().enumerate() {
            let mut rows = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let mut row = Vec::with_capacity(7);
                for p in Projection::ALL {
                    let k = model.layer(b, p).k;
                    let idx = sel[cursor..cursor + k].iter().map(|&i| i as usize).collect();
                    cursor += k;
                    row.push(RankSelection::new(idx)?);
                }
                rows.push(row);
            }
            let pattern = Pattern(rows);
            pattern.check(model)?;
            let vec = emb[e * m.d_model..(e + 1) * m.d_model].to_vec();
            entries.push(CacheEntry { embedding: PromptEmbedding { vec, source }, pattern });
        }
        Ok(Self { entries, min_similarity: m.min_similarity, capacity: m.capacity, route_prefix: m.route_prefix })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheTensor {
    id: String,
    k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheManifest {
    format_version: u32,
    entries: usize,
    d_model: usize,
    min_similarity: f64,
    capacity: usize,
    route_prefix: usize,
    sources: Vec<usize>,
    tensors: Vec<CacheTensor>,
}

/// Decoding settings; `temperature == 0` is greedy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateConfig {
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u8>,
    /// One `1 × VOCAB` row per generated token.
    pub logits: Vec<Vec<f64>>,
    /// Mean overlap of the shadow-routed selections with the served pattern
    /// at each decode step (empty without shadow routers).
    pub overlap_curve: Vec<f64>,
}

fn pick(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<u8> {
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng) as u8)
}

/// Prefills `prompt` and decodes `cfg.steps` tokens with `pattern` frozen.
/// With `shadow`, routers are rerun on each decode step's activations for
/// measurement only.
pub fn generate_frozen(
    model: &FactorizedModel,
    pattern: &Pattern,
    shadow: Option<&Routers>,
    prompt: &[u8],
    cfg: &GenerateConfig,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if !(cfg.temperature >= 0.0) {
        return Err(Error::Config("temperature must be non-negative".into()));
    }
    pattern.check(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut proj = model.projector::<f64>(Routing::Frozen { pattern, shadow });
    let mut cache = KvCache::new(&model.skeleton.cfg, 1);
    let mut out = forward(&model.skeleton, &mut proj, &[prompt.to_vec()], &mut cache, false)?;
    let mut gen = Generation { tokens: Vec::new(), logits: Vec::new(), overlap_curve: Vec::new() };
    for _ in 0..cfg.steps {
        let last = out.logits.row(out.logits.rows() - 1).to_vec();
        let tok = pick(&last, cfg.temperature, &mut rng)?;
        gen.tokens.push(tok);
        gen.logits.push(last);
        proj.events.clear();
        out = forward(&model.skeleton, &mut proj, &[vec![tok]], &mut cache, false)?;
        if shadow.is_some() {
            let seen = proj.last_pattern(0).ok_or(Error::Empty("shadow events"))?;
            gen.overlap_curve.push(pattern_overlap(pattern, &seen)?);
        }
    }
    debug_assert!(gen.logits.iter().all(|l| l.len() == VOCAB));
    Ok(gen)
}

/// Overlap between the prefill-routed pattern and the selections the routers
/// would make at each of `steps` greedy decode steps, serving the prefill
/// pattern throughout.
pub fn decode_overlap_curve(
    model: &FactorizedModel,
    routers: &Routers,
    prompt: &[u8],
    steps: usize,
    route_prefix: usize,
) -> Result<Vec<f64>> {
    let pattern = route_prompt(model, routers, prompt, route_prefix)?;
    let cfg = GenerateConfig { steps, temperature: 0.0, seed: 0 };
    Ok(generate_frozen(model, &pattern, Some(routers), prompt, &cfg)?.overlap_curve)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation. A constant input gives 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("spearman over {} and {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!("spearman needs 3 pairs, got {}", xs.len())));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// `(cosine, pattern overlap)` for every unordered pair of cache entries.
pub fn pairwise_similarity_overlap(cache: &PatternCache) -> Result<Vec<(f64, f64)>> {
    let e = &cache.entries;
    let mut out = Vec::with_capacity(e.len() * e.len().saturating_sub(1) / 2);
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            out.push((cosine(&e[i].embedding, &e[j].embedding), pattern_overlap(&e[i].pattern, &e[j].pattern)?));
        }
    }
    Ok(out)
}
