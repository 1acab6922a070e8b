//! End-to-end stages over one run directory, driven by a TOML [`RunConfig`].
//!
//! Layout of a run directory:
//!
//! ```text
//! corpus/<kind>.bin          raw generated bytes
//! dense/                     dense checkpoint, train_log.csv
//! compressed/                factorized checkpoint, routers, router_eval.csv
//! cache/                     cache.json, embeddings.f64, selections.u32
//! eval.csv  bench.csv
//! observe/<figure>.csv       plus <figure>_summary.csv
//! stage_<name>.json          what each stage wrote, with its seeds
//! ```
//!
//! Every sub-config `seed` field (model, training, corpus domains) is
//! overwritten from the global seed, so a run is reproduced by its config
//! file and `seed` alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::checkpoint::{
    load_dense, load_factorized, load_routers, save_dense, save_factorized, save_routers, write_json, FORMAT_VERSION,
};
use crate::compress::{compress_model, connection_sensitivity, mean_nll, DenseScorer, FactorizedModel, FactorizedScorer, Routers, Routing};
use crate::corpus_gen::{generate, interleave, sample_calibration, sample_eval, DomainKind, DomainSpec};
use crate::error::{Error, Result};
use crate::exec_engine::{bench, write_bench_csv, BenchConfig, DEFAULT_PSI};
use crate::factorizer::CompressionConfig;
use crate::pattern_cache::{build_cache, decode_overlap_curve, pairwise_similarity_overlap, spearman, CacheConfig, PatternCache};
use crate::router::RouterTrainConfig;
use crate::routing::{evaluate_routers, gate_statistics, train_routers};
use crate::toy_lm::{parse_tensor_id, train_lm, window_ppl, DenseModel, LmTrainConfig, ToyLmConfig};

pub const DENSE_DIR: &str = "dense";
pub const COMPRESSED_DIR: &str = "compressed";
pub const CACHE_DIR: &str = "cache";
pub const OBSERVE_DIR: &str = "observe";

/// Reference values reported next to the desk-scale measurements.
pub const REFERENCE_SPEARMAN: f64 = 0.78;
pub const REFERENCE_DECODE_OVERLAP: f64 = 0.86;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub domains: Vec<DomainSpec>,
    /// Bytes per domain segment when interleaving the LM training stream.
    pub lm_segment: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { domains: DomainKind::ALL.iter().map(|&k| DomainSpec::new(k, 1, 40_000)).collect(), lm_segment: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub seqs_per_domain: usize,
    pub seq_len: usize,
    /// Domains to calibrate on; empty means all.
    pub domains: Vec<DomainKind>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { seqs_per_domain: 32, seq_len: 64, domains: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterStageConfig {
    pub train: RouterTrainConfig,
    /// Prompt rows pooled into the gate input; zero pools the whole sequence.
    pub route_prefix: usize,
    pub train_seqs_per_domain: usize,
    pub heldout_seqs_per_domain: usize,
    pub seq_len: usize,
}

impl Default for RouterStageConfig {
    fn default() -> Self {
        Self {
            train: RouterTrainConfig { learning_rate: 1e-2, epochs: 30, batch_size: 16, ..Default::default() },
            route_prefix: 32,
            train_seqs_per_domain: 64,
            heldout_seqs_per_domain: 32,
            seq_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheStageConfig {
    pub prompts_per_domain: usize,
    pub prompt_len: usize,
    pub min_similarity: f64,
    /// Zero means "the number of build prompts".
    pub capacity: usize,
}

impl Default for CacheStageConfig {
    fn default() -> Self {
        Self { prompts_per_domain: 16, prompt_len: 64, min_similarity: 0.0, capacity: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seqs_per_domain: usize,
    pub seq_len: usize,
    /// Window length for the per-window PPL curve.
    pub window: usize,
    pub windows: usize,
    /// Domains interleaved (one window each, in turn) into the mixed stream.
    pub stream_domains: Vec<DomainKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seqs_per_domain: 32,
            seq_len: 64,
            window: 64,
            windows: 48,
            stream_domains: vec![DomainKind::MarkovText, DomainKind::Arithmetic, DomainKind::KeyValue],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchStageConfig {
    pub batch_sizes: Vec<usize>,
    pub seq_len: usize,
    pub repeats: usize,
    pub psi: f64,
    /// Use the grouped-query launch plan; unset follows the model config.
    pub gqa: Option<bool>,
}

impl Default for BenchStageConfig {
    fn default() -> Self {
        Self { batch_sizes: vec![1, 8], seq_len: 64, repeats: 5, psi: DEFAULT_PSI, gqa: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserveConfig {
    pub decode_steps: usize,
    pub decode_prompts: usize,
    pub decode_prompt_len: usize,
    pub similarity_prompts_per_domain: usize,
    pub similarity_prompt_len: usize,
    /// Calibration sequences for each single-domain row of the grid.
    pub grid_calib_seqs: usize,
    pub sensitivity_tensors: Vec<String>,
    pub sensitivity_domains: Vec<DomainKind>,
    pub sensitivity_seqs: usize,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        Self {
            decode_steps: 60,
            decode_prompts: 8,
            decode_prompt_len: 64,
            similarity_prompts_per_domain: 10,
            similarity_prompt_len: 64,
            grid_calib_seqs: 128,
            sensitivity_tensors: vec!["blocks.0.q".into(), "blocks.2.down".into()],
            sensitivity_domains: vec![DomainKind::MarkovText, DomainKind::Arithmetic],
            sensitivity_seqs: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub out_dir: PathBuf,
    pub model: ToyLmConfig,
    pub lm_train: LmTrainConfig,
    pub corpus: CorpusConfig,
    pub compression: CompressionConfig,
    pub calibration: CalibrationConfig,
    pub router: RouterStageConfig,
    pub cache: CacheStageConfig,
    pub eval: EvalConfig,
    pub bench: BenchStageConfig,
    pub observe: ObserveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            model: ToyLmConfig {
                n_blocks: 3,
                d_model: 48,
                n_heads: 4,
                n_kv_heads: 4,
                d_ff: 128,
                max_seq: 128,
                ..Default::default()
            },
            lm_train: LmTrainConfig::default(),
            corpus: CorpusConfig::default(),
            compression: CompressionConfig::default(),
            calibration: CalibrationConfig::default(),
            router: RouterStageConfig::default(),
            cache: CacheStageConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchStageConfig::default(),
            observe: ObserveConfig::default(),
        }
    }
}

/// Seeds of the stochastic steps, at fixed offsets from the global seed.
#[derive(Clone, Copy, Debug)]
struct Seeds {
    model: u64,
    lm: u64,
    router_train: u64,
    corpus: u64,
    calibration: u64,
    router_data: u64,
    heldout: u64,
    cache: u64,
    observe: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let s = |i: u64| seed.wrapping_add(i);
        Self {
            model: s(0),
            lm: s(0),
            router_train: s(0),
            corpus: s(1),
            calibration: s(7),
            router_data: s(11),
            heldout: s(13),
            cache: s(17),
            observe: s(19),
        }
    }

    fn map(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("model".to_string(), self.model),
            ("lm_train".to_string(), self.lm),
            ("router_train".to_string(), self.router_train),
            ("corpus".to_string(), self.corpus),
            ("calibration".to_string(), self.calibration),
            ("router_data".to_string(), self.router_data),
            ("heldout".to_string(), self.heldout),
            ("cache".to_string(), self.cache),
            ("observe".to_string(), self.observe),
        ])
    }
}

impl RunConfig {
    /// Parses a config file; `out_dir` is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.out_dir.is_relative() {
            cfg.out_dir = path.parent().unwrap_or(Path::new(".")).join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.compression.validate()?;
        self.router.train.validate()?;
        CacheConfig { min_similarity: self.cache.min_similarity, ..Default::default() }.validate()?;
        if self.corpus.domains.is_empty() {
            return Err(Error::Config("corpus.domains is empty".into()));
        }
        for kind in self.calibration.domains.iter().chain(&self.eval.stream_domains).chain(&self.observe.sensitivity_domains) {
            self.domain(*kind)?;
        }
        let max = self.model.max_seq;
        let lens = [
            ("calibration.seq_len", self.calibration.seq_len),
            ("router.seq_len", self.router.seq_len),
            ("cache.prompt_len", self.cache.prompt_len),
            ("eval.seq_len", self.eval.seq_len),
            ("eval.window", self.eval.window),
            ("bench.seq_len", self.bench.seq_len),
            ("observe.similarity_prompt_len", self.observe.similarity_prompt_len),
        ];
        for (name, len) in lens {
            if len == 0 || len > max {
                return Err(Error::Config(format!("{name} = {len} outside 1..={max}")));
            }
        }
        if self.observe.decode_prompt_len == 0 || self.observe.decode_prompt_len + self.observe.decode_steps > max {
            return Err(Error::Config(format!("decode prompt plus {} steps exceeds max_seq {max}", self.observe.decode_steps)));
        }
        if self.eval.stream_domains.is_empty() || self.eval.windows == 0 {
            return Err(Error::Config("eval stream needs domains and windows".into()));
        }
        if !(self.bench.psi > 0.0 && self.bench.psi <= 1.0) {
            return Err(Error::Config(format!("bench.psi {} outside (0, 1]", self.bench.psi)));
        }
        for t in &self.observe.sensitivity_tensors {
            let (b, _) = tensor_id(t)?;
            if b >= self.model.n_blocks {
                return Err(Error::Config(format!("sensitivity tensor {t} beyond the model")));
            }
        }
        Ok(())
    }

    /// Corpus domains with their seeds taken from the global seed.
    pub fn domains(&self) -> Vec<DomainSpec> {
        let seed = self.seeds().corpus;
        self.corpus.domains.iter().map(|d| DomainSpec { seed, ..*d }).collect()
    }

    fn domain(&self, kind: DomainKind) -> Result<DomainSpec> {
        self.domains()
            .into_iter()
            .find(|d| d.kind == kind)
            .ok_or_else(|| Error::Config(format!("domain {kind} is not in corpus.domains")))
    }

    fn seeds(&self) -> Seeds {
        Seeds::new(self.seed)
    }

    fn model_config(&self) -> ToyLmConfig {
        ToyLmConfig { seed: self.seeds().model, ..self.model.clone() }
    }

    fn calibration_domains(&self) -> Vec<DomainSpec> {
        if self.calibration.domains.is_empty() {
            self.domains()
        } else {
            self.domains().into_iter().filter(|d| self.calibration.domains.contains(&d.kind)).collect()
        }
    }

    pub fn dense_dir(&self) -> PathBuf {
        self.out_dir.join(DENSE_DIR)
    }

    pub fn compressed_dir(&self) -> PathBuf {
        self.out_dir.join(COMPRESSED_DIR)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.out_dir.join(CACHE_DIR)
    }

    pub fn observe_dir(&self) -> PathBuf {
        self.out_dir.join(OBSERVE_DIR)
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            min_similarity: self.cache.min_similarity,
            capacity: self.cache.capacity,
            route_prefix: self.router.route_prefix,
        }
    }

    /// Dense training stream: the first half of every domain, interleaved.
    pub fn lm_stream(&self) -> Result<Vec<u8>> {
        let streams = self.domains().iter().map(generate).collect::<Result<Vec<_>>>()?;
        let halves: Vec<&[u8]> = streams.iter().map(|s| &s[..s.len() / 2]).collect();
        Ok(interleave(&halves, self.corpus.lm_segment, 0))
    }

    pub fn calibration_seqs(&self) -> Result<Vec<Vec<u8>>> {
        let c = &self.calibration;
        let mut out = Vec::new();
        for d in self.calibration_domains() {
            out.extend(sample_calibration(&d, c.seqs_per_domain, c.seq_len, self.seeds().calibration)?);
        }
        Ok(out)
    }

    pub fn router_train_seqs(&self) -> Result<Vec<Vec<u8>>> {
        let r = &self.router;
        let mut out = Vec::new();
        for d in &self.domains() {
            out.extend(sample_calibration(d, r.train_seqs_per_domain, r.seq_len, self.seeds().router_data)?);
        }
        Ok(out)
    }

    pub fn router_heldout_seqs(&self) -> Result<Vec<Vec<u8>>> {
        let r = &self.router;
        let mut out = Vec::new();
        for d in &self.domains() {
            out.extend(sample_eval(d, r.heldout_seqs_per_domain, r.seq_len, self.seeds().heldout)?);
        }
        Ok(out)
    }

    /// Held-out evaluation sequences per domain.
    pub fn eval_seqs(&self) -> Result<Vec<(DomainKind, Vec<Vec<u8>>)>> {
        self.domains()
            .iter()
            .map(|d| Ok((d.kind, sample_eval(d, self.eval.seqs_per_domain, self.eval.seq_len, self.seeds().heldout)?)))
            .collect()
    }

    /// Mixed stream of `windows` windows, each from one domain in turn.
    pub fn window_stream(&self) -> Result<(Vec<u8>, Vec<DomainKind>)> {
        let e = &self.eval;
        let streams = e
            .stream_domains
            .iter()
            .map(|&k| generate(&self.domain(k)?))
            .collect::<Result<Vec<_>>>()?;
        let halves: Vec<&[u8]> = streams.iter().map(|s| &s[s.len() / 2..]).collect();
        let mixed = interleave(&halves, e.window, 0);
        let need = e.window * e.windows;
        if mixed.len() < need {
            return Err(Error::InsufficientData(format!("mixed stream holds {} of {need} bytes", mixed.len())));
        }
        let domains = (0..e.windows).map(|i| e.stream_domains[i % e.stream_domains.len()]).collect();
        Ok((mixed[..need].to_vec(), domains))
    }
}

fn tensor_id(id: &str) -> Result<(usize, crate::toy_lm::Projection)> {
    parse_tensor_id(id).ok_or_else(|| Error::Config(format!("bad tensor id `{id}`")))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Serialize)]
struct StageRecord<'a> {
    format_version: u32,
    stage: &'a str,
    outputs: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

fn record_stage(cfg: &RunConfig, stage: &str, outputs: &[&Path]) -> Result<()> {
    let outputs = outputs
        .iter()
        .map(|p| p.strip_prefix(&cfg.out_dir).unwrap_or(p).display().to_string())
        .collect();
    let rec = StageRecord { format_version: FORMAT_VERSION, stage, outputs, seeds: cfg.seeds().map() };
    write_json(&cfg.out_dir.join(format!("stage_{stage}.json")), &rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
}

pub fn cmd_train_dense(cfg: &RunConfig) -> Result<DenseModel> {
    cfg.validate()?;
    let corpus_dir = cfg.out_dir.join("corpus");
    fs::create_dir_all(&corpus_dir)?;
    for d in &cfg.domains() {
        fs::write(corpus_dir.join(format!("{}.bin", d.kind)), generate(d)?)?;
    }
    let stream = cfg.lm_stream()?;
    let mut model = DenseModel::init(&cfg.model_config())?;
    let train = LmTrainConfig { seed: cfg.seeds().lm, ..cfg.lm_train.clone() };
    let log = train_lm(&mut model, &stream, &train)?;
    let dir = cfg.dense_dir();
    save_dense(&dir, &model, &cfg.seeds().map())?;
    let rows: Vec<TrainLogRow> = log.losses.iter().enumerate().map(|(step, &loss)| TrainLogRow { step, loss }).collect();
    write_csv(&dir.join("train_log.csv"), &rows)?;
    record_stage(cfg, "train_dense", &[&dir, &corpus_dir])?;
    Ok(model)
}

pub fn cmd_compress(cfg: &RunConfig) -> Result<FactorizedModel> {
    cfg.validate()?;
    let (dense, _) = load_dense(&cfg.dense_dir())?;
    let fm = compress_model(&dense, &cfg.calibration_seqs()?, &cfg.compression)?;
    save_factorized(&cfg.compressed_dir(), &fm, &cfg.seeds().map())?;
    record_stage(cfg, "compress", &[&cfg.compressed_dir()])?;
    Ok(fm)
}

pub fn cmd_train_router(cfg: &RunConfig) -> Result<Routers> {
    cfg.validate()?;
    let (dense, _) = load_dense(&cfg.dense_dir())?;
    let (fm, _) = load_factorized(&cfg.compressed_dir())?;
    let prefix = cfg.router.route_prefix;
    let train_cfg = RouterTrainConfig { seed: cfg.seeds().router_train, ..cfg.router.train.clone() };
    let stats = gate_statistics(&dense, &fm, &cfg.router_train_seqs()?, prefix)?;
    let (routers, _) = train_routers(&fm, &stats, &train_cfg)?;
    let held = gate_statistics(&dense, &fm, &cfg.router_heldout_seqs()?, prefix)?;
    let report = evaluate_routers(&fm, &routers, &held)?;
    let dir = cfg.compressed_dir();
    save_routers(&dir, &fm, &routers, &train_cfg, prefix, &cfg.seeds().map())?;
    let path = dir.join("router_eval.csv");
    write_csv(&path, &report)?;
    record_stage(cfg, "train_router", &[&dir, &path])?;
    Ok(routers)
}

fn load_served(cfg: &RunConfig) -> Result<(FactorizedModel, Routers)> {
    let (fm, _) = load_factorized(&cfg.compressed_dir())?;
    let (routers, _) = load_routers(&cfg.compressed_dir(), &fm)?;
    Ok((fm, routers))
}

pub fn cache_prompts(cfg: &RunConfig) -> Result<Vec<Vec<u8>>> {
    let c = &cfg.cache;
    let mut out = Vec::new();
    for d in &cfg.domains() {
        out.extend(sample_calibration(d, c.prompts_per_domain, c.prompt_len, cfg.seeds().cache)?);
    }
    Ok(out)
}

pub fn cmd_build_cache(cfg: &RunConfig) -> Result<PatternCache> {
    cfg.validate()?;
    let (fm, routers) = load_served(cfg)?;
    let cache = build_cache(&fm, &routers, &cache_prompts(cfg)?, &cfg.cache_config())?;
    cache.save(&cfg.cache_dir(), &fm)?;
    record_stage(cfg, "build_cache", &[&cfg.cache_dir()])?;
    Ok(cache)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub domain: DomainKind,
    pub variant: String,
    pub ppl: f64,
    /// `ppl / dense_ppl − 1`.
    pub delta_ppl: f64,
}

/// Serves each sequence with the cached pattern of its nearest prompt.
struct CachedScorer<'a> {
    model: &'a FactorizedModel,
    routers: &'a Routers,
    cache: PatternCache,
}

impl crate::toy_lm::TokenScorer for CachedScorer<'_> {
    fn token_nll(&mut self, tokens: &[u8]) -> Result<Vec<f64>> {
        let (pattern, _) = self.cache.resolve(self.model, self.routers, tokens)?;
        FactorizedScorer { model: self.model, routing: Routing::Frozen { pattern: &pattern, shadow: None } }.token_nll(tokens)
    }
}

/// Dense, static, routed and (with a built cache) cached PPL per domain.
/// Routed rows need trained routers.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let (dense, _) = load_dense(&cfg.dense_dir())?;
    let (fm, _) = load_factorized(&cfg.compressed_dir())?;
    let routers = match load_routers(&cfg.compressed_dir(), &fm) {
        Ok((r, _)) => Some(r),
        Err(Error::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    let cache = match (&routers, PatternCache::load(&cfg.cache_dir(), &fm)) {
        (Some(_), Ok(c)) => Some(c),
        (_, Err(Error::MissingArtifact { .. })) | (None, Ok(_)) => None,
        (_, Err(e)) => return Err(e),
    };
    let prefix = cfg.router.route_prefix;
    let mut rows = Vec::new();
    for (domain, seqs) in cfg.eval_seqs()? {
        let base = mean_nll(&mut DenseScorer(&dense), &seqs)?.exp();
        let mut push = |variant: &str, ppl: f64| {
            rows.push(EvalRow { domain, variant: variant.into(), ppl, delta_ppl: ppl / base - 1.0 });
        };
        push("dense", base);
        push("static", mean_nll(&mut FactorizedScorer { model: &fm, routing: Routing::Static }, &seqs)?.exp());
        if let Some(r) = &routers {
            let mut routed = FactorizedScorer { model: &fm, routing: Routing::Online { routers: r, prefix } };
            push("routed", mean_nll(&mut routed, &seqs)?.exp());
            if let Some(c) = &cache {
                let mut scorer = CachedScorer { model: &fm, routers: r, cache: c.clone() };
                push("cached", mean_nll(&mut scorer, &seqs)?.exp());
            }
        }
    }
    let path = cfg.out_dir.join("eval.csv");
    write_csv(&path, &rows)?;
    record_stage(cfg, "eval", &[&path])?;
    Ok(rows)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<crate::exec_engine::BenchRow>> {
    cfg.validate()?;
    let (fm, _) = load_factorized(&cfg.compressed_dir())?;
    let cache = PatternCache::load(&cfg.cache_dir(), &fm)?;
    let patterns = cache.entries.iter().map(|e| e.pattern.clone()).collect();
    let (_, seqs) = cfg.eval_seqs()?.swap_remove(0);
    let prompt: Vec<u8> = seqs.concat();
    let b = &cfg.bench;
    let bench_cfg = BenchConfig {
        batch_sizes: b.batch_sizes.clone(),
        seq_len: b.seq_len,
        repeats: b.repeats,
        gqa: b.gqa.unwrap_or(fm.skeleton.cfg.gqa()),
    };
    let rows = bench(&fm, patterns, b.psi, &prompt, &bench_cfg)?;
    let path = cfg.out_dir.join("bench.csv");
    write_bench_csv(&path, &rows)?;
    record_stage(cfg, "bench", &[&path])?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    PplWindows,
    CalibGrid,
    Sensitivity,
    SimilarityOverlap,
    DecodeOverlap,
}

impl Figure {
    pub const ALL: [Figure; 5] =
        [Figure::PplWindows, Figure::CalibGrid, Figure::Sensitivity, Figure::SimilarityOverlap, Figure::DecodeOverlap];

    pub fn name(self) -> &'static str {
        match self {
            Figure::PplWindows => "ppl_windows",
            Figure::CalibGrid => "calib_grid",
            Figure::Sensitivity => "sensitivity",
            Figure::SimilarityOverlap => "similarity_overlap",
            Figure::DecodeOverlap => "decode_overlap",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown figure `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window: usize,
    pub domain: DomainKind,
    pub dense: f64,
    pub static_ppl: f64,
    pub routed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSummaryRow {
    pub model: String,
    pub max_over_median: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub calib_domain: DomainKind,
    pub eval_domain: DomainKind,
    pub mode: String,
    pub ppl: f64,
    pub delta_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummaryRow {
    pub calib_domain: DomainKind,
    pub mode: String,
    pub diagonal_delta: f64,
    pub mean_offdiag_delta: f64,
    pub worst_offdiag_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub tensor_id: String,
    pub expert: usize,
    pub sigma: f64,
    pub domain: DomainKind,
    pub delta_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummaryRow {
    pub tensor_id: String,
    pub domain_a: DomainKind,
    pub domain_b: DomainKind,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub i: usize,
    pub j: usize,
    pub domain_i: DomainKind,
    pub domain_j: DomainKind,
    pub cosine: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummaryRow {
    pub pairs: usize,
    pub spearman: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub prompt: usize,
    pub domain: DomainKind,
    pub step: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummaryRow {
    pub prompts: usize,
    pub steps: usize,
    pub mean_overlap: f64,
    pub min_step_mean: f64,
    pub reference: f64,
}

fn max_over_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let median = if s.len() % 2 == 1 { s[s.len() / 2] } else { 0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2]) };
    s[s.len() - 1] / median
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Output files written for a figure: the per-item CSV and its summary.
pub fn figure_paths(cfg: &RunConfig, figure: Figure) -> (PathBuf, PathBuf) {
    let dir = cfg.observe_dir();
    (dir.join(format!("{figure}.csv")), dir.join(format!("{figure}_summary.csv")))
}

pub fn cmd_observe(cfg: &RunConfig, figure: Figure) -> Result<()> {
    cfg.validate()?;
    let (path, summary) = figure_paths(cfg, figure);
    match figure {
        Figure::PplWindows => observe_ppl_windows(cfg, &path, &summary)?,
        Figure::CalibGrid => observe_calib_grid(cfg, &path, &summary)?,
        Figure::Sensitivity => observe_sensitivity(cfg, &path, &summary)?,
        Figure::SimilarityOverlap => observe_similarity(cfg, &path, &summary)?,
        Figure::DecodeOverlap => observe_decode(cfg, &path, &summary)?,
    }
    record_stage(cfg, &format!("observe_{figure}"), &[&path, &summary])
}

fn observe_ppl_windows(cfg: &RunConfig, path: &Path, summary: &Path) -> Result<()> {
    let (dense, _) = load_dense(&cfg.dense_dir())?;
    let (fm, routers) = load_served(cfg)?;
    let (stream, domains) = cfg.window_stream()?;
    let w = cfg.eval.window;
    let d = window_ppl(&mut DenseScorer(&dense), &stream, w)?;
    let s = window_ppl(&mut FactorizedScorer { model: &fm, routing: Routing::Static }, &stream, w)?;
    let online = Routing::Online { routers: &routers, prefix: cfg.router.route_prefix };
    let r = window_ppl(&mut FactorizedScorer { model: &fm, routing: online }, &stream, w)?;
    let rows: Vec<WindowRow> = (0..d.len())
        .map(|i| WindowRow { window: i, domain: domains[i], dense: d[i], static_ppl: s[i], routed: r[i] })
        .collect();
    write_csv(path, &rows)?;
    let sum: Vec<WindowSummaryRow> = [("dense", &d), ("static", &s), ("routed", &r)]
        .into_iter()
        .map(|(m, v)| WindowSummaryRow { model: m.into(), max_over_median: max_over_median(v), mean: mean(v) })
        .collect();
    write_csv(summary, &sum)
}

fn observe_calib_grid(cfg: &RunConfig, path: &Path, summary: &Path) -> Result<()> {
    let (dense, _) = load_dense(&cfg.dense_dir())?;
    let evals = cfg.eval_seqs()?;
    let base: Vec<f64> = evals.iter().map(|(_, s)| Ok(mean_nll(&mut DenseScorer(&dense), s)?.exp())).collect::<Result<_>>()?;
    let train_cfg = RouterTrainConfig { seed: cfg.seeds().router_train, ..cfg.router.train.clone() };
    let prefix = cfg.router.route_prefix;
    let router_seqs = cfg.router_train_seqs()?;
    let mut rows = Vec::new();
    let mut sums = Vec::new();
    for spec in &cfg.domains() {
        let calib = sample_calibration(spec, cfg.observe.grid_calib_seqs, cfg.calibration.seq_len, cfg.seeds().calibration)?;
        let fm = compress_model(&dense, &calib, &cfg.compression)?;
        let stats = gate_statistics(&dense, &fm, &router_seqs, prefix)?;
        let (routers, _) = train_routers(&fm, &stats, &train_cfg)?;
        for (mode, routing) in [("static", Routing::Static), ("routed", Routing::Online { routers: &routers, prefix })] {
            let mut deltas = Vec::new();
            for ((domain, seqs), b) in evals.iter().zip(&base) {
                let ppl = mean_nll(&mut FactorizedScorer { model: &fm, routing }, seqs)?.exp();
                let delta_ppl = ppl / b - 1.0;
                deltas.push((*domain, delta_ppl));
                rows.push(GridRow { calib_domain: spec.kind, eval_domain: *domain, mode: mode.into(), ppl, delta_ppl });
            }
            let off: Vec<f64> = deltas.iter().filter(|(d, _)| *d != spec.kind).map(|(_, v)| *v).collect();
            sums.push(GridSummaryRow {
                calib_domain: spec.kind,
                mode: mode.into(),
                diagonal_delta: deltas.iter().find(|(d, _)| *d == spec.kind).map_or(f64::NAN, |(_, v)| *v),
                mean_offdiag_delta: mean(&off),
                worst_offdiag_delta: off.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    write_csv(path, &rows)?;
    write_csv(summary, &sums)
}

fn observe_sensitivity(cfg: &RunConfig, path: &Path, summary: &Path) -> Result<()> {
    let (dense, _) = load_dense(&cfg.dense_dir())?;
    let full = CompressionConfig { ratio: 0.0, ..cfg.compression.clone() };
    let fm = compress_model(&dense, &cfg.calibration_seqs()?, &full)?;
    let layer_set = cfg
        .observe
        .sensitivity_tensors
        .iter()
        .map(|t| tensor_id(t))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut per_domain = Vec::new();
    for &kind in &cfg.observe.sensitivity_domains {
        let seqs = sample_eval(&cfg.domain(kind)?, cfg.observe.sensitivity_seqs, cfg.eval.seq_len, cfg.seeds().observe)?;
        let imp = connection_sensitivity(&fm, &layer_set, &seqs)?;
        for (&(b, p), deltas) in layer_set.iter().zip(&imp) {
            let layer = fm.layer(b, p);
            for (expert, &delta_ce) in deltas.iter().enumerate() {
                rows.push(SensitivityRow {
                    tensor_id: layer.layer_id.clone(),
                    expert,
                    sigma: layer.sigma[expert],
                    domain: kind,
                    delta_ce,
                });
            }
        }
        per_domain.push((kind, imp));
    }
    write_csv(path, &rows)?;
    let mut sums = Vec::new();
    for i in 0..per_domain.len() {
        for j in i + 1..per_domain.len() {
            for (t, &(b, p)) in layer_set.iter().enumerate() {
                sums.push(SensitivitySummaryRow {
                    tensor_id: fm.layer(b, p).layer_id.clone(),
                    domain_a: per_domain[i].0,
                    domain_b: per_domain[j].0,
                    spearman: spearman(&per_domain[i].1[t], &per_domain[j].1[t])?,
                });
            }
        }
    }
    write_csv(summary, &sums)
}

fn observe_similarity(cfg: &RunConfig, path: &Path, summary: &Path) -> Result<()> {
    let (fm, routers) = load_served(cfg)?;
    let o = &cfg.observe;
    let mut prompts = Vec::new();
    let mut domains = Vec::new();
    for d in &cfg.domains() {
        for p in sample_eval(d, o.similarity_prompts_per_domain, o.similarity_prompt_len, cfg.seeds().observe)? {
            prompts.push(p);
            domains.push(d.kind);
        }
    }
    let cache = build_cache(&fm, &routers, &prompts, &CacheConfig { capacity: 0, ..cfg.cache_config() })?;
    let pairs = pairwise_similarity_overlap(&cache)?;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut k = 0;
    for i in 0..prompts.len() {
        for j in i + 1..prompts.len() {
            let (cosine, overlap) = pairs[k];
            k += 1;
            rows.push(PairRow { i, j, domain_i: domains[i], domain_j: domains[j], cosine, overlap });
        }
    }
    write_csv(path, &rows)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let rho = spearman(&xs, &ys)?;
    write_csv(summary, &[SimilaritySummaryRow { pairs: xs.len(), spearman: rho, reference: REFERENCE_SPEARMAN }])
}

fn observe_decode(cfg: &RunConfig, path: &Path, summary: &Path) -> Result<()> {
    let (fm, routers) = load_served(cfg)?;
    let o = &cfg.observe;
    let doms = cfg.domains();
    let mut rows = Vec::new();
    let mut per_step = vec![Vec::new(); o.decode_steps];
    for i in 0..o.decode_prompts {
        let spec = &doms[i % doms.len()];
        let prompt = sample_eval(spec, 1, o.decode_prompt_len, cfg.seeds().observe.wrapping_add(i as u64))?.remove(0);
        let curve = decode_overlap_curve(&fm, &routers, &prompt, o.decode_steps, cfg.router.route_prefix)?;
        for (step, &overlap) in curve.iter().enumerate() {
            rows.push(DecodeRow { prompt: i, domain: spec.kind, step: step + 1, overlap });
            per_step[step].push(overlap);
        }
    }
    write_csv(path, &rows)?;
    let all: Vec<f64> = rows.iter().map(|r| r.overlap).collect();
    let step_means: Vec<f64> = per_step.iter().filter(|v| !v.is_empty()).map(|v| mean(v)).collect();
    write_csv(
        summary,
        &[DecodeSummaryRow {
            prompts: o.decode_prompts,
            steps: o.decode_steps,
            mean_overlap: if all.is_empty() { f64::NAN } else { mean(&all) },
            min_step_mean: step_means.iter().cloned().fold(f64::INFINITY, f64::min),
            reference: REFERENCE_DECODE_OVERLAP,
        }],
    )
}

/// Every stage in order, then every figure.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    cmd_train_dense(cfg)?;
    cmd_compress(cfg)?;
    cmd_train_router(cfg)?;
    cmd_build_cache(cfg)?;
    cmd_eval(cfg)?;
    cmd_bench(cfg)?;
    for f in Figure::ALL {
        cmd_observe(cfg, f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig { out_dir: dir.to_path_buf(), ..Default::default() };
        cfg.model = ToyLmConfig { n_blocks: 1, d_model: 8, n_heads: 2, n_kv_heads: 1, d_ff: 12, max_seq: 48, ..Default::default() };
        cfg.lm_train = LmTrainConfig { steps: 4, batch_size: 2, seq_len: 16, ..Default::default() };
        cfg.corpus.domains.iter_mut().for_each(|d| d.size = 4000);
        cfg.calibration = CalibrationConfig { seqs_per_domain: 2, seq_len: 16, domains: vec![] };
        cfg.router = RouterStageConfig {
            train: RouterTrainConfig { epochs: 2, batch_size: 4, ..Default::default() },
            route_prefix: 8,
            train_seqs_per_domain: 3,
            heldout_seqs_per_domain: 2,
            seq_len: 16,
        };
        cfg.cache = CacheStageConfig { prompts_per_domain: 2, prompt_len: 16, ..Default::default() };
        cfg.eval = EvalConfig { seqs_per_domain: 2, seq_len: 16, window: 16, windows: 6, ..Default::default() };
        cfg.bench = BenchStageConfig { batch_sizes: vec![1, 2], seq_len: 8, repeats: 3, ..Default::default() };
        cfg.observe = ObserveConfig {
            decode_steps: 4,
            decode_prompts: 2,
            decode_prompt_len: 8,
            similarity_prompts_per_domain: 2,
            similarity_prompt_len: 16,
            grid_calib_seqs: 2,
            sensitivity_tensors: vec!["blocks.0.o".into()],
            sensitivity_seqs: 2,
            ..Default::default()
        };
        cfg
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("seed = 1\nbogus = 2\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[router]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[compression]\nratio = 1.5\n"), Err(Error::Config(_))));
        let partial = RunConfig::from_toml("seed = 9\n[compression]\nratio = 0.2\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.compression.ratio, 0.2);
        assert_eq!(partial.model, cfg.model);
    }

    #[test]
    fn out_dir_resolves_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "out_dir = \"artifacts\"\n").unwrap();
        assert_eq!(RunConfig::load(&path).unwrap().out_dir, dir.path().join("artifacts"));
        assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(Error::Config(_))));
    }

    #[test]
    fn stages_report_missing_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        assert!(matches!(cmd_compress(&cfg), Err(Error::MissingArtifact { stage: "train-dense", .. })));
        assert!(matches!(cmd_eval(&cfg), Err(Error::MissingArtifact { stage: "train-dense", .. })));
        assert!(matches!(cmd_observe(&cfg, Figure::DecodeOverlap), Err(Error::MissingArtifact { stage: "compress", .. })));
        cmd_train_dense(&cfg).unwrap();
        assert!(matches!(cmd_train_router(&cfg), Err(Error::MissingArtifact { stage: "compress", .. })));
        cmd_compress(&cfg).unwrap();
        assert!(matches!(cmd_build_cache(&cfg), Err(Error::MissingArtifact { stage: "train-router", .. })));
        assert!(matches!(cmd_bench(&cfg), Err(Error::MissingArtifact { stage: "build-cache", .. })));
        let rows = cmd_eval(&cfg).unwrap();
        assert!(rows.iter().all(|r| r.variant == "dense" || r.variant == "static"));
    }

    #[test]
    fn full_pipeline_on_a_tiny_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        run_all(&cfg).unwrap();
        let eval: Vec<EvalRow> = read_csv(&cfg.out_dir.join("eval.csv")).unwrap();
        assert_eq!(eval.len(), 4 * 4);
        for f in Figure::ALL {
            let (a, b) = figure_paths(&cfg, f);
            assert!(a.exists() && b.exists(), "{f}");
        }
        let grid: Vec<GridRow> = read_csv(&figure_paths(&cfg, Figure::CalibGrid).0).unwrap();
        assert_eq!(grid.len(), 4 * 4 * 2);
        let decode: Vec<DecodeRow> = read_csv(&figure_paths(&cfg, Figure::DecodeOverlap).0).unwrap();
        assert_eq!(decode.len(), 2 * 4);
        // Deleting downstream artifacts does not disturb upstream stages.
        fs::remove_dir_all(cfg.cache_dir()).unwrap();
        cmd_build_cache(&cfg).unwrap();
        assert!("nope".parse::<Figure>().is_err());
        assert_eq!("calib_grid".parse::<Figure>().unwrap(), Figure::CalibGrid);
    }
}
