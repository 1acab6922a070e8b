//! Checkpoint directories: a `manifest.json` plus one little-endian row-major
//! `<tensor_id>.f64` blob per tensor. Routers live beside the factorized
//! model as `router_<tensor_id>.f64` / `router_<tensor_id>.bias.f64` with
//! their own `routers.json`, so they can be deleted without touching the
//! compressed model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::compress::{FactorizedModel, Routers};
use crate::error::{Error, Result};
use crate::factorizer::{BudgetAllocation, CompressionConfig, FactorizedLayer};
use crate::numerics::Matrix;
use crate::router::{RouterParams, RouterTrainConfig};
use crate::toy_lm::{tensor_id, DenseBlock, DenseModel, Projection, ToyLmConfig, VOCAB};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const ROUTER_MANIFEST: &str = "routers.json";

pub fn write_f64s(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn write_u32s(path: &Path, data: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("{} is not a u32 array", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub id: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub id: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub r_store: usize,
    pub whitened: bool,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `dense` or `factorized`.
    pub kind: String,
    pub model: ToyLmConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<CompressionConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matrices: Vec<MatrixEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_params: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
}

struct BlobWriter<'a> {
    dir: &'a Path,
    entries: Vec<TensorEntry>,
}

impl BlobWriter<'_> {
    fn put(&mut self, id: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        write_f64s(&self.dir.join(format!("{id}.f64")), data)?;
        self.entries.push(TensorEntry { id: id.to_string(), shape: [rows, cols] });
        Ok(())
    }
    fn mat(&mut self, id: &str, m: &Matrix) -> Result<()> {
        self.put(id, m.rows(), m.cols(), m.data())
    }
    fn vec(&mut self, id: &str, v: &[f64]) -> Result<()> {
        self.put(id, 1, v.len(), v)
    }
}

struct BlobReader<'a> {
    dir: &'a Path,
    shapes: BTreeMap<&'a str, [usize; 2]>,
}

impl<'a> BlobReader<'a> {
    fn new(dir: &'a Path, m: &'a Manifest) -> Self {
        Self { dir, shapes: m.tensors.iter().map(|t| (t.id.as_str(), t.shape)).collect() }
    }
    fn mat(&self, id: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let shape = self.shapes.get(id).ok_or_else(|| Error::Checkpoint(format!("manifest lacks {id}")))?;
        if *shape != [rows, cols] {
            return Err(Error::Checkpoint(format!("{id} has shape {shape:?}, expected [{rows}, {cols}]")));
        }
        Matrix::from_vec(rows, cols, read_f64s(&self.dir.join(format!("{id}.f64")), rows * cols)?)
    }
    fn vec(&self, id: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.mat(id, 1, len)?.into_data())
    }
}

fn require(dir: &Path, stage: &'static str) -> Result<PathBuf> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact { stage, path });
    }
    Ok(path)
}

fn write_skeleton_parts(
    w: &mut BlobWriter<'_>,
    embed: &Matrix,
    norms: &[(String, &Vec<f64>)],
    lm_head: &Matrix,
) -> Result<()> {
    w.mat("embed", embed)?;
    for (id, v) in norms {
        w.vec(id, v)?;
    }
    w.mat("lm_head", lm_head)
}

pub fn save_dense(dir: &Path, model: &DenseModel, seeds: &BTreeMap<String, u64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BlobWriter { dir, entries: Vec::new() };
    write_skeleton_parts(&mut w, &model.embed, &model.norm_vectors(), &model.lm_head)?;
    for (l, b) in model.blocks.iter().enumerate() {
        for p in Projection::ALL {
            w.mat(&tensor_id(l, p), b.weight(p))?;
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "dense".into(),
        model: model.cfg.clone(),
        tensors: w.entries,
        compression: None,
        matrices: Vec::new(),
        lambda: None,
        compute_params: None,
        budget_params: None,
        seeds: seeds.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn load_manifest(dir: &Path, stage: &'static str, kind: &str) -> Result<Manifest> {
    let m: Manifest = read_json(&require(dir, stage)?)?;
    if m.format_version != FORMAT_VERSION || m.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} is a {} v{} checkpoint, expected {kind} v{FORMAT_VERSION}",
            dir.display(),
            m.kind,
            m.format_version
        )));
    }
    m.model.validate()?;
    Ok(m)
}

fn read_norms(r: &BlobReader<'_>, cfg: &ToyLmConfig) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, Vec<f64>)> {
    let d = cfg.d_model;
    let blocks = (0..cfg.n_blocks)
        .map(|l| Ok((r.vec(&format!("blocks.{l}.attn_norm"), d)?, r.vec(&format!("blocks.{l}.mlp_norm"), d)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((blocks, r.vec("final_norm", d)?))
}

pub fn load_dense(dir: &Path) -> Result<(DenseModel, Manifest)> {
    let m = load_manifest(dir, "train-dense", "dense")?;
    let cfg = m.model.clone();
    let r = BlobReader::new(dir, &m);
    let (norms, final_norm) = read_norms(&r, &cfg)?;
    let blocks = norms
        .into_iter()
        .enumerate()
        .map(|(l, (attn_norm, mlp_norm))| {
            let proj = Projection::ALL
                .iter()
                .map(|&p| {
                    let (rows, cols) = cfg.dims(p);
                    r.mat(&tensor_id(l, p), rows, cols)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DenseBlock { attn_norm, mlp_norm, proj })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = DenseModel {
        embed: r.mat("embed", VOCAB, cfg.d_model)?,
        lm_head: r.mat("lm_head", VOCAB, cfg.d_model)?,
        blocks,
        final_norm,
        cfg,
    };
    Ok((model, m))
}

pub fn save_factorized(dir: &Path, model: &FactorizedModel, seeds: &BTreeMap<String, u64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sk = &model.skeleton;
    let mut norms = Vec::new();
    for l in 0..sk.cfg.n_blocks {
        norms.push((format!("blocks.{l}.attn_norm"), &sk.attn_norms[l]));
        norms.push((format!("blocks.{l}.mlp_norm"), &sk.mlp_norms[l]));
    }
    norms.push(("final_norm".to_string(), &sk.final_norm));
    let mut w = BlobWriter { dir, entries: Vec::new() };
    write_skeleton_parts(&mut w, &sk.embed, &norms, &sk.lm_head_t.transpose())?;
    let mut matrices = Vec::new();
    for (_, _, l) in model.layers_flat() {
        w.mat(&format!("{}.A", l.layer_id), &l.a)?;
        w.mat(&format!("{}.B", l.layer_id), &l.b)?;
        matrices.push(MatrixEntry {
            id: l.layer_id.clone(),
            m: l.m,
            n: l.n,
            k: l.k,
            r_store: l.r_store(),
            whitened: l.whitened,
            sigma: l.sigma.clone(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "factorized".into(),
        model: sk.cfg.clone(),
        tensors: w.entries,
        compression: Some(model.compression.clone()),
        matrices,
        lambda: Some(model.allocation.lambda),
        compute_params: Some(model.allocation.compute_params),
        budget_params: Some(model.allocation.budget_params),
        seeds: seeds.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_factorized(dir: &Path) -> Result<(FactorizedModel, Manifest)> {
    let m = load_manifest(dir, "compress", "factorized")?;
    let cfg = m.model.clone();
    let r = BlobReader::new(dir, &m);
    let (norms, final_norm) = read_norms(&r, &cfg)?;
    let entries: BTreeMap<&str, &MatrixEntry> = m.matrices.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut layers = Vec::with_capacity(cfg.n_blocks);
    let mut ks = Vec::new();
    for l in 0..cfg.n_blocks {
        let mut row = Vec::with_capacity(7);
        for p in Projection::ALL {
            let id = tensor_id(l, p);
            let e = entries.get(id.as_str()).ok_or_else(|| Error::Checkpoint(format!("manifest lacks {id}")))?;
            if (e.m, e.n) != cfg.dims(p) || e.sigma.len() != e.r_store || e.k == 0 || e.k > e.r_store {
                return Err(Error::Checkpoint(format!("inconsistent entry for {id}")));
            }
            ks.push(e.k);
            row.push(FactorizedLayer {
                layer_id: id.clone(),
                m: e.m,
                n: e.n,
                a: r.mat(&format!("{id}.A"), e.m, e.r_store)?,
                b: r.mat(&format!("{id}.B"), e.n, e.r_store)?,
                sigma: e.sigma.clone(),
                k: e.k,
                whitened: e.whitened,
            });
        }
        layers.push(row);
    }
    let dense_like = DenseModel {
        cfg: cfg.clone(),
        embed: r.mat("embed", VOCAB, cfg.d_model)?,
        blocks: norms
            .into_iter()
            .map(|(attn_norm, mlp_norm)| DenseBlock { attn_norm, mlp_norm, proj: Vec::new() })
            .collect(),
        final_norm,
        lm_head: r.mat("lm_head", VOCAB, cfg.d_model)?,
    };
    let compression = m.compression.clone().ok_or_else(|| Error::Checkpoint("missing compression config".into()))?;
    let allocation = BudgetAllocation {
        k: ks,
        lambda: m.lambda.unwrap_or(0.0),
        compute_params: m.compute_params.unwrap_or(0),
        budget_params: m.budget_params.unwrap_or(0.0),
    };
    Ok((FactorizedModel { skeleton: dense_like.skeleton(), layers, compression, allocation }, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterEntry {
    pub id: String,
    pub experts: usize,
    pub n: usize,
    pub k: usize,
    pub tau: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterManifest {
    pub format_version: u32,
    pub train: RouterTrainConfig,
    pub route_prefix: usize,
    pub routers: Vec<RouterEntry>,
    pub seeds: BTreeMap<String, u64>,
}

pub fn save_routers(
    dir: &Path,
    model: &FactorizedModel,
    routers: &Routers,
    train: &RouterTrainConfig,
    route_prefix: usize,
    seeds: &BTreeMap<String, u64>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (b, p, layer) in model.layers_flat() {
        let r = routers.get(b, p);
        write_f64s(&dir.join(format!("router_{}.f64", layer.layer_id)), r.theta.data())?;
        write_f64s(&dir.join(format!("router_{}.bias.f64", layer.layer_id)), &r.bias)?;
        entries.push(RouterEntry {
            id: layer.layer_id.clone(),
            experts: r.experts(),
            n: r.theta.cols(),
            k: layer.k,
            tau: r.tau,
            eps: r.eps,
        });
    }
    let manifest = RouterManifest {
        format_version: FORMAT_VERSION,
        train: train.clone(),
        route_prefix,
        routers: entries,
        seeds: seeds.clone(),
    };
    write_json(&dir.join(ROUTER_MANIFEST), &manifest)
}

pub fn load_routers(dir: &Path, model: &FactorizedModel) -> Result<(Routers, RouterManifest)> {
    let path = dir.join(ROUTER_MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact { stage: "train-router", path });
    }
    let m: RouterManifest = read_json(&path)?;
    let entries: BTreeMap<&str, &RouterEntry> = m.routers.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut rows = vec![Vec::with_capacity(7); model.layers.len()];
    for (b, _, layer) in model.layers_flat() {
        let id = layer.layer_id.as_str();
        let e = entries.get(id).ok_or_else(|| Error::Checkpoint(format!("no router for {id}")))?;
        if e.experts != layer.r_store() || e.n != layer.n || e.k != layer.k {
            return Err(Error::Checkpoint(format!("router for {id} does not match the compressed model")));
        }
        let theta = Matrix::from_vec(e.experts, e.n, read_f64s(&dir.join(format!("router_{id}.f64")), e.experts * e.n)?)?;
        let bias = read_f64s(&dir.join(format!("router_{id}.bias.f64")), e.experts)?;
        let params = RouterParams { theta, bias, tau: e.tau, eps: e.eps };
        params.validate()?;
        rows[b].push(params);
    }
    Ok((Routers(rows), m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::compress_model;

    fn tiny() -> DenseModel {
        DenseModel::init(&ToyLmConfig {
            n_blocks: 1,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 12,
            max_seq: 32,
            rope_base: 10_000.0,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn dense_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny();
        let seeds = BTreeMap::from([("model".to_string(), 5)]);
        save_dense(dir.path(), &m, &seeds).unwrap();
        let (back, manifest) = load_dense(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.seeds, seeds);
    }

    #[test]
    fn factorized_and_router_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dense = tiny();
        let calib = vec![b"round trip calibration text".to_vec(), b"another calibration sample".to_vec()];
        let cfg = CompressionConfig { ratio: 0.2, ..Default::default() };
        let fm = compress_model(&dense, &calib, &cfg).unwrap();
        save_factorized(dir.path(), &fm, &BTreeMap::new()).unwrap();
        let (back, _) = load_factorized(dir.path()).unwrap();
        assert_eq!(back, fm);

        assert!(matches!(load_routers(dir.path(), &fm), Err(Error::MissingArtifact { stage: "train-router", .. })));
        let routers = Routers(
            fm.layers
                .iter()
                .map(|ls| {
                    ls.iter()
                        .map(|l| RouterParams {
                            theta: Matrix::from_fn(l.r_store(), l.n, |i, j| (i as f64) - 0.5 * j as f64),
                            ..RouterParams::zeros(l.r_store(), l.n)
                        })
                        .collect()
                })
                .collect(),
        );
        save_routers(dir.path(), &fm, &routers, &RouterTrainConfig::default(), 16, &BTreeMap::new()).unwrap();
        let (rback, rm) = load_routers(dir.path(), &fm).unwrap();
        assert_eq!(rback, routers);
        assert_eq!(rm.route_prefix, 16);
    }

    #[test]
    fn missing_and_truncated_blobs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dense(dir.path()), Err(Error::MissingArtifact { stage: "train-dense", .. })));
        save_dense(dir.path(), &tiny(), &BTreeMap::new()).unwrap();
        fs::write(dir.path().join("embed.f64"), [0u8; 12]).unwrap();
        assert!(matches!(load_dense(dir.path()), Err(Error::Checkpoint(_))));
    }
}
