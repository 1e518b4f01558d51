//! Versioned model container: an 8-byte magic, a little-endian u32 version,
//! a little-endian u64 header length, a JSON header (tree structure,
//! hyperparameters, adaptation history, shapes), then all large numeric
//! state as little-endian f64 blocks in a fixed order:
//!
//! ```text
//! per node:      mu[D]  basis[D·d, column-major]  singular_values[d]
//! per snapshot:  membership[n] (as f64)  sigma2[L+1]
//!                stop[nodes]  right[nodes]  weights[nodes]
//!                per node: u[d]  tau[d]  retained[d] (1/0)
//!                          last_ratio[d] (−1 where retained)
//! ```
//!
//! Writing is deterministic, so save → load → save is byte-identical.

use std::io::{Read as _, Write as _};
use std::path::Path;

use geode::dict::{MultiscaleDictionary, NodeDictionary};
use geode::gibbs::{AdaptationEvent, PosteriorDraws, Snapshot};
use geode::model::DeletedDim;
use geode::{ClusterTree, FittedModel, Hyperparams, NodeParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

const MAGIC: &[u8; 8] = b"GEODEMDL";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    d: usize,
    n_obs: usize,
    n_nodes: usize,
    n_scales: usize,
    n_snapshots: usize,
    hyper: Hyperparams,
    tree: ClusterTree,
    adaptation: Vec<AdaptationEvent>,
}

struct BlockWriter {
    buf: Vec<u8>,
}

impl BlockWriter {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn put(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn put_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.put(v);
        }
    }
}

struct BlockReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlockReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self) -> std::result::Result<f64, String> {
        let end = self.pos + 8;
        if end > self.buf.len() {
            return Err("numeric section truncated".into());
        }
        let v = f64::from_le_bytes(self.buf[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn take_vec(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.take()).collect()
    }

    fn exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serializes a fitted model to bytes.
pub fn model_to_bytes(model: &FittedModel) -> Result<Vec<u8>> {
    let dim = model.dict.dim;
    let d = model.dict.d;
    let n_nodes = model.tree.node_count();
    let n_scales = model.tree.depth() + 1;
    let header = ModelHeader {
        dim,
        d,
        n_obs: model.draws.n_obs,
        n_nodes,
        n_scales,
        n_snapshots: model.draws.snapshots.len(),
        hyper: model.hyper.clone(),
        tree: model.tree.clone(),
        adaptation: model.draws.adaptation.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CliError::Data(format!("header serialization failed: {e}")))?;

    let mut blocks = BlockWriter::new();
    for node in model.dict.nodes() {
        blocks.put_slice(node.mu.as_slice());
        blocks.put_slice(node.basis.as_slice());
        blocks.put_slice(node.singular_values.as_slice());
    }
    for snap in &model.draws.snapshots {
        for &m in &snap.membership {
            blocks.put(m as f64);
        }
        blocks.put_slice(&snap.sigma2);
        blocks.put_slice(&snap.stop);
        blocks.put_slice(&snap.right);
        blocks.put_slice(&snap.weights);
        for params in &snap.node_params {
            blocks.put_slice(&params.u);
            blocks.put_slice(&params.tau);
            let mut retained = vec![0.0; d];
            for &m in &params.retained {
                retained[m] = 1.0;
            }
            blocks.put_slice(&retained);
            let mut ratio = vec![-1.0; d];
            for dd in &params.deleted {
                ratio[dd.dim] = dd.last_ratio;
            }
            blocks.put_slice(&ratio);
        }
    }

    let mut out = Vec::with_capacity(8 + 4 + 8 + header_json.len() + blocks.buf.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blocks.buf);
    Ok(out)
}

/// Reconstructs a fitted model from bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<FittedModel> {
    parse_model(bytes).map_err(CliError::Data)
}

fn parse_model(bytes: &[u8]) -> std::result::Result<FittedModel, String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err("not a model file (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported model version {version}"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err("header truncated".into());
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| format!("header parse failed: {e}"))?;
    let ModelHeader {
        dim,
        d,
        n_obs,
        n_nodes,
        n_scales,
        n_snapshots,
        hyper,
        tree,
        adaptation,
    } = header;
    if tree.node_count() != n_nodes || tree.depth() + 1 != n_scales {
        return Err("tree shape disagrees with header counts".into());
    }

    let mut r = BlockReader::new(&bytes[header_end..]);
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let mu = DVector::from_vec(r.take_vec(dim)?);
        let basis = DMatrix::from_vec(dim, d, r.take_vec(dim * d)?);
        let singular_values = DVector::from_vec(r.take_vec(d)?);
        nodes.push(NodeDictionary {
            mu,
            basis,
            singular_values,
        });
    }
    let dict = MultiscaleDictionary::new(nodes, dim, d);

    let mut snapshots = Vec::with_capacity(n_snapshots);
    for _ in 0..n_snapshots {
        let membership: Vec<usize> = r
            .take_vec(n_obs)?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        if membership.iter().any(|&m| m >= n_nodes) {
            return Err("membership index out of range".into());
        }
        let sigma2 = r.take_vec(n_scales)?;
        let stop = r.take_vec(n_nodes)?;
        let right = r.take_vec(n_nodes)?;
        let weights = r.take_vec(n_nodes)?;
        let mut node_params = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let u = r.take_vec(d)?;
            let tau = r.take_vec(d)?;
            let flags = r.take_vec(d)?;
            let ratio = r.take_vec(d)?;
            let retained: Vec<usize> = (0..d).filter(|&m| flags[m] == 1.0).collect();
            let deleted: Vec<DeletedDim> = (0..d)
                .filter(|&m| flags[m] != 1.0)
                .map(|m| DeletedDim {
                    dim: m,
                    last_ratio: ratio[m],
                })
                .collect();
            node_params.push(NodeParams {
                u,
                tau,
                retained,
                deleted,
            });
        }
        snapshots.push(Snapshot {
            membership,
            node_params,
            sigma2,
            stop,
            right,
            weights,
        });
    }
    if !r.exhausted() {
        return Err("trailing bytes after numeric section".into());
    }

    Ok(FittedModel {
        tree,
        dict,
        hyper,
        draws: PosteriorDraws {
            snapshots,
            adaptation,
            n_obs,
            d,
        },
    })
}

pub fn write_model(path: &Path, model: &FittedModel) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(&bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<FittedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    model_from_bytes(&bytes)
}
