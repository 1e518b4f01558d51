//! Stage-1 dictionary learning: per-cell means and rank-d orthonormal bases,
//! plus precomputed per-(node, observation) sufficient statistics.
//!
//! For a complete observation the sampler only ever needs the squared
//! centred norm `A = ỹᵀỹ` and the basis projection `Z = Φᵀỹ` at each node;
//! both are computed once here. Partially observed rows instead carry the
//! observed-coordinate Gram matrix `Φ_OᵀΦ_O`, the squared observed residual
//! `B = ‖y_O − μ_O‖²` and the projection `C = Φ_Oᵀ(y_O − μ_O)`, from which
//! the marginal likelihood and the latent-factor posterior follow.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::DataSet;
use crate::error::{GeodeError, Result};
use crate::svd::randomized_rank_d_svd;
use crate::tree::ClusterTree;

/// Default sketch oversampling for the randomized SVD.
pub const SVD_OVERSAMPLE: usize = 10;
/// Default number of power iterations for the randomized SVD.
pub const SVD_POWER_ITERS: usize = 2;

/// Affine approximation of one cell: mean, orthonormal basis, spectrum.
#[derive(Debug, Clone)]
pub struct NodeDictionary {
    /// Cell sample mean μ (length D).
    pub mu: DVector<f64>,
    /// D × d basis Φ with orthonormal columns, ordered by descending
    /// singular value.
    pub basis: DMatrix<f64>,
    /// Singular values of the centred cell matrix, non-increasing; zero
    /// entries mark completion columns for cells smaller than d.
    pub singular_values: DVector<f64>,
}

/// Per-node dictionaries for the whole tree, indexed by node id.
#[derive(Debug, Clone)]
pub struct MultiscaleDictionary {
    nodes: Vec<NodeDictionary>,
    /// Ambient dimension D.
    pub dim: usize,
    /// Basis width d (the upper bound on local dimension).
    pub d: usize,
}

impl MultiscaleDictionary {
    pub fn new(nodes: Vec<NodeDictionary>, dim: usize, d: usize) -> Self {
        Self { nodes, dim, d }
    }

    pub fn node(&self, id: usize) -> &NodeDictionary {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[NodeDictionary] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Fits the per-cell affine approximations on mean-completed data.
///
/// Every node receives exactly the cell mean and a `D × d_upper` orthonormal
/// basis spanning the top right-singular subspace of the centred cell. Cells
/// with fewer points than `d_upper` get zero singular values and
/// deterministic orthonormal completion columns.
pub fn fit_dictionary(
    tree: &ClusterTree,
    data: &DataSet,
    d_upper: usize,
    seed: u64,
) -> Result<MultiscaleDictionary> {
    if d_upper == 0 {
        return Err(GeodeError::InvalidRank {
            requested: 0,
            max: data.dim(),
        });
    }
    if d_upper > data.dim() {
        return Err(GeodeError::InvalidRank {
            requested: d_upper,
            max: data.dim(),
        });
    }
    let filled = data.completed();
    let dim = data.dim();

    let nodes: Vec<NodeDictionary> = (0..tree.node_count())
        .into_par_iter()
        .map(|id| {
            let cell = &tree.node(id).indices;
            let node_seed = seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            fit_cell(&filled, cell, d_upper, node_seed)
        })
        .collect::<Result<_>>()?;

    Ok(MultiscaleDictionary::new(nodes, dim, d_upper))
}

fn fit_cell(
    filled: &DMatrix<f64>,
    cell: &[usize],
    d_upper: usize,
    seed: u64,
) -> Result<NodeDictionary> {
    let dim = filled.nrows();
    let nc = cell.len();
    let mut mu = DVector::<f64>::zeros(dim);
    for &i in cell {
        mu += filled.column(i);
    }
    mu /= nc as f64;

    // Centred cell matrix, observations as rows.
    let mut m = DMatrix::<f64>::zeros(nc, dim);
    for (r, &i) in cell.iter().enumerate() {
        let centred = filled.column(i) - &mu;
        m.row_mut(r).copy_from(&centred.transpose());
    }

    let rank_avail = nc.min(dim).min(d_upper);
    let (vals, vecs) = randomized_rank_d_svd(&m, rank_avail, SVD_OVERSAMPLE, SVD_POWER_ITERS, seed)?;

    let mut basis = DMatrix::<f64>::zeros(dim, d_upper);
    let mut singular_values = DVector::<f64>::zeros(d_upper);
    basis.columns_mut(0, rank_avail).copy_from(&vecs);
    singular_values.rows_mut(0, rank_avail).copy_from(&vals);
    if rank_avail < d_upper {
        complete_orthonormal(&mut basis, rank_avail);
    }

    Ok(NodeDictionary {
        mu,
        basis,
        singular_values,
    })
}

/// Extends `basis[.., ..have]` to a full set of orthonormal columns by
/// Gram–Schmidt against the standard basis, deterministically.
fn complete_orthonormal(basis: &mut DMatrix<f64>, have: usize) {
    let dim = basis.nrows();
    let want = basis.ncols();
    let mut filled = have;
    for j in 0..dim {
        if filled == want {
            break;
        }
        let mut cand = DVector::<f64>::zeros(dim);
        cand[j] = 1.0;
        for k in 0..filled {
            let proj = basis.column(k).dot(&cand);
            cand -= proj * basis.column(k).into_owned();
        }
        let norm = cand.norm();
        if norm > 0.5 {
            basis.set_column(filled, &(cand / norm));
            filled += 1;
        }
    }
    assert_eq!(filled, want, "orthonormal completion failed");
}

/// Per-row sufficient statistics for a partially observed row at one node.
#[derive(Debug, Clone)]
pub struct PartialStats {
    /// d × d observed-coordinate Gram matrix Φ_OᵀΦ_O.
    pub gram: DMatrix<f64>,
    /// Squared observed residual ‖y_O − μ_O‖².
    pub b: f64,
    /// Observed projection Φ_Oᵀ(y_O − μ_O).
    pub c: DVector<f64>,
    /// Number of observed coordinates.
    pub n_obs: usize,
}

/// Flat sufficient-statistics store covering every (node, observation) pair.
#[derive(Debug, Clone)]
pub struct SuffStats {
    n: usize,
    d: usize,
    n_nodes: usize,
    n_partial: usize,
    /// `a[node * n + i]` for complete rows; 0.0 placeholders for partial.
    a: Vec<f64>,
    /// `z[(node * n + i) * d + m]` for complete rows.
    z: Vec<f64>,
    /// Compact index per observation into `partial`, or usize::MAX.
    partial_slot: Vec<usize>,
    /// `partial[node * n_partial + slot]` for partially observed rows.
    partial: Vec<PartialStats>,
}

impl SuffStats {
    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// `A` statistic for a complete observation at a node.
    #[inline]
    pub fn a(&self, node: usize, i: usize) -> f64 {
        self.a[node * self.n + i]
    }

    /// `Z` statistic (length d) for a complete observation at a node.
    #[inline]
    pub fn z(&self, node: usize, i: usize) -> &[f64] {
        let base = (node * self.n + i) * self.d;
        &self.z[base..base + self.d]
    }

    /// Whether observation `i` is stored as partially observed.
    #[inline]
    pub fn is_partial(&self, i: usize) -> bool {
        self.partial_slot[i] != usize::MAX
    }

    /// Partial-row statistics for observation `i` at a node.
    #[inline]
    pub fn partial(&self, node: usize, i: usize) -> &PartialStats {
        let slot = self.partial_slot[i];
        debug_assert_ne!(slot, usize::MAX);
        &self.partial[node * self.n_partial + slot]
    }
}

/// Computes sufficient statistics for every (node, observation) pair.
///
/// This is a pure function of the dictionary and the data: repeated calls
/// produce bit-identical results.
pub fn precompute_stats(dict: &MultiscaleDictionary, data: &DataSet) -> Result<SuffStats> {
    if dict.dim != data.dim() {
        return Err(GeodeError::DimensionMismatch {
            expected: dict.dim,
            got: data.dim(),
        });
    }
    let n = data.len();
    let d = dict.d;
    let n_nodes = dict.len();

    let mut partial_slot = vec![usize::MAX; n];
    let mut n_partial = 0;
    for i in 0..n {
        if !data.is_complete(i) {
            partial_slot[i] = n_partial;
            n_partial += 1;
        }
    }

    struct NodeStats {
        a: Vec<f64>,
        z: Vec<f64>,
        partial: Vec<PartialStats>,
    }

    let per_node: Vec<NodeStats> = (0..n_nodes)
        .into_par_iter()
        .map(|node| {
            let nd = dict.node(node);
            let mut a = vec![0.0; n];
            let mut z = vec![0.0; n * d];
            let mut partial = Vec::with_capacity(n_partial);
            for i in 0..n {
                if data.is_complete(i) {
                    let y = data.column(i) - &nd.mu;
                    a[i] = y.dot(&y);
                    let proj = nd.basis.transpose() * &y;
                    z[i * d..(i + 1) * d].copy_from_slice(proj.as_slice());
                } else {
                    let obs = data.observed(i);
                    let col = data.column(i);
                    let mut phi_o = DMatrix::<f64>::zeros(obs.len(), d);
                    let mut w = DVector::<f64>::zeros(obs.len());
                    for (r, &coord) in obs.iter().enumerate() {
                        phi_o.row_mut(r).copy_from(&nd.basis.row(coord));
                        w[r] = col[coord] - nd.mu[coord];
                    }
                    partial.push(PartialStats {
                        gram: phi_o.transpose() * &phi_o,
                        b: w.dot(&w),
                        c: phi_o.transpose() * &w,
                        n_obs: obs.len(),
                    });
                }
            }
            NodeStats { a, z, partial }
        })
        .collect();

    let mut a = Vec::with_capacity(n_nodes * n);
    let mut z = Vec::with_capacity(n_nodes * n * d);
    let mut partial = Vec::with_capacity(n_nodes * n_partial);
    for ns in per_node {
        a.extend_from_slice(&ns.a);
        z.extend_from_slice(&ns.z);
        partial.extend(ns.partial);
    }

    Ok(SuffStats {
        n,
        d,
        n_nodes,
        n_partial,
        a,
        z,
        partial_slot,
        partial,
    })
}
