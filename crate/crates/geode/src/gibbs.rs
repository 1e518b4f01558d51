//! Stage-2 adaptive Gibbs sampler.
//!
//! One iteration allocates every observation to a tree node (a categorical
//! draw over node weight × node likelihood), refreshes the augmented
//! missing-data statistics, then updates the stick-breaking variables, the
//! shrinkage variables u, the multiplicative factors τ, and the per-scale
//! noise variances, in that order. Occasionally — with probability
//! `p(t) = exp(c0 + c1·t)` — an adaptation step deletes dimensions whose
//! relative variance has collapsed below `tol`, or re-inserts a previously
//! deleted one when nothing qualifies.
//!
//! Determinism: a master ChaCha stream drives all sequential draws; the two
//! parallel sweeps (membership and missing-data augmentation) use
//! per-observation substreams of a per-iteration seed, so results are
//! independent of thread count.

use log::debug;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::dict::{MultiscaleDictionary, SuffStats};
use crate::error::{GeodeError, Result};
use crate::model::{
    alpha2_from_u, node_log_likelihood, partial_node_loglik, sample_trunc_exp,
    sample_trunc_gamma01, Hyperparams, NodeParams, ScaleParams, StickState,
};
use crate::tree::ClusterTree;

/// Allocation counts derived from the memberships.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    /// n_{s,h}: observations stopped at each node.
    pub stopped: Vec<usize>,
    /// v_{s,h}: observations passing through each node (stopped at or below).
    pub through: Vec<usize>,
    /// r_{s,h}: observations continuing through the right child.
    pub right_cont: Vec<usize>,
    /// n_s: observations stopped at each scale.
    pub per_scale: Vec<usize>,
}

/// Recomputes all counts from scratch; cheap relative to a sweep.
pub fn counts_from_membership(membership: &[usize], tree: &ClusterTree) -> Counts {
    let n_nodes = tree.node_count();
    let mut stopped = vec![0usize; n_nodes];
    for &node in membership {
        stopped[node] += 1;
    }
    let mut through = stopped.clone();
    for id in (0..n_nodes).rev() {
        if let Some((l, r)) = tree.node(id).children {
            through[id] += through[l] + through[r];
        }
    }
    let mut right_cont = vec![0usize; n_nodes];
    for (id, rc) in right_cont.iter_mut().enumerate() {
        if let Some((_, r)) = tree.node(id).children {
            *rc = through[r];
        }
    }
    let mut per_scale = vec![0usize; tree.depth() + 1];
    for (id, &n) in stopped.iter().enumerate() {
        per_scale[tree.node(id).scale] += n;
    }
    Counts {
        stopped,
        through,
        right_cont,
        per_scale,
    }
}

/// Truncated stick-breaking weights for every node.
///
/// A path contributes `(1−S)` at each non-stopping ancestor and the go-right
/// probability `R` (or `1−R`) at each turn; stopping is forced at scale-L
/// nodes and at ragged leaves. The returned weights sum to 1 exactly up to
/// rounding because the factors telescope.
pub fn compute_weights(stick: &StickState, tree: &ClusterTree) -> Vec<f64> {
    let n_nodes = tree.node_count();
    let mut weights = vec![0.0; n_nodes];
    let mut reach = vec![0.0; n_nodes];
    reach[0] = 1.0;
    for id in 0..n_nodes {
        let node = tree.node(id);
        let stop = if node.is_leaf() { 1.0 } else { stick.stop[id] };
        weights[id] = reach[id] * stop;
        if let Some((l, r)) = node.children {
            let go = reach[id] * (1.0 - stick.stop[id]);
            reach[l] = go * (1.0 - stick.right[id]);
            reach[r] = go * stick.right[id];
        }
    }
    weights
}

/// One observation's categorical allocation over all nodes, in log space.
#[allow(clippy::too_many_arguments)]
fn allocate_one<R: Rng>(
    i: usize,
    tree: &ClusterTree,
    stats: &SuffStats,
    weights: &[f64],
    node_params: &[NodeParams],
    scale_params: &ScaleParams,
    dim: usize,
    rng: &mut R,
) -> Result<usize> {
    let n_nodes = tree.node_count();
    let mut lw = vec![f64::NEG_INFINITY; n_nodes];
    let mut max = f64::NEG_INFINITY;
    let partial = stats.is_partial(i);
    for node in 0..n_nodes {
        let w = weights[node];
        if w <= 0.0 {
            continue;
        }
        let sigma2 = scale_params.sigma2[tree.node(node).scale];
        let ll = if partial {
            partial_node_loglik(stats.partial(node, i), &node_params[node], sigma2)?
        } else {
            node_log_likelihood(
                stats.a(node, i),
                stats.z(node, i),
                &node_params[node],
                sigma2,
                dim,
            )?
        };
        let v = w.ln() + ll;
        lw[node] = v;
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(GeodeError::AllZeroWeights);
    }
    let mut total = 0.0;
    for v in lw.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (node, &p) in lw.iter().enumerate() {
        acc += p;
        if target < acc {
            return Ok(node);
        }
    }
    Ok(lw
        .iter()
        .enumerate()
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map(|(k, _)| k)
        .unwrap_or(n_nodes - 1))
}

/// Parallel membership sweep. Each observation draws from the categorical
/// distribution ∝ π̃ · likelihood using its own RNG substream.
pub fn sample_membership(
    tree: &ClusterTree,
    stats: &SuffStats,
    weights: &[f64],
    node_params: &[NodeParams],
    scale_params: &ScaleParams,
    dim: usize,
    sweep_seed: u64,
) -> Result<Vec<usize>> {
    (0..stats.n_obs())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sweep_seed);
            rng.set_stream(i as u64 + 1);
            allocate_one(
                i,
                tree,
                stats,
                weights,
                node_params,
                scale_params,
                dim,
                &mut rng,
            )
        })
        .collect()
}

/// Beta posterior parameters `(α_S, β_S, α_R, β_R)` for one node's sticks.
pub fn stick_posterior(counts: &Counts, hyper: &Hyperparams, id: usize) -> (f64, f64, f64, f64) {
    let n = counts.stopped[id] as f64;
    let v = counts.through[id] as f64;
    let r = counts.right_cont[id] as f64;
    (
        1.0 + n,
        hyper.a_stop + v - n,
        hyper.b_branch + r,
        hyper.b_branch + v - n - r,
    )
}

/// Beta updates for the stopping and go-right probabilities. Leaves keep a
/// forced stopping probability of 1.
pub fn update_sticks<R: Rng + ?Sized>(
    stick: &mut StickState,
    counts: &Counts,
    tree: &ClusterTree,
    hyper: &Hyperparams,
    rng: &mut R,
) {
    for id in 0..tree.node_count() {
        if tree.node(id).is_leaf() {
            stick.stop[id] = 1.0;
            stick.right[id] = 0.5;
            continue;
        }
        let (a_s, b_s, a_r, b_r) = stick_posterior(counts, hyper, id);
        stick.stop[id] = Beta::new(a_s, b_s).expect("valid Beta parameters").sample(rng);
        stick.right[id] = Beta::new(a_r, b_r).expect("valid Beta parameters").sample(rng);
    }
}

/// Augmented per-row statistics for partially observed rows: the `A` and `Z`
/// values the row would have at its current node once its missing block and
/// latent factor are filled in by one posterior draw.
#[derive(Debug, Clone, Default)]
pub struct Augmented {
    /// Augmented A per observation (0 for complete rows, which never read it).
    pub a: Vec<f64>,
    /// Augmented Z per observation, flattened n × d.
    pub z: Vec<f64>,
}

impl Augmented {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            a: vec![0.0; n],
            z: vec![0.0; n * d],
        }
    }

    #[inline]
    pub fn z_row(&self, i: usize, d: usize) -> &[f64] {
        &self.z[i * d..(i + 1) * d]
    }
}

/// Draws latent factors and missing blocks for all partially observed rows
/// at their current nodes, refreshing the augmented statistics.
#[allow(clippy::too_many_arguments)]
pub fn augment_partial_rows(
    aug: &mut Augmented,
    membership: &[usize],
    data: &DataSet,
    tree: &ClusterTree,
    dict: &MultiscaleDictionary,
    stats: &SuffStats,
    node_params: &[NodeParams],
    scale_params: &ScaleParams,
    seed: u64,
) -> Result<()> {
    if data.partial_count() == 0 {
        return Ok(());
    }
    let d = dict.d;
    let updates: Vec<(usize, f64, Vec<f64>)> = (0..data.len())
        .into_par_iter()
        .filter(|&i| !data.is_complete(i))
        .map(|i| -> Result<(usize, f64, Vec<f64>)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let node = membership[i];
            let ps = stats.partial(node, i);
            let params = &node_params[node];
            let sigma2 = scale_params.sigma2[tree.node(node).scale];

            let (mean, t) = crate::model::latent_posterior(ps, params, sigma2)?;
            let d_r = mean.len();
            let xi = DVector::from_fn(d_r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let eta_r = &mean + &t * xi;
            let mut eta = DVector::<f64>::zeros(d);
            for (k, &m) in params.retained.iter().enumerate() {
                eta[m] = eta_r[k];
            }

            // w = y_M − μ_M = Φ_M η + σ ε on the missing coordinates.
            let nd = dict.node(node);
            let missing = data.missing(i);
            let sigma = sigma2.sqrt();
            let mut a_aug = ps.b;
            let mut z_aug: Vec<f64> = ps.c.as_slice().to_vec();
            for &coord in missing {
                let mut w = 0.0;
                for m in 0..d {
                    w += nd.basis[(coord, m)] * eta[m];
                }
                w += sigma * rng.sample::<f64, _>(StandardNormal);
                a_aug += w * w;
                for (m, za) in z_aug.iter_mut().enumerate() {
                    *za += nd.basis[(coord, m)] * w;
                }
            }
            Ok((i, a_aug, z_aug))
        })
        .collect::<Result<_>>()?;

    for (i, a_aug, z_aug) in updates {
        aug.a[i] = a_aug;
        aug.z[i * d..(i + 1) * d].copy_from_slice(&z_aug);
    }
    Ok(())
}

/// Per-(node, dimension) sums of squared Z statistics over the
/// observations stopped at each node, flattened node-major.
pub fn z2_sums(membership: &[usize], stats: &SuffStats, aug: &Augmented, n_nodes: usize) -> Vec<f64> {
    let d = stats.d();
    let mut z2 = vec![0.0; n_nodes * d];
    for (i, &node) in membership.iter().enumerate() {
        let z = if stats.is_partial(i) {
            aug.z_row(i, d)
        } else {
            stats.z(node, i)
        };
        let base = node * d;
        for m in 0..d {
            z2[base + m] += z[m] * z[m];
        }
    }
    z2
}

/// Truncated-gamma posterior `(shape, rate)` for u at one retained
/// dimension: shape `∏τ + n/2`, rate `1 + Σ Z² / (2σ²)`.
pub fn u_posterior(params: &NodeParams, m: usize, n_stopped: f64, z2: f64, sigma2: f64) -> (f64, f64) {
    (params.delta(m) + 0.5 * n_stopped, 1.0 + 0.5 * z2 / sigma2)
}

/// Truncated-gamma updates for the shrinkage variables on retained
/// dimensions, with the Z² sums taken over the observations currently
/// stopped at the node.
#[allow(clippy::too_many_arguments)]
pub fn update_u<R: Rng + ?Sized>(
    node_params: &mut [NodeParams],
    membership: &[usize],
    stats: &SuffStats,
    aug: &Augmented,
    scale_params: &ScaleParams,
    tree: &ClusterTree,
    counts: &Counts,
    rng: &mut R,
) -> Result<()> {
    let d = stats.d();
    let n_nodes = node_params.len();
    let z2 = z2_sums(membership, stats, aug, n_nodes);
    for (node, np) in node_params.iter_mut().enumerate() {
        let sigma2 = scale_params.sigma2[tree.node(node).scale];
        let n_here = counts.stopped[node] as f64;
        let retained = np.retained.clone();
        for &m in &retained {
            let (shape, rate) = u_posterior(np, m, n_here, z2[node * d + m], sigma2);
            np.u[m] = sample_trunc_gamma01(shape, rate, rng)?;
        }
    }
    Ok(())
}

/// Truncated-exponential posterior rate for τ at retained dimension `m`:
/// `a_τ − Σ_{j ≥ m, retained} ln u_j`, positive since every u < 1.
pub fn tau_posterior_rate(params: &NodeParams, hyper: &Hyperparams, m: usize) -> f64 {
    let tail: f64 = params
        .retained
        .iter()
        .filter(|&&j| j >= m)
        .map(|&j| params.u[j].ln())
        .sum();
    hyper.a_tau - tail
}

/// Truncated-exponential updates for the multiplicative factors.
pub fn update_tau<R: Rng + ?Sized>(
    node_params: &mut [NodeParams],
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    for params in node_params.iter_mut() {
        let retained = params.retained.clone();
        for &m in &retained {
            let rate = tau_posterior_rate(params, hyper, m);
            params.tau[m] = sample_trunc_exp(rate, rng)?;
        }
    }
    Ok(())
}

/// Per-scale sums of the shrunk quadratic forms `A − Σ_retained (1−u)Z²`
/// over the observations stopped at each scale.
pub fn scale_quad_sums(
    node_params: &[NodeParams],
    membership: &[usize],
    stats: &SuffStats,
    aug: &Augmented,
    tree: &ClusterTree,
    n_scales: usize,
) -> Result<Vec<f64>> {
    let d = stats.d();
    let mut quad = vec![0.0; n_scales];
    for (i, &node) in membership.iter().enumerate() {
        let (a, z) = if stats.is_partial(i) {
            (aug.a[i], aug.z_row(i, d))
        } else {
            (stats.a(node, i), stats.z(node, i))
        };
        let params = &node_params[node];
        let mut shrunk = 0.0;
        for &m in &params.retained {
            shrunk += (1.0 - params.u[m]) * z[m] * z[m];
        }
        let bracket = a - shrunk;
        if bracket < -1e-9 {
            return Err(GeodeError::NegativeQuadForm(bracket));
        }
        quad[tree.node(node).scale] += bracket.max(0.0);
    }
    Ok(quad)
}

/// Gamma posterior `(shape, rate)` for the precision σ_s⁻².
pub fn sigma_posterior(hyper: &Hyperparams, dim: usize, n_scale: f64, quad: f64) -> (f64, f64) {
    (
        hyper.a_sigma + 0.5 * dim as f64 * n_scale,
        hyper.b_sigma + 0.5 * quad,
    )
}

/// Gamma updates for the per-scale precisions σ_s⁻². Scales with no stopped
/// observations fall back to the prior automatically.
#[allow(clippy::too_many_arguments)]
pub fn update_sigma<R: Rng + ?Sized>(
    scale_params: &mut ScaleParams,
    node_params: &[NodeParams],
    membership: &[usize],
    stats: &SuffStats,
    aug: &Augmented,
    tree: &ClusterTree,
    counts: &Counts,
    hyper: &Hyperparams,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    let n_scales = scale_params.sigma2.len();
    let quad = scale_quad_sums(node_params, membership, stats, aug, tree, n_scales)?;
    for (s, s2) in scale_params.sigma2.iter_mut().enumerate() {
        let (shape, rate) = sigma_posterior(hyper, dim, counts.per_scale[s] as f64, quad[s]);
        let dist = Gamma::new(shape, 1.0 / rate).expect("valid Gamma parameters");
        let precision: f64 = dist.sample(rng);
        *s2 = 1.0 / precision.max(1e-300);
    }
    Ok(())
}

/// Record of one adaptation step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationEvent {
    /// Iteration at which the step fired.
    pub iter: usize,
    /// (node, dimension) pairs deleted in this step.
    pub deletions: Vec<(usize, usize)>,
    /// (node, dimension) pairs re-inserted in this step.
    pub insertions: Vec<(usize, usize)>,
    /// For each dimension j: number of observations whose current node
    /// retains j, counted after the move. Divided by the number of events
    /// times n this yields the inclusion probabilities.
    pub retained_counts: Vec<u64>,
}

/// With probability `p(t)` prunes collapsed dimensions (relative variance
/// below `tol`) per node, or re-inserts one deleted dimension when no node
/// dimension qualifies for deletion. Deleted dimensions have `u` pinned at 1,
/// so their relative variance at the previous iteration is identically zero
/// and the re-insertion draw is uniform over the deleted pool. Returns the
/// event record when the step fired.
pub fn adapt_dimensions<R: Rng + ?Sized>(
    node_params: &mut [NodeParams],
    scale_params: &ScaleParams,
    tree: &ClusterTree,
    membership: &[usize],
    hyper: &Hyperparams,
    t: usize,
    rng: &mut R,
) -> Result<Option<AdaptationEvent>> {
    let p = (hyper.c0 + hyper.c1 * t as f64).exp().min(1.0);
    if rng.gen::<f64>() >= p {
        return Ok(None);
    }
    let mut deletions = Vec::new();
    let mut insertions = Vec::new();
    for (node, params) in node_params.iter_mut().enumerate() {
        let sigma2 = scale_params.sigma2[tree.node(node).scale];
        let alpha2: Vec<f64> = params
            .retained
            .iter()
            .map(|&m| alpha2_from_u(params.u[m], sigma2))
            .collect();
        let max_a2 = alpha2.iter().cloned().fold(0.0f64, f64::max);
        let ratios: Vec<f64> = if max_a2 > 0.0 {
            alpha2.iter().map(|&a| a / max_a2).collect()
        } else {
            vec![1.0; alpha2.len()]
        };
        let mut doomed: Vec<(usize, f64)> = params
            .retained
            .iter()
            .zip(&ratios)
            .filter(|(_, &r)| r < hyper.tol)
            .map(|(&m, &r)| (m, r))
            .collect();
        // Never delete everything: protect the largest-ratio dimension.
        if doomed.len() == params.retained.len() && !doomed.is_empty() {
            let keep = params
                .retained
                .iter()
                .zip(&ratios)
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(&m, _)| m)
                .unwrap();
            doomed.retain(|&(m, _)| m != keep);
        }
        if !doomed.is_empty() {
            for (m, r) in doomed {
                params.retained.retain(|&k| k != m);
                params.u[m] = 1.0;
                params.deleted.push(crate::model::DeletedDim {
                    dim: m,
                    last_ratio: r,
                });
                deletions.push((node, m));
            }
        } else if !params.deleted.is_empty() {
            // A deleted dimension sits at u = 1, so its relative variance
            // from the previous sweep is exactly zero for every member of
            // the pool; the weighted draw collapses to a uniform one.
            let pick = rng.gen_range(0..params.deleted.len());
            let dd = params.deleted.remove(pick);
            let m = dd.dim;
            let insert_at = params.retained.partition_point(|&k| k < m);
            params.retained.insert(insert_at, m);
            params.tau[m] = sample_trunc_exp(hyper.a_tau, rng)?;
            let shape = params.delta(m);
            params.u[m] = sample_trunc_gamma01(shape, 1.0, rng)?;
            insertions.push((node, m));
        }
    }

    let d = node_params.first().map(|p| p.d()).unwrap_or(0);
    let mut retained_counts = vec![0u64; d];
    let mut masks = vec![false; node_params.len() * d];
    for (node, params) in node_params.iter().enumerate() {
        for &m in &params.retained {
            masks[node * d + m] = true;
        }
    }
    for &node in membership {
        for (m, count) in retained_counts.iter_mut().enumerate() {
            if masks[node * d + m] {
                *count += 1;
            }
        }
    }
    Ok(Some(AdaptationEvent {
        iter: t,
        deletions,
        insertions,
        retained_counts,
    }))
}

/// Full sampler state between iterations.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Current node id per observation.
    pub membership: Vec<usize>,
    pub stick: StickState,
    pub node_params: Vec<NodeParams>,
    pub scale_params: ScaleParams,
    pub counts: Counts,
    pub aug: Augmented,
    /// Completed iterations.
    pub iter: usize,
}

/// One retained posterior sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub membership: Vec<usize>,
    pub node_params: Vec<NodeParams>,
    pub sigma2: Vec<f64>,
    pub stop: Vec<f64>,
    pub right: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Thinned post-burn-in snapshots plus the adaptation history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub snapshots: Vec<Snapshot>,
    pub adaptation: Vec<AdaptationEvent>,
    pub n_obs: usize,
    pub d: usize,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Initial state: memberships at the finest cells, sticks and shrinkage
/// variables from their priors, noise variances from per-scale projection
/// residuals.
pub fn init_chain<R: Rng + ?Sized>(
    data: &DataSet,
    tree: &ClusterTree,
    dict: &MultiscaleDictionary,
    stats: &SuffStats,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<ChainState> {
    let n = data.len();
    let n_nodes = tree.node_count();
    let d = dict.d;

    let membership: Vec<usize> = (0..n).map(|i| tree.leaf_of(i)).collect();
    let counts = counts_from_membership(&membership, tree);

    let mut stick = StickState {
        stop: vec![1.0; n_nodes],
        right: vec![0.5; n_nodes],
        weights: vec![0.0; n_nodes],
    };
    for id in 0..n_nodes {
        if !tree.node(id).is_leaf() {
            stick.stop[id] = Beta::new(1.0, hyper.a_stop)
                .expect("valid Beta parameters")
                .sample(rng);
            stick.right[id] = Beta::new(hyper.b_branch, hyper.b_branch)
                .expect("valid Beta parameters")
                .sample(rng);
        }
    }
    stick.weights = compute_weights(&stick, tree);

    let mut node_params = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let mut tau = vec![1.0; d];
        for tm in tau.iter_mut() {
            *tm = sample_trunc_exp(hyper.a_tau, rng)?;
        }
        let mut params = NodeParams::all_retained(vec![0.5; d], tau);
        for m in 0..d {
            let shape = params.delta(m);
            params.u[m] = sample_trunc_gamma01(shape, 1.0, rng)?;
        }
        node_params.push(params);
    }

    // Residual variance per scale from complete rows at their scale-s cells.
    let mut sigma2 = vec![1.0; tree.depth() + 1];
    let mut n_complete = 0usize;
    for i in 0..n {
        if !stats.is_partial(i) {
            n_complete += 1;
        }
    }
    if n_complete > 0 {
        for (s, slot) in sigma2.iter_mut().enumerate() {
            let mut total = 0.0;
            for (i, &leaf) in membership.iter().enumerate() {
                if stats.is_partial(i) {
                    continue;
                }
                let node = if tree.node(leaf).scale <= s {
                    leaf
                } else {
                    tree.ancestor_at(leaf, s).expect("ancestor exists")
                };
                let z2: f64 = stats.z(node, i).iter().map(|z| z * z).sum();
                total += (stats.a(node, i) - z2).max(0.0);
            }
            *slot = (total / (dict.dim as f64 * n_complete as f64)).max(1e-8);
        }
    }

    Ok(ChainState {
        membership,
        stick,
        node_params,
        scale_params: ScaleParams { sigma2 },
        counts,
        aug: Augmented::zeros(n, d),
        iter: 0,
    })
}

fn snapshot_of(state: &ChainState) -> Snapshot {
    Snapshot {
        membership: state.membership.clone(),
        node_params: state.node_params.clone(),
        sigma2: state.scale_params.sigma2.clone(),
        stop: state.stick.stop.clone(),
        right: state.stick.right.clone(),
        weights: state.stick.weights.clone(),
    }
}

/// Runs the full sampler and returns the retained draws together with the
/// final chain state. Deterministic for a fixed seed regardless of the
/// rayon thread count.
pub fn run_gibbs(
    data: &DataSet,
    tree: &ClusterTree,
    dict: &MultiscaleDictionary,
    stats: &SuffStats,
    hyper: &Hyperparams,
) -> Result<(PosteriorDraws, ChainState)> {
    hyper.validate()?;
    let dim = dict.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut state = init_chain(data, tree, dict, stats, hyper, &mut rng)?;

    let mut snapshots = Vec::new();
    let mut adaptation = Vec::new();

    for t in 1..=hyper.iters {
        let sweep_seed = rng.gen::<u64>();
        state.membership = sample_membership(
            tree,
            stats,
            &state.stick.weights,
            &state.node_params,
            &state.scale_params,
            dim,
            sweep_seed,
        )?;
        state.counts = counts_from_membership(&state.membership, tree);

        let aug_seed = rng.gen::<u64>();
        augment_partial_rows(
            &mut state.aug,
            &state.membership,
            data,
            tree,
            dict,
            stats,
            &state.node_params,
            &state.scale_params,
            aug_seed,
        )?;

        update_sticks(&mut state.stick, &state.counts, tree, hyper, &mut rng);
        state.stick.weights = compute_weights(&state.stick, tree);

        update_u(
            &mut state.node_params,
            &state.membership,
            stats,
            &state.aug,
            &state.scale_params,
            tree,
            &state.counts,
            &mut rng,
        )?;
        update_tau(&mut state.node_params, hyper, &mut rng)?;
        update_sigma(
            &mut state.scale_params,
            &state.node_params,
            &state.membership,
            stats,
            &state.aug,
            tree,
            &state.counts,
            hyper,
            dim,
            &mut rng,
        )?;

        let event = adapt_dimensions(
            &mut state.node_params,
            &state.scale_params,
            tree,
            &state.membership,
            hyper,
            t,
            &mut rng,
        )?;
        let adapted = event.is_some();
        if let Some(ev) = event {
            adaptation.push(ev);
        }

        state.iter = t;
        if t > hyper.burn_in && (t - hyper.burn_in) % hyper.thin == 0 {
            snapshots.push(snapshot_of(&state));
        }

        if log::log_enabled!(log::Level::Debug) {
            let retained: usize = state.node_params.iter().map(|p| p.retained.len()).sum();
            debug!(
                "iter={t} sigma2={:?} retained_total={retained} adapted={adapted}",
                state.scale_params.sigma2
            );
        }
    }

    Ok((
        PosteriorDraws {
            snapshots,
            adaptation,
            n_obs: data.len(),
            d: dict.d,
        },
        state,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dict::{fit_dictionary, precompute_stats};
    use crate::tree::build_tree;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand_distr::StandardNormal;

    fn toy_problem(
        n: usize,
        dim: usize,
        depth: usize,
        d: usize,
        seed: u64,
    ) -> (DataSet, ClusterTree, MultiscaleDictionary, SuffStats) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = DataSet::complete(m).unwrap();
        let tree = build_tree(&data, depth, 2).unwrap();
        let dict = fit_dictionary(&tree, &data, d, seed).unwrap();
        let stats = precompute_stats(&dict, &data).unwrap();
        (data, tree, dict, stats)
    }

    #[test]
    fn weights_single_node() {
        let (_, tree, _, _) = toy_problem(5, 3, 0, 2, 1);
        let stick = StickState {
            stop: vec![0.3],
            right: vec![0.6],
            weights: vec![0.0],
        };
        let w = compute_weights(&stick, &tree);
        assert_eq!(w, vec![1.0]); // leaf: forced stop
    }

    #[test]
    fn weights_symmetric_routing() {
        // Depth-2 full tree with S=0 internally and R=1/2: each of the four
        // scale-2 cells gets weight 1/4.
        let mut cols = Vec::new();
        for k in 0..40 {
            let c = (k / 10) as f64 * 50.0;
            cols.push(c + 0.1 * (k % 10) as f64);
            cols.push(if k / 10 % 2 == 0 { c } else { -c });
        }
        let data = DataSet::complete(DMatrix::from_vec(2, 40, cols)).unwrap();
        let tree = build_tree(&data, 2, 2).unwrap();
        assert_eq!(tree.depth(), 2);
        assert_eq!(tree.scale_nodes(2).len(), 4);
        let n_nodes = tree.node_count();
        let stick = StickState {
            stop: vec![0.0; n_nodes],
            right: vec![0.5; n_nodes],
            weights: vec![0.0; n_nodes],
        };
        let w = compute_weights(&stick, &tree);
        for &id in tree.scale_nodes(2) {
            assert_abs_diff_eq!(w[id], 0.25, epsilon = 1e-15);
        }
        let total: f64 = w.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_sum_to_one_random() {
        let (_, tree, _, _) = toy_problem(200, 4, 4, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let n_nodes = tree.node_count();
            let stick = StickState {
                stop: (0..n_nodes).map(|_| rng.gen()).collect(),
                right: (0..n_nodes).map(|_| rng.gen()).collect(),
                weights: vec![0.0; n_nodes],
            };
            let w = compute_weights(&stick, &tree);
            let total: f64 = w.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn counts_are_consistent() {
        let (_, tree, _, _) = toy_problem(100, 3, 3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let membership: Vec<usize> =
            (0..100).map(|_| rng.gen_range(0..tree.node_count())).collect();
        let counts = counts_from_membership(&membership, &tree);
        assert_eq!(counts.stopped.iter().sum::<usize>(), 100);
        assert_eq!(counts.through[0], 100);
        for id in 0..tree.node_count() {
            if let Some((l, r)) = tree.node(id).children {
                assert_eq!(
                    counts.through[id],
                    counts.stopped[id] + counts.through[l] + counts.through[r]
                );
                assert_eq!(counts.right_cont[id], counts.through[r]);
            }
        }
        assert_eq!(counts.per_scale.iter().sum::<usize>(), 100);
    }

    #[test]
    fn membership_single_node() {
        let (data, tree, dict, stats) = toy_problem(20, 3, 0, 2, 11);
        let hyper = Hyperparams {
            d_upper: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = init_chain(&data, &tree, &dict, &stats, &hyper, &mut rng).unwrap();
        let m = sample_membership(
            &tree,
            &stats,
            &state.stick.weights,
            &state.node_params,
            &state.scale_params,
            3,
            42,
        )
        .unwrap();
        assert!(m.iter().all(|&k| k == 0));
    }

    #[test]
    fn membership_follows_weights_when_likelihood_flat() {
        // Two identical leaves (same dictionary), weights 0.9/0.1: the
        // allocation frequencies must track the weights.
        let (data, tree, dict, stats) = toy_problem(60, 3, 1, 2, 13);
        assert_eq!(tree.depth(), 1);
        let d = 2;
        let mut node_params = Vec::new();
        for _ in 0..tree.node_count() {
            node_params.push(NodeParams::all_retained(vec![1.0; d], vec![1.0; d]));
        }
        let scale_params = ScaleParams {
            sigma2: vec![1.0; 2],
        };
        // Force both leaf dictionaries identical to the root so likelihoods
        // coincide across leaves.
        let mut nodes = Vec::new();
        for _ in 0..tree.node_count() {
            nodes.push(dict.node(0).clone());
        }
        let dict2 = MultiscaleDictionary::new(nodes, dict.dim, dict.d);
        let stats2 = precompute_stats(&dict2, &data).unwrap();
        let _ = stats;

        let weights = vec![0.0, 0.9, 0.1];
        let mut hits = vec![0usize; 3];
        for rep in 0..200 {
            let m = sample_membership(
                &tree,
                &stats2,
                &weights,
                &node_params,
                &scale_params,
                3,
                rep,
            )
            .unwrap();
            for &k in &m {
                hits[k] += 1;
            }
        }
        let total = 200.0 * 60.0;
        let f1 = hits[1] as f64 / total;
        // 3 SE for a Bernoulli(0.9) over 12000 draws ≈ 0.008.
        assert!((f1 - 0.9).abs() < 0.01, "frequency {f1}");
        assert_eq!(hits[0], 0);
    }

    #[test]
    fn stick_updates_hit_prior_on_empty_nodes() {
        let (_, tree, _, _) = toy_problem(50, 3, 2, 2, 17);
        let hyper = Hyperparams::default();
        // All mass at the root: every other node sees v = n = r = 0.
        let membership = vec![0usize; 50];
        let counts = counts_from_membership(&membership, &tree);
        let n_nodes = tree.node_count();
        let mut stick = StickState {
            stop: vec![0.5; n_nodes],
            right: vec![0.5; n_nodes],
            weights: vec![0.0; n_nodes],
        };
        // Empirical check: S at an empty internal node is Beta(1, 1) = U(0,1)
        // under the default a_stop = 1 — its mean over draws ≈ 1/2.
        let internal = (0..n_nodes)
            .find(|&id| !tree.node(id).is_leaf() && counts.through[id] == 0)
            .expect("an empty internal node exists");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = 0.0;
        let reps = 4000;
        for _ in 0..reps {
            update_sticks(&mut stick, &counts, &tree, &hyper, &mut rng);
            acc += stick.stop[internal];
        }
        let mean = acc / reps as f64;
        assert!((mean - 0.5).abs() < 3.0 * 0.2887 / (reps as f64).sqrt() * 1.5);
    }

    #[test]
    fn tau_rate_arithmetic() {
        // u_j = e^{-1} for the three retained indices ≥ m, a_τ = 0.05:
        // the update rate is 3.05; the mean of many draws is 1 + 1/3.05.
        let mut params = vec![NodeParams::all_retained(
            vec![(-1.0f64).exp(); 3],
            vec![1.0; 3],
        )];
        let hyper = Hyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reps = 100_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            update_tau(&mut params, &hyper, &mut rng).unwrap();
            acc += params[0].tau[0];
        }
        let mean = acc / reps as f64;
        let expect = 1.0 + 1.0 / 3.05;
        let se = (1.0 / 3.05) / (reps as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sigma_prior_when_scale_empty() {
        let (data, tree, dict, stats) = toy_problem(40, 4, 2, 2, 23);
        let hyper = Hyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = init_chain(&data, &tree, &dict, &stats, &hyper, &mut rng).unwrap();
        // Everyone stopped at the root: scale 1 and 2 are empty.
        state.membership = vec![0; 40];
        state.counts = counts_from_membership(&state.membership, &tree);
        // u = 1 everywhere so the data term is pure A.
        for p in state.node_params.iter_mut() {
            p.u.iter_mut().for_each(|u| *u = 1.0);
        }
        let mut acc = 0.0;
        let reps = 20_000;
        for _ in 0..reps {
            update_sigma(
                &mut state.scale_params,
                &state.node_params,
                &state.membership,
                &stats,
                &state.aug,
                &tree,
                &state.counts,
                &hyper,
                4,
                &mut rng,
            )
            .unwrap();
            acc += 1.0 / state.scale_params.sigma2[2];
        }
        // Empty scale: precision ~ Gamma(a_sigma, b_sigma), mean a/b = 1.
        let mean = acc / reps as f64;
        // sd of Gamma(0.5, rate 0.5) is sqrt(0.5)/0.5 = 2.83.
        let se = 2.83 / (reps as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn adaptation_deletes_and_reinserts() {
        let (_, tree, _, _) = toy_problem(30, 3, 0, 3, 29);
        let hyper = Hyperparams {
            d_upper: 3,
            c0: 50.0, // force the step to fire
            ..Default::default()
        };
        let scale_params = ScaleParams {
            sigma2: vec![1.0],
        };
        let membership = vec![0usize; 30];
        // α² ratios (1, 0.5, 1e−6): dimension 2 must go.
        let sigma2 = 1.0;
        let target = [1.0, 0.5, 1e-6];
        let u: Vec<f64> = target
            .iter()
            .map(|&a| crate::model::u_from_alpha2(a, sigma2))
            .collect();
        let mut params = vec![NodeParams::all_retained(u, vec![1.0; 3])];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ev = adapt_dimensions(
            &mut params,
            &scale_params,
            &tree,
            &membership,
            &hyper,
            1,
            &mut rng,
        )
        .unwrap()
        .expect("step fires");
        assert_eq!(ev.deletions, vec![(0, 2)]);
        assert_eq!(params[0].retained, vec![0, 1]);
        assert_eq!(params[0].u[2], 1.0);
        assert_eq!(ev.retained_counts, vec![30, 30, 0]);

        // Nothing qualifies now; the deleted dimension must come back.
        let ev2 = adapt_dimensions(
            &mut params,
            &scale_params,
            &tree,
            &membership,
            &hyper,
            2,
            &mut rng,
        )
        .unwrap()
        .expect("step fires");
        assert_eq!(ev2.insertions, vec![(0, 2)]);
        assert_eq!(params[0].retained, vec![0, 1, 2]);
        assert!(params[0].u[2] > 0.0 && params[0].u[2] < 1.0);
    }

    #[test]
    fn reinsertion_is_uniform_over_the_deleted_pool() {
        // Two parked dimensions with wildly different ratios at deletion
        // time: both sit at u = 1 now, so each must come back equally often.
        let (_, tree, _, _) = toy_problem(30, 4, 0, 3, 29);
        let hyper = Hyperparams {
            d_upper: 4,
            c0: 50.0,
            ..Default::default()
        };
        let scale_params = ScaleParams {
            sigma2: vec![1.0],
        };
        let membership = vec![0usize; 30];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reps = 4000;
        let mut first = 0usize;
        for _ in 0..reps {
            let mut params = NodeParams::all_retained(
                vec![0.5, 0.5, 1.0, 1.0],
                vec![1.0; 4],
            );
            params.retained = vec![0, 1];
            params.deleted = vec![
                crate::model::DeletedDim {
                    dim: 2,
                    last_ratio: 0.9,
                },
                crate::model::DeletedDim {
                    dim: 3,
                    last_ratio: 1e-9,
                },
            ];
            let mut all = vec![params];
            let ev = adapt_dimensions(
                &mut all,
                &scale_params,
                &tree,
                &membership,
                &hyper,
                1,
                &mut rng,
            )
            .unwrap()
            .expect("step fires");
            assert_eq!(ev.insertions.len(), 1);
            if ev.insertions[0].1 == 2 {
                first += 1;
            }
        }
        let share = first as f64 / reps as f64;
        // 4 sd of a fair coin over 4000 draws is ~0.032.
        assert!(
            (share - 0.5).abs() < 0.04,
            "dimension 2 re-inserted with share {share}"
        );
    }

    #[test]
    fn adaptation_probability_decreases() {
        let hyper = Hyperparams::default();
        let p = |t: usize| (hyper.c0 + hyper.c1 * t as f64).exp();
        assert_abs_diff_eq!(p(1), (-1.005f64).exp(), epsilon = 1e-12);
        for t in 1..100 {
            assert!(p(t + 1) < p(t));
        }
    }

    #[test]
    fn zero_iterations_returns_empty_draws() {
        let (data, tree, dict, stats) = toy_problem(30, 4, 1, 2, 31);
        let hyper = Hyperparams {
            d_upper: 2,
            iters: 0,
            burn_in: 0,
            ..Default::default()
        };
        let (draws, state) = run_gibbs(&data, &tree, &dict, &stats, &hyper).unwrap();
        assert!(draws.is_empty());
        assert_eq!(state.iter, 0);
    }

    #[test]
    fn sampler_is_deterministic() {
        let (data, tree, dict, stats) = toy_problem(40, 5, 2, 2, 37);
        let hyper = Hyperparams {
            d_upper: 2,
            iters: 30,
            burn_in: 10,
            seed: 99,
            ..Default::default()
        };
        let (a, _) = run_gibbs(&data, &tree, &dict, &stats, &hyper).unwrap();
        let (b, _) = run_gibbs(&data, &tree, &dict, &stats, &hyper).unwrap();
        assert_eq!(a.len(), b.len());
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(sa.membership, sb.membership);
            assert_eq!(sa.sigma2, sb.sigma2);
            assert_eq!(sa.weights, sb.weights);
            for (pa, pb) in sa.node_params.iter().zip(&sb.node_params) {
                assert_eq!(pa.u, pb.u);
                assert_eq!(pa.tau, pb.tau);
                assert_eq!(pa.retained, pb.retained);
            }
        }
    }

    #[test]
    fn recovers_isotropic_variance() {
        // Isotropic Gaussian data through a single-node tree: the posterior
        // mean of σ² should land within 10% of the generating variance.
        let n = 500;
        let dim = 20;
        let gen_sigma2 = 2.25f64;
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let m = DMatrix::from_fn(dim, n, |_, _| {
            gen_sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let data = DataSet::complete(m).unwrap();
        let tree = build_tree(&data, 0, 2).unwrap();
        let dict = fit_dictionary(&tree, &data, 3, 7).unwrap();
        let stats = precompute_stats(&dict, &data).unwrap();
        let hyper = Hyperparams {
            d_upper: 3,
            iters: 300,
            burn_in: 100,
            seed: 5,
            ..Default::default()
        };
        let (draws, _) = run_gibbs(&data, &tree, &dict, &stats, &hyper).unwrap();
        let mean_sigma2: f64 =
            draws.snapshots.iter().map(|s| s.sigma2[0]).sum::<f64>() / draws.len() as f64;
        assert!(
            (mean_sigma2 - gen_sigma2).abs() / gen_sigma2 < 0.10,
            "posterior mean {mean_sigma2} vs generating {gen_sigma2}"
        );
    }

    #[test]
    fn snapshot_count_honours_thinning() {
        let (data, tree, dict, stats) = toy_problem(30, 4, 1, 2, 41);
        let hyper = Hyperparams {
            d_upper: 2,
            iters: 50,
            burn_in: 20,
            thin: 3,
            ..Default::default()
        };
        let (draws, _) = run_gibbs(&data, &tree, &dict, &stats, &hyper).unwrap();
        assert_eq!(draws.len(), 10); // floor(30 / 3)
    }
}
