//! Posterior inference on a fitted model: density evaluation, conditional
//! simulation of missing features, prediction, and classification.
//!
//! Every quantity is a Monte Carlo average over the retained Gibbs draws.
//! The density of a new point under one draw is the weight-mixture
//! `Σ_nodes π̃ · N(y; μ, Φ Σ Φᵀ + σ² I)` evaluated through the sufficient
//! statistics; across draws the estimates are combined as a mean in density
//! space (log-mean-exp in log space).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::dict::{MultiscaleDictionary, PartialStats};
use crate::error::{GeodeError, Result};
use crate::gibbs::{PosteriorDraws, Snapshot};
use crate::model::{
    latent_posterior, node_log_likelihood, partial_node_loglik, Hyperparams,
};
use crate::tree::ClusterTree;

/// A fitted two-stage model: the geometric dictionary plus posterior draws.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub tree: ClusterTree,
    pub dict: MultiscaleDictionary,
    pub hyper: Hyperparams,
    pub draws: PosteriorDraws,
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

impl FittedModel {
    pub fn dim(&self) -> usize {
        self.dict.dim
    }

    fn require_draws(&self) -> Result<()> {
        if self.draws.is_empty() {
            Err(GeodeError::NoAdaptationSteps)
        } else {
            Ok(())
        }
    }

    /// Sufficient statistics of one fully observed row against every node.
    fn row_stats(&self, y: &DVector<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n_nodes = self.tree.node_count();
        let mut a = Vec::with_capacity(n_nodes);
        let mut z = Vec::with_capacity(n_nodes);
        for id in 0..n_nodes {
            let nd = self.dict.node(id);
            let centered = y - &nd.mu;
            a.push(centered.norm_squared());
            z.push((nd.basis.transpose() * &centered).as_slice().to_vec());
        }
        (a, z)
    }

    /// Partial statistics of one partially observed row against every node.
    fn row_partial_stats(&self, y: &DVector<f64>, missing: &[usize]) -> Vec<PartialStats> {
        let dim = self.dim();
        let d = self.dict.d;
        let observed: Vec<usize> = (0..dim).filter(|i| !missing.contains(i)).collect();
        let n_nodes = self.tree.node_count();
        let mut out = Vec::with_capacity(n_nodes);
        for id in 0..n_nodes {
            let nd = self.dict.node(id);
            let mut phi_o = DMatrix::<f64>::zeros(observed.len(), d);
            let mut resid = DVector::<f64>::zeros(observed.len());
            for (row, &coord) in observed.iter().enumerate() {
                for m in 0..d {
                    phi_o[(row, m)] = nd.basis[(coord, m)];
                }
                resid[row] = y[coord] - nd.mu[coord];
            }
            let gram = phi_o.transpose() * &phi_o;
            let c = phi_o.transpose() * &resid;
            out.push(PartialStats {
                gram,
                b: resid.norm_squared(),
                c,
                n_obs: observed.len(),
            });
        }
        out
    }

    /// Log mixture density of one draw given precomputed row statistics.
    fn draw_log_density(
        &self,
        snap: &Snapshot,
        a: &[f64],
        z: &[Vec<f64>],
    ) -> Result<f64> {
        let dim = self.dim();
        let mut terms = Vec::with_capacity(self.tree.node_count());
        for id in 0..self.tree.node_count() {
            let w = snap.weights[id];
            if w <= 0.0 {
                continue;
            }
            let sigma2 = snap.sigma2[self.tree.node(id).scale];
            let ll = node_log_likelihood(a[id], &z[id], &snap.node_params[id], sigma2, dim)?;
            terms.push(w.ln() + ll);
        }
        if terms.is_empty() {
            return Err(GeodeError::AllZeroWeights);
        }
        Ok(logsumexp(&terms))
    }

    fn draw_log_density_partial(&self, snap: &Snapshot, ps: &[PartialStats]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.tree.node_count());
        for id in 0..self.tree.node_count() {
            let w = snap.weights[id];
            if w <= 0.0 {
                continue;
            }
            let sigma2 = snap.sigma2[self.tree.node(id).scale];
            let ll = partial_node_loglik(&ps[id], &snap.node_params[id], sigma2)?;
            terms.push(w.ln() + ll);
        }
        if terms.is_empty() {
            return Err(GeodeError::AllZeroWeights);
        }
        Ok(logsumexp(&terms))
    }

    /// Posterior-mean log density of a fully observed point: the log of the
    /// average over draws of the per-draw mixture density.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        self.require_draws()?;
        if y.len() != self.dim() {
            return Err(GeodeError::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
            });
        }
        let (a, z) = self.row_stats(y);
        let per_draw: Vec<f64> = self
            .draws
            .snapshots
            .iter()
            .map(|snap| self.draw_log_density(snap, &a, &z))
            .collect::<Result<_>>()?;
        Ok(logsumexp(&per_draw) - (per_draw.len() as f64).ln())
    }

    /// Posterior-mean log density of a partially observed point, marginal
    /// over its missing coordinates.
    pub fn log_density_partial(&self, y: &DVector<f64>, missing: &[usize]) -> Result<f64> {
        self.require_draws()?;
        if missing.is_empty() {
            return self.log_density(y);
        }
        let ps = self.row_partial_stats(y, missing);
        let per_draw: Vec<f64> = self
            .draws
            .snapshots
            .iter()
            .map(|snap| self.draw_log_density_partial(snap, &ps))
            .collect::<Result<_>>()?;
        Ok(logsumexp(&per_draw) - (per_draw.len() as f64).ln())
    }

    /// Parallel log densities for many points.
    pub fn log_density_batch(&self, data: &DataSet) -> Result<Vec<f64>> {
        self.require_draws()?;
        if data.dim() != self.dim() {
            return Err(GeodeError::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let y = DVector::from_column_slice(data.values().column(i).as_slice());
                let missing = data.missing(i);
                if missing.is_empty() {
                    self.log_density(&y)
                } else {
                    self.log_density_partial(&y, missing)
                }
            })
            .collect()
    }

    /// One conditional draw of the missing block of `y` under one posterior
    /// snapshot: allocate a node by the partial-likelihood mixture, draw the
    /// latent factor from its Gaussian posterior, then the missing block.
    /// Returns (missing-coordinate values, node id, latent factor).
    pub fn conditional_draw<R: Rng + ?Sized>(
        &self,
        snap: &Snapshot,
        ps: &[PartialStats],
        missing: &[usize],
        rng: &mut R,
    ) -> Result<(Vec<f64>, usize, DVector<f64>)> {
        let d = self.dict.d;
        // Node allocation ∝ π̃ · marginal partial likelihood.
        let mut lw = vec![f64::NEG_INFINITY; self.tree.node_count()];
        let mut max = f64::NEG_INFINITY;
        for id in 0..self.tree.node_count() {
            let w = snap.weights[id];
            if w <= 0.0 {
                continue;
            }
            let sigma2 = snap.sigma2[self.tree.node(id).scale];
            let ll = partial_node_loglik(&ps[id], &snap.node_params[id], sigma2)?;
            let v = w.ln() + ll;
            lw[id] = v;
            max = max.max(v);
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
        let mut node = self.tree.node_count() - 1;
        let mut acc = 0.0;
        for (id, &p) in lw.iter().enumerate() {
            acc += p;
            if target < acc {
                node = id;
                break;
            }
        }

        let params = &snap.node_params[node];
        let sigma2 = snap.sigma2[self.tree.node(node).scale];
        let (mean, t) = latent_posterior(&ps[node], params, sigma2)?;
        let d_r = mean.len();
        let xi = DVector::from_fn(d_r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta_r = &mean + &t * xi;
        let mut eta = DVector::<f64>::zeros(d);
        for (k, &m) in params.retained.iter().enumerate() {
            eta[m] = eta_r[k];
        }

        let nd = self.dict.node(node);
        let sigma = sigma2.sqrt();
        let values = missing
            .iter()
            .map(|&coord| {
                let mut v = nd.mu[coord];
                for m in 0..d {
                    v += nd.basis[(coord, m)] * eta[m];
                }
                v + sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Ok((values, node, eta))
    }
}

/// Posterior summary of the missing block of one observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationResult {
    /// Missing coordinate indices, ascending.
    pub missing: Vec<usize>,
    /// Posterior means, one per missing coordinate.
    pub mean: Vec<f64>,
    /// Posterior standard deviations.
    pub sd: Vec<f64>,
    /// Equal-tailed 95% intervals (lower, upper).
    pub interval95: Vec<(f64, f64)>,
    /// Raw conditional samples, one row per draw (draws × missing).
    pub samples: Vec<Vec<f64>>,
    /// Node allocated in each draw.
    pub nodes: Vec<usize>,
    /// Latent factor drawn in each draw (draws × d).
    pub factors: Vec<Vec<f64>>,
}

fn equal_tailed_interval(sorted: &[f64], lo_q: f64, hi_q: f64) -> (f64, f64) {
    let n = sorted.len();
    let pick = |q: f64| {
        let idx = (q * (n as f64 - 1.0)).round() as usize;
        sorted[idx.min(n - 1)]
    };
    (pick(lo_q), pick(hi_q))
}

/// Simulates the missing block of `y` from its posterior predictive,
/// one conditional draw per retained snapshot.
pub fn impute(
    model: &FittedModel,
    y: &DVector<f64>,
    missing: &[usize],
    seed: u64,
) -> Result<ImputationResult> {
    model.require_draws()?;
    if y.len() != model.dim() {
        return Err(GeodeError::DimensionMismatch {
            expected: model.dim(),
            got: y.len(),
        });
    }
    let mut missing = missing.to_vec();
    missing.sort_unstable();
    missing.dedup();
    if missing.is_empty() {
        return Err(GeodeError::BadMask("no missing coordinates to impute".into()));
    }
    if missing.iter().any(|&c| c >= model.dim()) {
        return Err(GeodeError::BadMask("missing index out of range".into()));
    }
    if missing.len() == model.dim() {
        return Err(GeodeError::NoObservedEntries);
    }
    let ps = model.row_partial_stats(y, &missing);

    let n_draws = model.draws.len();
    let results: Vec<(Vec<f64>, usize, Vec<f64>)> = (0..n_draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let snap = &model.draws.snapshots[k];
            let (vals, node, eta) = model.conditional_draw(snap, &ps, &missing, &mut rng)?;
            Ok((vals, node, eta.as_slice().to_vec()))
        })
        .collect::<Result<_>>()?;

    let q = missing.len();
    let mut mean = vec![0.0; q];
    let mut sd = vec![0.0; q];
    let mut interval95 = Vec::with_capacity(q);
    for j in 0..q {
        let col: Vec<f64> = results.iter().map(|(v, _, _)| v[j]).collect();
        let m = col.iter().sum::<f64>() / n_draws as f64;
        mean[j] = m;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_draws as f64 - 1.0).max(1.0);
        sd[j] = var.sqrt();
        let mut sorted = col;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        interval95.push(equal_tailed_interval(&sorted, 0.025, 0.975));
    }

    Ok(ImputationResult {
        missing,
        mean,
        sd,
        interval95,
        samples: results.iter().map(|(v, _, _)| v.clone()).collect(),
        nodes: results.iter().map(|(_, n, _)| *n).collect(),
        factors: results.into_iter().map(|(_, _, f)| f).collect(),
    })
}

/// Predicts response coordinates from predictor coordinates: the posterior
/// mean of the responses treated as the missing block. Returns the means in
/// the order of `response`.
pub fn predict_response(
    model: &FittedModel,
    y: &DVector<f64>,
    response: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let result = impute(model, y, response, seed)?;
    // impute() sorts the coordinates; map back to the caller's order.
    let mut out = Vec::with_capacity(response.len());
    for &coord in response {
        let k = result
            .missing
            .iter()
            .position(|&c| c == coord)
            .expect("coordinate present");
        out.push(result.mean[k]);
    }
    Ok(out)
}

/// One classified observation: the winning class and the per-class vote
/// counts across draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classification {
    pub label: usize,
    pub votes: Vec<usize>,
}

/// Classifies points by posterior vote across per-class models: each draw
/// index casts one vote for the class whose draw assigns the highest
/// mixture density. All models must carry the same number of draws. Ties
/// go to the class with the higher posterior-mean log density, then to the
/// lower class index.
pub fn classify_detailed(models: &[FittedModel], data: &DataSet) -> Result<Vec<Classification>> {
    if models.is_empty() {
        return Err(GeodeError::EmptyData);
    }
    let n_draws = models[0].draws.len();
    for m in models {
        m.require_draws()?;
        if m.draws.len() != n_draws {
            return Err(GeodeError::DrawCountMismatch(n_draws, m.draws.len()));
        }
        if m.dim() != data.dim() {
            return Err(GeodeError::DimensionMismatch {
                expected: m.dim(),
                got: data.dim(),
            });
        }
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let y = DVector::from_column_slice(data.values().column(i).as_slice());
            let missing = data.missing(i);
            // Per-class per-draw log densities.
            let mut per_class: Vec<Vec<f64>> = Vec::with_capacity(models.len());
            for model in models {
                let per_draw: Vec<f64> = if missing.is_empty() {
                    let (a, z) = model.row_stats(&y);
                    model
                        .draws
                        .snapshots
                        .iter()
                        .map(|s| model.draw_log_density(s, &a, &z))
                        .collect::<Result<_>>()?
                } else {
                    let ps = model.row_partial_stats(&y, missing);
                    model
                        .draws
                        .snapshots
                        .iter()
                        .map(|s| model.draw_log_density_partial(s, &ps))
                        .collect::<Result<_>>()?
                };
                per_class.push(per_draw);
            }
            let mut votes = vec![0usize; models.len()];
            for k in 0..n_draws {
                let mut best = 0;
                for c in 1..models.len() {
                    if per_class[c][k] > per_class[best][k] {
                        best = c;
                    }
                }
                votes[best] += 1;
            }
            let top = *votes.iter().max().unwrap();
            let tied: Vec<usize> = (0..models.len()).filter(|&c| votes[c] == top).collect();
            let label = if tied.len() == 1 {
                tied[0]
            } else {
                // Tie-break on posterior-mean log density, then class index.
                let mut best = tied[0];
                let mut best_ld = logsumexp(&per_class[best]);
                for &c in &tied[1..] {
                    let ld = logsumexp(&per_class[c]);
                    if ld > best_ld {
                        best = c;
                        best_ld = ld;
                    }
                }
                best
            };
            Ok(Classification { label, votes })
        })
        .collect()
}

/// Winning labels only; see [`classify_detailed`].
pub fn classify(models: &[FittedModel], data: &DataSet, _seed: u64) -> Result<Vec<usize>> {
    Ok(classify_detailed(models, data)?
        .into_iter()
        .map(|c| c.label)
        .collect())
}

/// Per-dimension inclusion probabilities: across the adaptation steps that
/// fired during the collection interval (after burn-in), the fraction of
/// (step, observation) pairs whose allocated node retained the dimension at
/// that step. Burn-in steps are excluded so that the slow early phase, where
/// redundant dimensions have not yet collapsed, does not bias the average.
pub fn inclusion_probabilities(model: &FittedModel) -> Result<Vec<f64>> {
    inclusion_from(&model.draws, model.hyper.burn_in)
}

fn inclusion_from(draws: &PosteriorDraws, burn_in: usize) -> Result<Vec<f64>> {
    let events: Vec<_> = draws
        .adaptation
        .iter()
        .filter(|ev| ev.iter > burn_in)
        .collect();
    if events.is_empty() {
        return Err(GeodeError::NoAdaptationSteps);
    }
    let d = draws.d;
    let mut acc = vec![0.0f64; d];
    for ev in &events {
        for (m, &c) in ev.retained_counts.iter().enumerate() {
            acc[m] += c as f64;
        }
    }
    let denom = (events.len() * draws.n_obs) as f64;
    Ok(acc.into_iter().map(|v| v / denom).collect())
}

/// Fits the full two-stage model: clustering tree, per-cell dictionary,
/// then the Gibbs sampler.
pub fn fit(data: &DataSet, hyper: &Hyperparams) -> Result<FittedModel> {
    hyper.validate()?;
    let tree = crate::tree::build_tree(data, hyper.max_depth, hyper.effective_min_cell())?;
    let dict = crate::dict::fit_dictionary(&tree, data, hyper.d_upper, hyper.seed)?;
    let stats = crate::dict::precompute_stats(&dict, data)?;
    let (draws, _) = crate::gibbs::run_gibbs(data, &tree, &dict, &stats, hyper)?;
    Ok(FittedModel {
        tree,
        dict,
        hyper: hyper.clone(),
        draws,
    })
}
