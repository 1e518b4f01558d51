//! Multiscale principal-component regression baseline.
//!
//! At a chosen tree scale, every cell of the effective partition (cells at
//! that scale plus leaves that stopped above it) learns an ordinary
//! least-squares regression of the response coordinate on the cell's `d`
//! local principal scores, computed from the dictionary basis restricted
//! to the predictor coordinates. Test rows are routed to the cell with the
//! nearest center in predictor space. Cells too small for the regression
//! fall back to predicting their response mean.

use geode::dict::MultiscaleDictionary;
use geode::{ClusterTree, DataSet};
use nalgebra::{DMatrix, DVector};

use crate::{CliError, Result};

/// Cells forming the partition "as seen" at `scale`: nodes at that scale
/// plus shallower leaves.
pub fn effective_partition(tree: &ClusterTree, scale: usize) -> Vec<usize> {
    (0..tree.node_count())
        .filter(|&id| {
            let node = tree.node(id);
            node.scale == scale || (node.scale < scale && node.is_leaf())
        })
        .collect()
}

struct CellModel {
    /// Center and basis restricted to predictor coordinates.
    center: DVector<f64>,
    basis: DMatrix<f64>,
    /// Intercept followed by one coefficient per local score; `None` means
    /// the cell predicts its response mean.
    coefs: Option<DVector<f64>>,
    mean_response: f64,
}

/// Predictive mean squared error of the baseline at one scale. The test
/// rows' response coordinate is the ground truth; predictions never read
/// it.
pub fn mpcr_mse(
    tree: &ClusterTree,
    dict: &MultiscaleDictionary,
    train: &DataSet,
    test: &DataSet,
    response: usize,
    scale: usize,
) -> Result<f64> {
    let dim = dict.dim;
    if train.dim() != dim || test.dim() != dim {
        return Err(CliError::Data(format!(
            "dimension mismatch: dictionary D={dim}, train D={}, test D={}",
            train.dim(),
            test.dim()
        )));
    }
    if response >= dim {
        return Err(CliError::Config(format!(
            "response coordinate {response} out of range for D={dim}"
        )));
    }
    if scale > tree.depth() {
        return Err(CliError::Config(format!(
            "scale {scale} exceeds tree depth {}",
            tree.depth()
        )));
    }
    if test.is_empty() {
        return Err(CliError::Data("no test rows".into()));
    }
    let predictors: Vec<usize> = (0..dim).filter(|&j| j != response).collect();
    let d = dict.d;

    let cells = effective_partition(tree, scale);
    let mut models = Vec::with_capacity(cells.len());
    for &id in &cells {
        let nd = dict.node(id);
        let center = DVector::from_fn(predictors.len(), |r, _| nd.mu[predictors[r]]);
        let basis = DMatrix::from_fn(predictors.len(), d, |r, c| nd.basis[(predictors[r], c)]);
        let rows = &tree.node(id).indices;

        let mean_response = if rows.is_empty() {
            0.0
        } else {
            rows.iter()
                .map(|&i| train.values()[(response, i)])
                .sum::<f64>()
                / rows.len() as f64
        };

        // Need more rows than unknowns for a meaningful fit.
        let coefs = if rows.len() > d + 1 {
            let mut design = DMatrix::<f64>::zeros(rows.len(), d + 1);
            let mut rhs = DVector::<f64>::zeros(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                let x = DVector::from_fn(predictors.len(), |k, _| {
                    train.values()[(predictors[k], i)]
                });
                let score = basis.transpose() * (&x - &center);
                design[(r, 0)] = 1.0;
                for c in 0..d {
                    design[(r, c + 1)] = score[c];
                }
                rhs[r] = train.values()[(response, i)];
            }
            design
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .ok()
                .map(|m| m.column(0).into_owned())
        } else {
            None
        };
        models.push(CellModel {
            center,
            basis,
            coefs,
            mean_response,
        });
    }

    let mut se = 0.0;
    for i in 0..test.len() {
        let x = DVector::from_fn(predictors.len(), |k, _| test.values()[(predictors[k], i)]);
        // Nearest center in predictor space decides the cell.
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (k, cm) in models.iter().enumerate() {
            let d2 = (&x - &cm.center).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        let cm = &models[best];
        let pred = match &cm.coefs {
            Some(beta) => {
                let score = cm.basis.transpose() * (&x - &cm.center);
                let mut v = beta[0];
                for c in 0..score.len() {
                    v += beta[c + 1] * score[c];
                }
                v
            }
            None => cm.mean_response,
        };
        let truth = test.values()[(response, i)];
        se += (pred - truth) * (pred - truth);
    }
    Ok(se / test.len() as f64)
}

/// The MSE-vs-scale curve over every scale of the tree.
pub fn mpcr_curve(
    tree: &ClusterTree,
    dict: &MultiscaleDictionary,
    train: &DataSet,
    test: &DataSet,
    response: usize,
) -> Result<Vec<f64>> {
    (0..=tree.depth())
        .map(|s| mpcr_mse(tree, dict, train, test, response, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use geode::dict::fit_dictionary;
    use geode::tree::build_tree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Linear response on a plane: y_resp = 2 + 3·s₁ − s₂ exactly.
    fn planar_problem(n: usize, seed: u64) -> (DataSet, DataSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let mut m = DMatrix::<f64>::zeros(dim, n);
            for i in 0..n {
                let s1: f64 = rng.sample(StandardNormal);
                let s2: f64 = rng.sample(StandardNormal);
                // Predictors live on a 2-plane in coordinates 0..5 (skipping
                // the response coordinate 5).
                m[(0, i)] = s1;
                m[(1, i)] = s2;
                m[(2, i)] = s1 + s2;
                m[(3, i)] = s1 - s2;
                m[(4, i)] = 0.5 * s1;
                m[(5, i)] = 2.0 + 3.0 * s1 - s2;
            }
            DataSet::complete(m).unwrap()
        };
        (make(&mut rng, n), make(&mut rng, 40))
    }

    #[test]
    fn global_pcr_is_exact_on_noiseless_plane() {
        let (train, test) = planar_problem(200, 1);
        let tree = build_tree(&train, 0, 2).unwrap();
        let dict = fit_dictionary(&tree, &train, 2, 0).unwrap();
        let mse = mpcr_mse(&tree, &dict, &train, &test, 5, 0).unwrap();
        assert!(mse < 1e-10, "mse {mse}");
    }

    #[test]
    fn curve_has_one_entry_per_scale() {
        let (train, test) = planar_problem(300, 2);
        let tree = build_tree(&train, 2, 4).unwrap();
        let dict = fit_dictionary(&tree, &train, 2, 0).unwrap();
        let curve = mpcr_curve(&tree, &dict, &train, &test, 5).unwrap();
        assert_eq!(curve.len(), tree.depth() + 1);
        // The plane is global, so every scale solves it essentially exactly.
        for (s, &m) in curve.iter().enumerate() {
            assert!(m < 1e-8, "scale {s}: mse {m}");
        }
    }

    #[test]
    fn effective_partition_covers_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(3, 90, |r, c| {
            (if c % 2 == 0 { 6.0 } else { -6.0 }) * (r == 0) as u8 as f64
                + rng.sample::<f64, _>(StandardNormal)
        });
        let data = DataSet::complete(m).unwrap();
        let tree = build_tree(&data, 3, 20).unwrap();
        for s in 0..=tree.depth() {
            let cells = effective_partition(&tree, s);
            let mut seen = vec![false; 90];
            for &id in &cells {
                for &i in &tree.node(id).indices {
                    assert!(!seen[i], "index {i} in two cells at scale {s}");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&x| x), "scale {s} missed an index");
        }
    }

    #[test]
    fn tiny_cells_fall_back_to_cell_mean() {
        // Two clusters of 3 points each (too few for d+2 = 4 rows after
        // the split): predictions at scale 1 are the cell means.
        let mut cols = Vec::new();
        for k in 0..3 {
            cols.extend_from_slice(&[10.0 + 0.1 * k as f64, 1.0, 5.0]);
        }
        for k in 0..3 {
            cols.extend_from_slice(&[-10.0 - 0.1 * k as f64, 1.0, 9.0]);
        }
        let train = DataSet::complete(DMatrix::from_vec(3, 6, cols)).unwrap();
        let tree = build_tree(&train, 1, 3).unwrap();
        assert_eq!(tree.depth(), 1);
        let dict = fit_dictionary(&tree, &train, 2, 0).unwrap();
        let test = DataSet::complete(DMatrix::from_vec(
            3,
            2,
            vec![10.05, 1.0, 0.0, -10.05, 1.0, 0.0],
        ))
        .unwrap();
        // Scale 1: cells of 3 rows < d+2 → mean fallback (5 and 9).
        let mse = mpcr_mse(&tree, &dict, &train, &test, 2, 1).unwrap();
        let expect = (5.0f64.powi(2) + 9.0f64.powi(2)) / 2.0;
        assert!((mse - expect).abs() < 1e-9, "mse {mse} vs {expect}");
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let (train, test) = planar_problem(50, 4);
        let tree = build_tree(&train, 1, 2).unwrap();
        let dict = fit_dictionary(&tree, &train, 2, 0).unwrap();
        assert!(matches!(
            mpcr_mse(&tree, &dict, &train, &test, 6, 0),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            mpcr_mse(&tree, &dict, &train, &test, 5, 9),
            Err(CliError::Config(_))
        ));
    }
}
