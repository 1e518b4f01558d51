//! Synthetic data generators with machine-readable truth files.
//!
//! * `1`–`6` — linear Gaussian factor data: `y = Λη + ε` with Λ a D×p
//!   matrix of N(0, 25) entries, η ∼ N(0, I_p), and noise variance drawn
//!   once per data set as σ² = χ²₁/10.
//! * `7`–`9` — a 3-D Swissroll `(t·cos t, w, t·sin t)`, `t ∼ U[1.5π, 4.5π]`,
//!   `w ∼ U[0, 21]`, with optional per-coordinate N(0, 2.5×10⁻⁵) noise,
//!   pushed to D dimensions by a random linear map.
//! * `threemix` — three equally weighted Gaussian factor components with
//!   intrinsic dimensions (3, 5, 7), component means at pairwise distance
//!   50, and noise variance 0.1. The exact component layout is our own
//!   construction; the truth file flags it as such.
//! * `parabola` — points on `(t, t²)` in the plane, `t ∼ U[−2, 2]`, with
//!   optional N(0, 10⁻⁴) noise.
//!
//! The optional missing-data mask hides an exactly-20% fraction of cells,
//! chosen uniformly without replacement, never leaving a row fully hidden.

use geode::DataSet;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::{CliError, Result};

/// Fraction of cells hidden when the missing-data mask is requested.
pub const MISSING_FRACTION: f64 = 0.2;
/// Per-coordinate noise standard deviation on the Swissroll.
pub const SWISSROLL_NOISE_SD: f64 = 0.005; // variance 2.5e−5

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioId {
    /// Linear Gaussian factor data (ids 1–6).
    Linear(u8),
    /// Swissroll embeddings (ids 7–9).
    Swissroll(u8),
    ThreeMix,
    Parabola,
}

impl std::str::FromStr for ScenarioId {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "2" | "3" | "4" | "5" | "6" => Ok(ScenarioId::Linear(s.parse().unwrap())),
            "7" | "8" | "9" => Ok(ScenarioId::Swissroll(s.parse().unwrap())),
            "threemix" => Ok(ScenarioId::ThreeMix),
            "parabola" => Ok(ScenarioId::Parabola),
            other => Err(CliError::Config(format!(
                "invalid scenario {other:?}: expected 1-9, \"threemix\", or \"parabola\""
            ))),
        }
    }
}

/// A generated data set plus everything needed to check it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: DataSet,
    pub truth: serde_json::Value,
    /// Component labels where the generator has components.
    pub labels: Option<Vec<usize>>,
}

/// Generation settings beyond the scenario id.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub n: usize,
    pub dim: usize,
    /// Intrinsic dimension for the linear scenarios; ignored elsewhere.
    pub p: usize,
    pub seed: u64,
    /// Hide 20% of cells at random.
    pub missing: bool,
    /// Additive observation noise on/off.
    pub noise: bool,
}

pub fn simulate(id: ScenarioId, opt: SimOptions) -> Result<Generated> {
    if opt.n == 0 {
        return Err(CliError::Config("n must be ≥ 1".into()));
    }
    let mut gen = match id {
        ScenarioId::Linear(k) => linear_factor(k, opt),
        ScenarioId::Swissroll(k) => swissroll(k, opt),
        ScenarioId::ThreeMix => threemix(opt),
        ScenarioId::Parabola => parabola(opt),
    }?;
    if opt.missing {
        let mask_seed = opt.seed ^ 0x6d61_736b; // distinct stream for the mask
        let (masked, fraction) = apply_mask(gen.data, mask_seed)?;
        gen.data = masked;
        gen.truth["missing_fraction"] = json!(fraction);
    }
    Ok(gen)
}

fn linear_factor(k: u8, opt: SimOptions) -> Result<Generated> {
    let SimOptions {
        n, dim, p, seed, ..
    } = opt;
    if p == 0 || p > dim {
        return Err(CliError::Config(format!(
            "scenario {k}: need 1 ≤ p ≤ D, got p={p}, D={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = DMatrix::from_fn(dim, p, |_, _| 5.0 * rng.sample::<f64, _>(StandardNormal));
    // 10σ² ∼ χ²₁.
    let chi: f64 = rng.sample::<f64, _>(StandardNormal);
    let sigma2 = if opt.noise { chi * chi / 10.0 } else { 0.0 };
    let sigma = sigma2.sqrt();
    let mut values = DMatrix::<f64>::zeros(dim, n);
    for i in 0..n {
        let eta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut col = &lambda * eta;
        for r in 0..dim {
            col[r] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        values.set_column(i, &col);
    }
    let truth = json!({
        "scenario": k,
        "kind": "linear_factor",
        "n": n, "dim": dim, "p": p, "seed": seed,
        "lambda_entry_sd": 5.0,
        "sigma2": sigma2,
        "lambda": lambda.as_slice(),
    });
    Ok(Generated {
        data: DataSet::complete(values)?,
        truth,
        labels: None,
    })
}

fn swissroll(k: u8, opt: SimOptions) -> Result<Generated> {
    let SimOptions { n, dim, seed, .. } = opt;
    if dim < 3 {
        return Err(CliError::Config(format!(
            "scenario {k}: Swissroll needs D ≥ 3, got {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = DMatrix::from_fn(dim, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut t = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut values = DMatrix::<f64>::zeros(dim, n);
    let sd = if opt.noise { SWISSROLL_NOISE_SD } else { 0.0 };
    for i in 0..n {
        let ti = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.gen::<f64>());
        let wi = 21.0 * rng.gen::<f64>();
        t.push(ti);
        w.push(wi);
        let mut eta = DVector::from_column_slice(&[ti * ti.cos(), wi, ti * ti.sin()]);
        for r in 0..3 {
            eta[r] += sd * rng.sample::<f64, _>(StandardNormal);
        }
        values.set_column(i, &(&lambda * eta));
    }
    let truth = json!({
        "scenario": k,
        "kind": "swissroll",
        "n": n, "dim": dim, "seed": seed,
        "t": t, "w": w,
        "noise_sd": sd,
        "lambda": lambda.as_slice(),
        "parametrization": "eta(t, w) = (t cos t, w, t sin t), t ~ U[1.5pi, 4.5pi], w ~ U[0, 21]",
    });
    Ok(Generated {
        data: DataSet::complete(values)?,
        truth,
        labels: None,
    })
}

fn threemix(opt: SimOptions) -> Result<Generated> {
    let SimOptions { n, dim, seed, .. } = opt;
    let dims = [3usize, 5, 7];
    if dim <= 7 {
        return Err(CliError::Config(format!(
            "threemix needs D > 7, got {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Component means on a circle of radius 50/√3 in a random 2-plane:
    // pairwise distances are exactly 50.
    let q1 = random_unit(dim, &mut rng);
    let q2 = orthogonal_unit(&q1, &mut rng);
    let radius = 50.0 / 3.0f64.sqrt();
    let centers: Vec<DVector<f64>> = (0..3)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            (&q1 * th.cos() + &q2 * th.sin()) * radius
        })
        .collect();
    let lambdas: Vec<DMatrix<f64>> = dims
        .iter()
        .map(|&dk| DMatrix::from_fn(dim, dk, |_, _| 5.0 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let sigma2: f64 = if opt.noise { 0.1 } else { 0.0 };
    let sigma = sigma2.sqrt();

    let mut labels = Vec::with_capacity(n);
    let mut values = DMatrix::<f64>::zeros(dim, n);
    for i in 0..n {
        let k = rng.gen_range(0..3usize);
        labels.push(k);
        let eta = DVector::from_fn(dims[k], |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut col = &centers[k] + &lambdas[k] * eta;
        for r in 0..dim {
            col[r] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        values.set_column(i, &col);
    }
    let truth = json!({
        "scenario": "threemix",
        "kind": "three_component_factor_mixture",
        "note": "equal weights, means at pairwise distance 50, intrinsic dims (3,5,7), \
                 sigma2 0.1",
        "n": n, "dim": dim, "seed": seed,
        "intrinsic_dims": dims,
        "sigma2": sigma2,
        "centers": centers.iter().map(|c| c.as_slice().to_vec()).collect::<Vec<_>>(),
        "labels": labels,
    });
    Ok(Generated {
        data: DataSet::complete(values)?,
        truth,
        labels: Some(labels),
    })
}

fn parabola(opt: SimOptions) -> Result<Generated> {
    let SimOptions { n, dim, seed, .. } = opt;
    if dim != 2 {
        return Err(CliError::Config(format!(
            "parabola is a D=2 scenario, got D={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = if opt.noise { 0.01 } else { 0.0 };
    let mut t = Vec::with_capacity(n);
    let mut values = DMatrix::<f64>::zeros(2, n);
    for i in 0..n {
        let ti = -2.0 + 4.0 * rng.gen::<f64>();
        t.push(ti);
        values[(0, i)] = ti + sd * rng.sample::<f64, _>(StandardNormal);
        values[(1, i)] = ti * ti + sd * rng.sample::<f64, _>(StandardNormal);
    }
    let truth = json!({
        "scenario": "parabola",
        "kind": "parabola",
        "n": n, "dim": 2, "seed": seed,
        "noise_sd": sd,
        "t": t,
    });
    Ok(Generated {
        data: DataSet::complete(values)?,
        truth,
        labels: None,
    })
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

fn orthogonal_unit<R: Rng>(q1: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    loop {
        let mut v = DVector::from_fn(q1.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        v -= q1 * q1.dot(&v);
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Hides exactly ⌊0.2·n·D⌋ cells uniformly at random, repairing any row
/// that would lose all its entries by trading one of its hidden cells for
/// an unhidden cell elsewhere (the total count is preserved).
fn apply_mask(data: DataSet, seed: u64) -> Result<(DataSet, f64)> {
    let n = data.len();
    let dim = data.dim();
    let total = n * dim;
    let k = ((total as f64) * MISSING_FRACTION).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = vec![false; total];
    for idx in sample_indices(&mut rng, total, k) {
        hidden[idx] = true;
    }
    // Repair fully hidden rows.
    let cell = |i: usize, j: usize| i * dim + j;
    for i in 0..n {
        if (0..dim).all(|j| hidden[cell(i, j)]) {
            let unhide = rng.gen_range(0..dim);
            hidden[cell(i, unhide)] = false;
            // Re-hide somewhere legal to keep the exact count.
            loop {
                let i2 = rng.gen_range(0..n);
                let j2 = rng.gen_range(0..dim);
                if hidden[cell(i2, j2)] {
                    continue;
                }
                let would_fill = (0..dim).filter(|&j| hidden[cell(i2, j)]).count() + 1;
                if would_fill < dim {
                    hidden[cell(i2, j2)] = true;
                    break;
                }
            }
        }
    }
    let missing: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..dim).filter(|&j| hidden[cell(i, j)]).collect())
        .collect();
    let masked = DataSet::with_missing(data.values().clone(), missing)?;
    let fraction = k as f64 / total as f64;
    Ok((masked, fraction))
}
