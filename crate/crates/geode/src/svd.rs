//! Randomized rank-d SVD via a Gaussian range finder with power iterations.
//!
//! The target is the top right-singular subspace of a (typically short and
//! very wide) centred cell matrix, so the sketch is applied from the left:
//! `Q = orth(MᵀΩ)` is refined by subspace iteration on `MᵀM`, and the small
//! SVD of `MQ` recovers singular values and rotated right vectors. When the
//! matrix is small relative to the sketch width the exact SVD is cheaper and
//! is used instead, which also keeps results reproducible across callers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{GeodeError, Result};

/// Computes the top-`d` singular values and right singular vectors of `m`
/// (`n_c × D`, rows are observations). `oversample` widens the sketch and
/// `power_iters` sharpens it against slowly decaying spectra.
pub fn randomized_rank_d_svd(
    m: &DMatrix<f64>,
    d: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    let max_rank = rows.min(cols);
    if d == 0 || d > max_rank {
        return Err(GeodeError::InvalidRank {
            requested: d,
            max: max_rank,
        });
    }
    let sketch = (d + oversample).min(max_rank);

    if max_rank <= 4 * sketch {
        return exact_top_d(m, d);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(rows, sketch, |_, _| rng.sample::<f64, _>(StandardNormal));

    // Range of Mᵀ, refined by power iteration on MᵀM with re-orthonormalisation.
    let mut q = orthonormalize(m.transpose() * omega);
    for _ in 0..power_iters {
        let t = m * &q;
        q = orthonormalize(m.transpose() * t);
    }

    // M ≈ (MQ)Qᵀ; the small SVD of MQ gives the spectrum and the rotation.
    let b = m * &q; // n_c × sketch
    let svd = b.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut pairs: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut values = DVector::zeros(d);
    let mut vectors = DMatrix::zeros(cols, d);
    for (out_k, &(s, k)) in pairs.iter().take(d).enumerate() {
        values[out_k] = s;
        let w_k = v_t.row(k).transpose(); // sketch-space right vector
        vectors.set_column(out_k, &(&q * w_k));
    }
    Ok((values, vectors))
}

/// Exact thin SVD, top `d` components sorted by descending singular value.
fn exact_top_d(m: &DMatrix<f64>, d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut pairs: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut values = DVector::zeros(d);
    let mut vectors = DMatrix::zeros(m.ncols(), d);
    for (out_k, &(s, k)) in pairs.iter().take(d).enumerate() {
        values[out_k] = s;
        vectors.set_column(out_k, &v_t.row(k).transpose());
    }
    Ok((values, vectors))
}

/// Orthonormal basis for the column span via thin QR.
fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    let ncols = y.ncols();
    let qr = y.qr();
    let q = qr.q();
    // Thin QR already returns min(rows, cols) columns.
    debug_assert_eq!(q.ncols(), ncols.min(q.nrows()));
    q
}
