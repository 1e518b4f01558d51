//! Observation storage with an optional per-entry missingness mask.

use nalgebra::{DMatrix, DVector};

use crate::error::{GeodeError, Result};

/// `n` observations in ambient dimension `D`, stored as the columns of a
/// `D × n` matrix, with a sorted list of missing coordinates per observation.
///
/// Entries flagged missing are normalised to `0.0` in storage; they are never
/// read directly. Completion for the geometry stage (tree building and
/// dictionary fitting) is done explicitly via [`DataSet::completed`].
#[derive(Debug, Clone)]
pub struct DataSet {
    values: DMatrix<f64>,
    missing: Vec<Vec<usize>>,
    n_partial: usize,
}

impl DataSet {
    /// Wraps a fully observed `D × n` matrix (columns are observations).
    pub fn complete(values: DMatrix<f64>) -> Result<Self> {
        let n = values.ncols();
        Self::with_missing(values, vec![Vec::new(); n])
    }

    /// Wraps a `D × n` matrix together with per-observation missing
    /// coordinate lists. Lists are sorted and deduplicated; masked entries
    /// are zeroed in storage. Every observation must keep at least one
    /// observed coordinate, and every unmasked entry must be finite.
    pub fn with_missing(mut values: DMatrix<f64>, mut missing: Vec<Vec<usize>>) -> Result<Self> {
        let (dim, n) = (values.nrows(), values.ncols());
        if dim == 0 || n == 0 {
            return Err(GeodeError::EmptyData);
        }
        if missing.len() != n {
            return Err(GeodeError::BadMask(format!(
                "mask has {} rows but data has {} observations",
                missing.len(),
                n
            )));
        }
        let mut n_partial = 0;
        for (i, mask) in missing.iter_mut().enumerate() {
            mask.sort_unstable();
            mask.dedup();
            if let Some(&worst) = mask.last() {
                if worst >= dim {
                    return Err(GeodeError::BadMask(format!(
                        "coordinate {worst} out of range for dimension {dim}"
                    )));
                }
            }
            if mask.len() == dim {
                return Err(GeodeError::BadMask(format!(
                    "observation {i} has no observed entries"
                )));
            }
            if !mask.is_empty() {
                n_partial += 1;
            }
            for &r in mask.iter() {
                values[(r, i)] = 0.0;
            }
        }
        for i in 0..n {
            let mask = &missing[i];
            for r in 0..dim {
                if !mask.contains(&r) && !values[(r, i)].is_finite() {
                    return Err(GeodeError::NonFiniteInput("data matrix"));
                }
            }
        }
        Ok(Self {
            values,
            missing,
            n_partial,
        })
    }

    /// Ambient dimension `D`.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Number of observations `n`.
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Number of observations with at least one missing coordinate.
    pub fn partial_count(&self) -> usize {
        self.n_partial
    }

    /// Raw storage (masked entries read as 0).
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Observation `i` as stored.
    pub fn column(&self, i: usize) -> DVector<f64> {
        self.values.column(i).into_owned()
    }

    /// Sorted missing coordinates of observation `i` (empty when complete).
    pub fn missing(&self, i: usize) -> &[usize] {
        &self.missing[i]
    }

    pub fn is_complete(&self, i: usize) -> bool {
        self.missing[i].is_empty()
    }

    /// Observed coordinates of observation `i`, ascending.
    pub fn observed(&self, i: usize) -> Vec<usize> {
        let mask = &self.missing[i];
        (0..self.dim()).filter(|r| !mask.contains(r)).collect()
    }

    /// Per-coordinate mean over observed entries. Coordinates observed
    /// nowhere fall back to 0.
    pub fn feature_means(&self) -> DVector<f64> {
        let dim = self.dim();
        let mut sums = vec![0.0; dim];
        let mut counts = vec![0usize; dim];
        for i in 0..self.len() {
            let col = self.values.column(i);
            let mask = &self.missing[i];
            let mut m = 0;
            for r in 0..dim {
                if m < mask.len() && mask[m] == r {
                    m += 1;
                    continue;
                }
                sums[r] += col[r];
                counts[r] += 1;
            }
        }
        DVector::from_iterator(
            dim,
            sums.iter()
                .zip(&counts)
                .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }),
        )
    }

    /// A copy of the data with missing entries filled by the per-coordinate
    /// observed mean. Used by the geometry stage, which needs complete
    /// vectors; the sampler itself works from exact per-coordinate
    /// statistics and never reads these fill-ins.
    pub fn completed(&self) -> DMatrix<f64> {
        if self.n_partial == 0 {
            return self.values.clone();
        }
        let means = self.feature_means();
        let mut filled = self.values.clone();
        for i in 0..self.len() {
            for &r in &self.missing[i] {
                filled[(r, i)] = means[r];
            }
        }
        filled
    }
}
