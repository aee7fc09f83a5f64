//! Small numerical helpers: order-independent sums, deterministic parallel
//! reductions and standardized least squares.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Rows per work item in parallel reductions. Fixed so that partial sums
/// are combined in the same order whatever the thread count.
pub(crate) const CHUNK: usize = 1024;

/// Sum that does not depend on the order of `terms`.
pub(crate) fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Mean over `n` items of `g(i)`, reduced in fixed chunks.
pub(crate) fn par_mean<F>(n: usize, g: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n == 0 {
        return 0.0;
    }
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(&g).sum::<f64>()
        })
        .collect();
    partial.iter().sum::<f64>() / n as f64
}

/// Ordinary least squares fitted on standardized feature columns.
///
/// Columns whose spread is negligible relative to their level are dropped,
/// which removes the collinearity between the intercept and a law summary
/// that happens to be constant across samples.
#[derive(Debug, Clone)]
pub(crate) struct LeastSquares {
    center: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<bool>,
    /// coefficients per target, over [intercept, active standardized columns]
    coef: Vec<Vec<f64>>,
}

impl LeastSquares {
    /// Fit `targets[r][i] ~ features[i*p..(i+1)*p]` for every target column r.
    /// Weights are uniform. An intercept is always included.
    pub(crate) fn fit(features: &[f64], p: usize, targets: &[&[f64]]) -> Self {
        let n = if p == 0 { targets.first().map_or(0, |t| t.len()) } else { features.len() / p };
        let nt = targets.len();
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let mut active = vec![false; p];
        if n > 0 {
            for c in 0..p {
                let mean = par_mean(n, |i| features[i * p + c]);
                let var = par_mean(n, |i| {
                    let d = features[i * p + c] - mean;
                    d * d
                });
                center[c] = mean;
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + mean.abs()) {
                    scale[c] = sd;
                    active[c] = true;
                }
            }
        }
        let cols: Vec<usize> = (0..p).filter(|&c| active[c]).collect();
        let q = cols.len() + 1;
        // accumulate [G | B] in fixed chunks
        let width = q * q + q * nt;
        let row = |i: usize, out: &mut [f64]| {
            out[0] = 1.0;
            for (a, &c) in cols.iter().enumerate() {
                out[a + 1] = (features[i * p + c] - center[c]) / scale[c];
            }
        };
        let partial: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|ch| {
                let mut acc = vec![0.0; width];
                let mut phi = vec![0.0; q];
                let lo = ch * CHUNK;
                let hi = (lo + CHUNK).min(n);
                for i in lo..hi {
                    row(i, &mut phi);
                    for a in 0..q {
                        for b in a..q {
                            acc[a * q + b] += phi[a] * phi[b];
                        }
                        for (r, t) in targets.iter().enumerate() {
                            acc[q * q + r * q + a] += phi[a] * t[i];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut acc = vec![0.0; width];
        for part in &partial {
            for (s, v) in acc.iter_mut().zip(part) {
                *s += v;
            }
        }
        for a in 0..q {
            for b in 0..a {
                acc[a * q + b] = acc[b * q + a];
            }
        }
        // pseudo-inverse through the symmetric eigendecomposition of the Gram matrix
        let g = DMatrix::from_row_slice(q, q, &acc[..q * q]);
        let eig = g.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = (lmax * 1e-12).max(f64::MIN_POSITIVE);
        let coef = (0..nt)
            .map(|r| {
                if n == 0 {
                    return vec![0.0; q];
                }
                let b = DVector::from_row_slice(&acc[q * q + r * q..q * q + (r + 1) * q]);
                let mut proj = eig.eigenvectors.transpose() * b;
                for (v, &l) in proj.iter_mut().zip(eig.eigenvalues.iter()) {
                    *v = if l > cut { *v / l } else { 0.0 };
                }
                (&eig.eigenvectors * proj).iter().copied().collect()
            })
            .collect();
        Self { center, scale, active, coef }
    }

    /// Prediction of target `r` at one feature row.
    pub(crate) fn predict(&self, r: usize, x: &[f64]) -> f64 {
        let c = &self.coef[r];
        let mut v = c[0];
        let mut a = 1;
        for (col, &on) in self.active.iter().enumerate() {
            if on {
                v += c[a] * (x[col] - self.center[col]) / self.scale[col];
                a += 1;
            }
        }
        v
    }

    /// Names of the retained columns, for diagnostics.
    #[cfg(test)]
    pub(crate) fn active_columns(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&c| self.active[c]).collect()
    }
}
