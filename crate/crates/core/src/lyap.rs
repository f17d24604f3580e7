//! Lyapunov spectrum of a delay-embedded trajectory.
//!
//! Local affine maps are fitted to the one-step images of each point's
//! nearest neighbors; their linear parts are chained through a recursive QR
//! factorisation and the log-diagonals of the R factors are averaged.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::DelayVectors;
use crate::error::{invalid, Error, Result};
use crate::neighbors::KdTree;

/// Exponents sorted in descending order and the Kaplan-Yorke dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovResult {
    pub exponents: Vec<f64>,
    pub ky_dimension: f64,
    pub skipped_points: usize,
}

impl LyapunovResult {
    pub fn sum(&self) -> f64 {
        self.exponents.iter().sum()
    }

    pub fn positive_count(&self) -> usize {
        self.exponents.iter().filter(|&&l| l > 0.0).count()
    }
}

/// Local Jacobians along the trajectory, in trajectory order.
#[derive(Debug, Clone)]
pub struct LocalJacobians {
    pub matrices: Vec<DMatrix<f64>>,
    /// Points whose neighbor set gave a rank-deficient fit.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianParams {
    pub n_neighbors: usize,
    /// Neighbors with `|n - m| <= theiler` are ignored.
    pub theiler: usize,
    /// Use at most this many trajectory points (from the start); `None` for all.
    pub max_points: Option<usize>,
}

impl JacobianParams {
    /// `2 (d_e + 1)` neighbors and a Theiler window of one delay.
    pub fn defaults_for(dv: &DelayVectors) -> Self {
        Self {
            n_neighbors: 2 * (dv.dim() + 1),
            theiler: dv.spec().tau,
            max_points: None,
        }
    }
}

/// Fits `x(n+1) ~ c + J x(n)` over the nearest neighbors of every trajectory
/// point and returns the `J`s.
pub fn local_jacobians(dv: &DelayVectors, n_neighbors: usize) -> Result<LocalJacobians> {
    local_jacobians_with(
        dv,
        &JacobianParams {
            n_neighbors,
            ..JacobianParams::defaults_for(dv)
        },
    )
}

pub fn local_jacobians_with(dv: &DelayVectors, p: &JacobianParams) -> Result<LocalJacobians> {
    if dv.rows() < 2 {
        return Err(Error::InsufficientData("need at least two delay vectors".into()));
    }
    let d = dv.dim();
    // only points with a successor take part
    let usable = dv.rows() - 1;
    let data = dv.as_slice();
    local_jacobians_from_pairs(&data[..usable * d], &data[d..], d, p)
}

/// Local Jacobians from explicit `(point, image)` pairs stored row-major.
/// Row `n` of `images` is the one-step image of row `n` of `points`; the
/// Theiler window applies to row indices.
pub fn local_jacobians_from_pairs(
    points: &[f64],
    images: &[f64],
    d: usize,
    p: &JacobianParams,
) -> Result<LocalJacobians> {
    if d == 0 || points.len() % d != 0 || images.len() != points.len() {
        return Err(Error::ShapeMismatch("points and images must be n x d".into()));
    }
    if p.n_neighbors < d + 1 {
        return Err(invalid(format!(
            "need at least {} neighbors for a {d}-dimensional affine fit",
            d + 1
        )));
    }
    let n_pts = points.len() / d;
    if n_pts == 0 {
        return Err(Error::InsufficientData("no points".into()));
    }
    let tree = KdTree::new(points, d);
    let n_eval = p.max_points.map_or(n_pts, |m| m.min(n_pts));

    let fits: Vec<Option<DMatrix<f64>>> = (0..n_eval)
        .into_par_iter()
        .map(|n| {
            let hits = tree.k_nearest(&points[n * d..(n + 1) * d], p.n_neighbors, |m| {
                m.abs_diff(n) <= p.theiler
            });
            if hits.len() < p.n_neighbors {
                return None;
            }
            fit_linear_part(points, images, d, hits.iter().map(|h| h.index), p.n_neighbors)
        })
        .collect();

    let skipped = fits.iter().filter(|f| f.is_none()).count();
    if skipped > 0 {
        warn!("{skipped} of {n_eval} points skipped: singular neighbor fit");
    }
    Ok(LocalJacobians {
        matrices: fits.into_iter().flatten().collect(),
        skipped,
    })
}

fn fit_linear_part(
    points: &[f64],
    images: &[f64],
    d: usize,
    neighbors: impl Iterator<Item = usize>,
    k: usize,
) -> Option<DMatrix<f64>> {
    let mut a = DMatrix::<f64>::zeros(k, d + 1);
    let mut b = DMatrix::<f64>::zeros(k, d);
    for (r, m) in neighbors.enumerate() {
        a[(r, 0)] = 1.0;
        for c in 0..d {
            a[(r, c + 1)] = points[m * d + c];
            b[(r, c)] = images[m * d + c];
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return None;
    }
    let coef = svd.solve(&b, 0.0).ok()?;
    // coef is (d+1) x d with row 0 the constant; J = coef[1..]^T
    let j = coef.rows(1, d).transpose();
    j.iter().all(|v| v.is_finite()).then_some(j)
}

/// Recursive QR: `J_k Q_{k-1} = Q_k R_k`, exponents are the time averages of
/// `log |R_k(i,i)|` divided by `dt`.
pub fn lyapunov_spectrum(jacobians: &[DMatrix<f64>], dt: f64) -> Result<LyapunovResult> {
    let Some(first) = jacobians.first() else {
        return Err(Error::EmptyJacobians);
    };
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    let d = first.nrows();
    let mut q = DMatrix::<f64>::identity(d, d);
    let mut acc = DVector::<f64>::zeros(d);
    for j in jacobians {
        if j.nrows() != d || j.ncols() != d {
            return Err(Error::ShapeMismatch("Jacobians must share one square shape".into()));
        }
        let qr = (j * &q).qr();
        let r = qr.r();
        for i in 0..d {
            acc[i] += r[(i, i)].abs().ln();
        }
        q = qr.q();
    }
    let scale = 1.0 / (jacobians.len() as f64 * dt);
    let mut exponents: Vec<f64> = acc.iter().map(|s| s * scale).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    let ky_dimension = kaplan_yorke_dimension(&exponents);
    Ok(LyapunovResult {
        exponents,
        ky_dimension,
        skipped_points: 0,
    })
}

/// Convenience wrapper: fit local Jacobians and accumulate the spectrum.
pub fn estimate_spectrum(dv: &DelayVectors, p: &JacobianParams, dt: f64) -> Result<LyapunovResult> {
    let jac = local_jacobians_with(dv, p)?;
    let mut res = lyapunov_spectrum(&jac.matrices, dt)?;
    res.skipped_points = jac.skipped;
    Ok(res)
}

/// `K + (sum_{i<=K} l_i) / |l_{K+1}|` with `K` the largest count whose partial
/// sum is nonnegative. Input need not be sorted.
pub fn kaplan_yorke_dimension(exponents: &[f64]) -> f64 {
    let mut sorted = exponents.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut partial = 0.0;
    for (k, &l) in sorted.iter().enumerate() {
        if partial + l < 0.0 {
            return if k == 0 { 0.0 } else { k as f64 + partial / l.abs() };
        }
        partial += l;
    }
    sorted.len() as f64
}
