//! Delay embedding: choosing the delay from average mutual information,
//! choosing the dimension from global false nearest neighbors, and building
//! the delay vectors themselves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::min_max;
use crate::error::{invalid, Error, Result};
use crate::neighbors::KdTree;

/// Delay (in samples) and embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub tau: usize,
    pub d_e: usize,
}

impl EmbeddingSpec {
    pub fn new(tau: usize, d_e: usize) -> Result<Self> {
        if tau == 0 || d_e == 0 {
            return Err(invalid("tau and d_e must be at least 1"));
        }
        Ok(Self { tau, d_e })
    }

    /// Samples spanned by one delay vector.
    pub fn window(&self) -> usize {
        (self.d_e - 1) * self.tau + 1
    }
}

/// Mutual information (bits) between `s(n)` and `s(n + tau)` for each tau.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmiCurve {
    pub taus: Vec<usize>,
    pub ami_bits: Vec<f64>,
}

impl AmiCurve {
    pub fn at(&self, tau: usize) -> Option<f64> {
        self.taus
            .iter()
            .position(|&t| t == tau)
            .map(|i| self.ami_bits[i])
    }
}

/// Fraction of false nearest neighbors per trial dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnCurve {
    pub dims: Vec<usize>,
    pub fnn_fraction: Vec<f64>,
}

/// Row-major delay matrix; row `n` is `[s(n), s(n+tau), ..., s(n+(d_e-1)tau)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayVectors {
    data: Vec<f64>,
    rows: usize,
    spec: EmbeddingSpec,
}

impl DelayVectors {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.spec.d_e
    }

    pub fn spec(&self) -> EmbeddingSpec {
        self.spec
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let d = self.spec.d_e;
        &self.data[n * d..(n + 1) * d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn bin_index(v: f64, lo: f64, width: f64, n_bins: usize) -> usize {
    (((v - lo) / width) as usize).min(n_bins - 1)
}

/// Histogram estimate of the average mutual information for `tau = 1..=tau_max`.
///
/// Both coordinates share `n_bins` uniform bins over the data range; the
/// marginals are sums of the joint histogram and empty cells contribute zero.
pub fn average_mutual_information(
    values: &[f64],
    tau_max: usize,
    n_bins: usize,
) -> Result<AmiCurve> {
    if n_bins < 2 {
        return Err(invalid("need at least two bins"));
    }
    if tau_max == 0 {
        return Err(invalid("tau_max must be at least 1"));
    }
    if values.len() < tau_max + 1 {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot support tau_max = {tau_max}",
            values.len()
        )));
    }
    if 2 * tau_max >= values.len() {
        return Err(invalid("tau_max must be less than half the series length"));
    }
    let (lo, hi) = min_max(values);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let bins: Vec<usize> = values
        .iter()
        .map(|&v| bin_index(v, lo, width, n_bins))
        .collect();

    let ami_bits = (1..=tau_max)
        .into_par_iter()
        .map(|tau| ami_from_bins(&bins, tau, n_bins))
        .collect();
    Ok(AmiCurve {
        taus: (1..=tau_max).collect(),
        ami_bits,
    })
}

fn ami_from_bins(bins: &[usize], tau: usize, n_bins: usize) -> f64 {
    let n_pairs = bins.len() - tau;
    let mut joint = vec![0u64; n_bins * n_bins];
    for (a, b) in bins.iter().zip(&bins[tau..]) {
        joint[a * n_bins + b] += 1;
    }
    let mut row = vec![0u64; n_bins];
    let mut col = vec![0u64; n_bins];
    for i in 0..n_bins {
        for j in 0..n_bins {
            let c = joint[i * n_bins + j];
            row[i] += c;
            col[j] += c;
        }
    }
    let n = n_pairs as f64;
    let mut ami = 0.0;
    for i in 0..n_bins {
        for j in 0..n_bins {
            let c = joint[i * n_bins + j];
            if c == 0 {
                continue;
            }
            // P log2(P / (P1 P2)) with counts: (c/n) log2(c n / (r c'))
            let p = c as f64 / n;
            ami += p * ((c as f64 * n) / (row[i] as f64 * col[j] as f64)).log2();
        }
    }
    // rounding can leave a tiny negative value for independent data
    ami.max(0.0)
}

/// Smallest `tau` that is a strict interior local minimum, or `None`.
pub fn first_minimum(curve: &AmiCurve) -> Result<Option<usize>> {
    let a = &curve.ami_bits;
    if a.len() < 3 {
        return Err(invalid("need at least three points to find a minimum"));
    }
    Ok((1..a.len() - 1)
        .find(|&i| a[i - 1] > a[i] && a[i] < a[i + 1])
        .map(|i| curve.taus[i]))
}

/// Builds the delay vectors by exact index arithmetic.
pub fn delay_vectors(values: &[f64], spec: EmbeddingSpec) -> Result<DelayVectors> {
    let window = spec.window();
    if values.len() < window {
        return Err(Error::InsufficientData(format!(
            "series of length {} is shorter than one delay vector ({window})",
            values.len()
        )));
    }
    let rows = values.len() - (window - 1);
    let d = spec.d_e;
    let mut data = Vec::with_capacity(rows * d);
    for n in 0..rows {
        for q in 0..d {
            data.push(values[n + q * spec.tau]);
        }
    }
    Ok(DelayVectors { data, rows, spec })
}

/// Tuning for [`false_nearest_neighbors_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnnParams {
    pub tau: usize,
    pub d_max: usize,
    /// Ratio test threshold on `|s(n+D tau) - s(m+D tau)| / R_D`.
    pub r_tol: f64,
    /// Attractor-size test threshold on `R_{D+1} / std(s)`.
    pub a_tol: f64,
    /// Neighbors with `|n - m| <= theiler` are ignored.
    pub theiler: usize,
}

impl FnnParams {
    pub fn new(tau: usize, d_max: usize) -> Self {
        Self {
            tau,
            d_max,
            r_tol: 15.0,
            a_tol: 2.0,
            theiler: tau,
        }
    }
}

/// Global false nearest neighbors for `D = 1..=d_max`, Theiler window `tau`.
pub fn false_nearest_neighbors(
    values: &[f64],
    tau: usize,
    d_max: usize,
    r_tol: f64,
    a_tol: f64,
) -> Result<FnnCurve> {
    false_nearest_neighbors_with(
        values,
        &FnnParams {
            r_tol,
            a_tol,
            ..FnnParams::new(tau, d_max)
        },
    )
}

pub fn false_nearest_neighbors_with(values: &[f64], p: &FnnParams) -> Result<FnnCurve> {
    if p.d_max < 2 {
        return Err(invalid("d_max must be at least 2"));
    }
    if p.tau == 0 {
        return Err(invalid("tau must be at least 1"));
    }
    let needed = p.d_max * p.tau + 2 * p.theiler + 2;
    if values.len() <= needed {
        return Err(Error::InsufficientData(format!(
            "{} samples are too few for d_max = {} at tau = {}",
            values.len(),
            p.d_max,
            p.tau
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateRange);
    }
    let fnn_fraction = (1..=p.d_max)
        .into_par_iter()
        .map(|d| fnn_fraction_at(values, d, p, std))
        .collect();
    Ok(FnnCurve {
        dims: (1..=p.d_max).collect(),
        fnn_fraction,
    })
}

fn fnn_fraction_at(values: &[f64], d: usize, p: &FnnParams, std: f64) -> f64 {
    let tau = p.tau;
    // points whose (d+1)-th coordinate exists
    let n_pts = values.len() - d * tau;
    let mut pts = Vec::with_capacity(n_pts * d);
    for n in 0..n_pts {
        for q in 0..d {
            pts.push(values[n + q * tau]);
        }
    }
    let tree = KdTree::new(&pts, d);
    let mut n_false = 0usize;
    let mut n_valid = 0usize;
    for n in 0..n_pts {
        let Some(nb) = tree.nearest(&pts[n * d..(n + 1) * d], |m| m.abs_diff(n) <= p.theiler)
        else {
            continue;
        };
        if nb.dist2 == 0.0 {
            continue;
        }
        n_valid += 1;
        if is_false_neighbor(values, n, nb.index, d, tau, nb.dist2, p, std) {
            n_false += 1;
        }
    }
    if n_valid == 0 {
        0.0
    } else {
        n_false as f64 / n_valid as f64
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn is_false_neighbor(
    values: &[f64],
    n: usize,
    m: usize,
    d: usize,
    tau: usize,
    dist2: f64,
    p: &FnnParams,
    std: f64,
) -> bool {
    let extra = (values[n + d * tau] - values[m + d * tau]).abs();
    let r = dist2.sqrt();
    extra / r > p.r_tol || (dist2 + extra * extra).sqrt() / std > p.a_tol
}

/// Smallest dimension whose false-neighbor fraction is at most `threshold`.
pub fn select_embedding_dimension(curve: &FnnCurve, threshold: f64) -> Result<usize> {
    curve
        .dims
        .iter()
        .zip(&curve.fnn_fraction)
        .find(|(_, &f)| f <= threshold)
        .map(|(&d, _)| d)
        .ok_or(Error::DimensionNotFound { threshold })
}
