//! Ground-truth data: Lorenz96 integration, observation noise, rescaling to
//! [-1, 1], and a plain-text series format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Where a series came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Clean,
    Noisy,
    Rescaled,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Clean => "clean",
            Origin::Noisy => "noisy",
            Origin::Rescaled => "rescaled",
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Origin::Clean),
            "noisy" => Ok(Origin::Noisy),
            "rescaled" => Ok(Origin::Rescaled),
            other => Err(invalid(format!("unknown origin {other:?}"))),
        }
    }
}

/// A uniformly sampled scalar sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<f64>,
    dt: f64,
    origin: Origin,
    seed: Option<u64>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, dt: f64, origin: Origin, seed: Option<u64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries);
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt must be positive"));
        }
        Ok(Self {
            values,
            dt,
            origin,
            seed,
        })
    }

    /// Clean series with unit sampling interval.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::new(values, 1.0, Origin::Clean, None)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.values)
    }

    /// Sub-series `[start, start + len)`, keeping metadata.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.values.len())
            .ok_or_else(|| invalid("slice out of range"))?;
        Self::new(
            self.values[start..end].to_vec(),
            self.dt,
            self.origin,
            self.seed,
        )
    }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// The Lorenz96 vector field with cyclic indices,
/// `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96 {
    pub dim: usize,
    pub forcing: f64,
}

impl Lorenz96 {
    pub fn new(dim: usize, forcing: f64) -> Result<Self> {
        if dim < 4 {
            return Err(invalid("Lorenz96 needs at least 4 components"));
        }
        Ok(Self { dim, forcing })
    }

    pub fn rhs(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + self.forcing;
        }
    }

    /// One classical fourth-order Runge-Kutta step, in place.
    pub fn rk4_step(&self, x: &mut [f64], dt: f64, scratch: &mut Rk4Scratch) {
        let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
        let d = self.dim;
        self.rhs(x, k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        self.rhs(tmp, k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        self.rhs(tmp, k3);
        for i in 0..d {
            tmp[i] = x[i] + dt * k3[i];
        }
        self.rhs(tmp, k4);
        for i in 0..d {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    /// Integrates `n_steps` from `x0`, returning every state after each step.
    pub fn trajectory(&self, x0: &[f64], dt: f64, n_steps: usize) -> Result<Vec<Vec<f64>>> {
        if x0.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "initial state has {} components, model has {}",
                x0.len(),
                self.dim
            )));
        }
        let mut x = x0.to_vec();
        let mut scratch = Rk4Scratch::new(self.dim);
        let mut out = Vec::with_capacity(n_steps);
        for step in 0..n_steps {
            self.rk4_step(&mut x, dt, &mut scratch);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationDiverged { step });
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Work buffers for [`Lorenz96::rk4_step`].
#[derive(Debug, Clone)]
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// Full set of knobs for generating an observed Lorenz96 component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Config {
    pub dim: usize,
    pub forcing: f64,
    pub dt: f64,
    pub n_total: usize,
    pub n_discard: usize,
    pub seed: u64,
    /// Half-width of the uniform perturbation around the fixed point `x_i = F`.
    pub perturbation: f64,
    /// Index of the observed component (0-based).
    pub observed: usize,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            dim: 5,
            forcing: 8.15,
            dt: 0.05,
            n_total: 100_000,
            n_discard: 10_000,
            seed: 0,
            perturbation: 0.01,
            observed: 0,
        }
    }
}

impl Lorenz96Config {
    /// Initial state: the fixed point `x_i = F` plus a seeded uniform
    /// perturbation, with an extra kick of the perturbation size on the first
    /// component so the symmetric fixed point is always left.
    pub fn initial_state(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eps = self.perturbation;
        let mut x: Vec<f64> = (0..self.dim)
            .map(|_| self.forcing + eps * rng.random_range(-1.0..=1.0))
            .collect();
        x[0] += eps;
        x
    }

    pub fn generate(&self) -> Result<TimeSeries> {
        let model = Lorenz96::new(self.dim, self.forcing)?;
        if self.n_discard >= self.n_total {
            return Err(invalid("n_discard must be smaller than n_total"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        if self.observed >= self.dim {
            return Err(invalid("observed component out of range"));
        }
        let mut x = self.initial_state();
        let mut scratch = Rk4Scratch::new(self.dim);
        let mut values = Vec::with_capacity(self.n_total - self.n_discard);
        for step in 0..self.n_total {
            model.rk4_step(&mut x, self.dt, &mut scratch);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationDiverged { step });
            }
            if step >= self.n_discard {
                values.push(x[self.observed]);
            }
        }
        TimeSeries::new(values, self.dt, Origin::Clean, Some(self.seed))
    }
}

/// Integrates Lorenz96 and returns component `x_1` after dropping the first
/// `n_discard` samples.
pub fn generate_lorenz96(
    dim: usize,
    forcing: f64,
    dt: f64,
    n_total: usize,
    n_discard: usize,
    seed: u64,
) -> Result<TimeSeries> {
    Lorenz96Config {
        dim,
        forcing,
        dt,
        n_total,
        n_discard,
        seed,
        ..Default::default()
    }
    .generate()
}

/// `y(n) = s(n) + g(n)`, `g ~ N(0, sigma)`, `sigma = sigma_fraction * (max s - min s)`.
pub fn add_noise(ts: &TimeSeries, sigma_fraction: f64, seed: u64) -> Result<TimeSeries> {
    if ts.origin() != Origin::Clean {
        return Err(invalid("noise is only added to clean series"));
    }
    if !(0.0..1.0).contains(&sigma_fraction) {
        return Err(invalid("sigma_fraction must lie in [0, 1)"));
    }
    let (lo, hi) = ts.min_max();
    let sigma = sigma_fraction * (hi - lo);
    let values = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ts.values()
            .iter()
            .map(|&s| s + normal.sample(&mut rng))
            .collect()
    } else {
        ts.values().to_vec()
    };
    TimeSeries::new(values, ts.dt(), Origin::Noisy, Some(seed))
}

/// Affine map between the data range and [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub y_min: f64,
    pub y_max: f64,
}

impl ScaleParams {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_max > y_min) {
            return Err(Error::DegenerateRange);
        }
        Ok(Self { y_min, y_max })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (2.0 * y - (self.y_max + self.y_min)) / (self.y_max - self.y_min)
    }

    pub fn invert(&self, u: f64) -> f64 {
        (u * (self.y_max - self.y_min) + (self.y_max + self.y_min)) / 2.0
    }
}

/// Maps the series onto [-1, 1].
pub fn rescale(ts: &TimeSeries) -> Result<(TimeSeries, ScaleParams)> {
    let (lo, hi) = ts.min_max();
    let params = ScaleParams::new(lo, hi)?;
    let values = ts.values().iter().map(|&y| params.apply(y)).collect();
    Ok((
        TimeSeries::new(values, ts.dt(), Origin::Rescaled, ts.seed())?,
        params,
    ))
}

/// Undoes [`rescale`]; the result is labelled noisy.
pub fn unscale(ts: &TimeSeries, params: &ScaleParams) -> Result<TimeSeries> {
    let values = ts.values().iter().map(|&u| params.invert(u)).collect();
    TimeSeries::new(values, ts.dt(), Origin::Noisy, ts.seed())
}

/// Writes `# key=value` header lines followed by one value per line.
pub fn save_series(path: impl AsRef<Path>, ts: &TimeSeries) -> Result<()> {
    let mut out = String::with_capacity(ts.len() * 25 + 64);
    writeln!(out, "# dt={:.16e}", ts.dt()).unwrap();
    writeln!(out, "# origin={}", ts.origin().as_str()).unwrap();
    if let Some(seed) = ts.seed() {
        writeln!(out, "# seed={seed}").unwrap();
    }
    for v in ts.values() {
        writeln!(out, "{v:.16e}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_series(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut dt = 1.0;
    let mut origin = Origin::Clean;
    let mut seed = None;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let Some((key, value)) = header.trim().split_once('=') else {
                continue;
            };
            let value = value.trim();
            match key.trim() {
                "dt" => {
                    dt = value
                        .parse()
                        .map_err(|_| parse_err(format!("bad dt {value:?}")))?
                }
                "origin" => origin = value.parse().map_err(|_| parse_err(format!("bad origin {value:?}")))?,
                "seed" => {
                    seed = Some(
                        value
                            .parse()
                            .map_err(|_| parse_err(format!("bad seed {value:?}")))?,
                    )
                }
                _ => {}
            }
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| parse_err(format!("line {}: not a number", lineno + 1)))?;
        values.push(v);
    }
    TimeSeries::new(values, dt, origin, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unforced_zero_state_stays_zero() {
        let cfg = Lorenz96Config {
            forcing: 0.0,
            perturbation: 0.0,
            n_total: 500,
            n_discard: 10,
            ..Default::default()
        };
        let ts = cfg.generate().unwrap();
        assert!(ts.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unforced_energy_decays_monotonically() {
        let model = Lorenz96::new(5, 0.0).unwrap();
        let x0 = [0.01, -0.02, 0.015, 0.005, -0.01];
        let traj = model.trajectory(&x0, 0.05, 1000).unwrap();
        let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let mut prev = energy(&x0);
        for x in &traj {
            let e = energy(x);
            assert!(e < prev, "energy rose: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = Lorenz96Config {
            dt: 10.0,
            n_total: 1000,
            n_discard: 0,
            ..Default::default()
        };
        assert!(matches!(
            cfg.generate(),
            Err(Error::IntegrationDiverged { .. })
        ));
    }

    #[test]
    fn generate_rejects_bad_arguments() {
        assert!(generate_lorenz96(3, 8.0, 0.05, 100, 10, 0).is_err());
        assert!(generate_lorenz96(5, 8.0, 0.05, 100, 100, 0).is_err());
        assert!(generate_lorenz96(5, 8.0, 0.0, 100, 10, 0).is_err());
    }

    #[test]
    fn generated_length_and_origin() {
        let ts = generate_lorenz96(5, 8.15, 0.05, 2000, 500, 7).unwrap();
        assert_eq!(ts.len(), 1500);
        assert_eq!(ts.origin(), Origin::Clean);
        assert_eq!(ts.seed(), Some(7));
    }

    #[test]
    fn zero_noise_is_identity() {
        let ts = generate_lorenz96(5, 8.15, 0.05, 1000, 100, 1).unwrap();
        let noisy = add_noise(&ts, 0.0, 3).unwrap();
        assert_eq!(noisy.values(), ts.values());
        assert_eq!(noisy.origin(), Origin::Noisy);
    }

    #[test]
    fn noise_needs_clean_input_and_valid_fraction() {
        let ts = generate_lorenz96(5, 8.15, 0.05, 1000, 100, 1).unwrap();
        let noisy = add_noise(&ts, 0.02, 3).unwrap();
        assert!(add_noise(&noisy, 0.02, 3).is_err());
        assert!(add_noise(&ts, 1.0, 3).is_err());
        assert!(add_noise(&ts, -0.1, 3).is_err());
    }

    #[test]
    fn noise_level_matches_fraction_of_range() {
        let ts = generate_lorenz96(5, 8.15, 0.05, 30_000, 10_000, 11).unwrap();
        let noisy = add_noise(&ts, 0.02, 12).unwrap();
        let (lo, hi) = ts.min_max();
        let target = 0.02 * (hi - lo);
        let diffs: Vec<f64> = noisy
            .values()
            .iter()
            .zip(ts.values())
            .map(|(y, s)| y - s)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - target).abs() < 0.05 * target, "sd {sd} target {target}");
    }

    #[test]
    fn rescale_maps_endpoints() {
        let ts = TimeSeries::from_values(vec![0.0, 5.0, 10.0]).unwrap();
        let (r, p) = rescale(&ts).unwrap();
        assert_eq!(r.values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(r.origin(), Origin::Rescaled);
        assert_eq!(p, ScaleParams { y_min: 0.0, y_max: 10.0 });
    }

    #[test]
    fn rescale_rejects_constant_series() {
        let ts = TimeSeries::from_values(vec![2.0; 10]).unwrap();
        assert!(matches!(rescale(&ts), Err(Error::DegenerateRange)));
    }

    #[test]
    fn rescaled_noisy_series_spans_unit_interval() {
        let ts = generate_lorenz96(5, 8.15, 0.05, 5000, 1000, 2).unwrap();
        let noisy = add_noise(&ts, 0.02, 4).unwrap();
        let (r, _) = rescale(&noisy).unwrap();
        let (lo, hi) = r.min_max();
        assert!((lo + 1.0).abs() < 1e-12);
        assert!((hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(TimeSeries::from_values(vec![]).is_err());
        assert!(TimeSeries::from_values(vec![1.0, f64::NAN]).is_err());
        assert!(TimeSeries::from_values(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let ts = generate_lorenz96(5, 8.15, 0.05, 300, 100, 9).unwrap();
        let noisy = add_noise(&ts, 0.02, 1).unwrap();
        save_series(&path, &noisy).unwrap();
        let back = load_series(&path).unwrap();
        assert_eq!(back, noisy);
    }

    #[test]
    fn load_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "# dt=0.1\n1.0\nabc\n").unwrap();
        assert!(matches!(load_series(&path), Err(Error::Parse { .. })));
    }
}
