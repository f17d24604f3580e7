//! Error measures and prediction with a trained network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSpec;
use crate::error::{invalid, Error, Result};
use crate::netaction::{forward, PairLibrary, Weights};
use crate::sum::NeumaierSum;

const CHUNK: usize = 256;

/// Mean over pairs of the per-component squared output error. `inputs` and
/// `targets` are row-major with `d_e` columns.
pub fn pair_mse(w: &Weights, inputs: &[f64], targets: &[f64], d_e: usize) -> Result<f64> {
    if d_e == 0 || inputs.len() != targets.len() || inputs.len() % d_e != 0 {
        return Err(Error::ShapeMismatch("inputs and targets must be equal-size row-major matrices".into()));
    }
    if w.arch.input_width() != d_e || w.arch.output_width() != d_e {
        return Err(Error::ShapeMismatch(format!(
            "network ports are {}/{} wide, pairs have {d_e} components",
            w.arch.input_width(),
            w.arch.output_width()
        )));
    }
    let n = inputs.len() / d_e;
    if n == 0 {
        return Err(Error::InsufficientData("no pairs to evaluate".into()));
    }
    let chunk_sum = |c: usize| -> Result<NeumaierSum> {
        let mut acc = NeumaierSum::new();
        for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let x = &inputs[k * d_e..(k + 1) * d_e];
            let y = &targets[k * d_e..(k + 1) * d_e];
            let out = predict(w, x)?;
            for (a, b) in out.iter().zip(y) {
                acc.add((a - b) * (a - b));
            }
        }
        Ok(acc)
    };
    let parts: Vec<NeumaierSum> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(chunk_sum)
        .collect::<Result<_>>()?;
    let mut total = NeumaierSum::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.value() / (n * d_e) as f64)
}

pub fn training_mse(w: &Weights, lib: &PairLibrary) -> Result<f64> {
    pair_mse(w, &lib.inputs, &lib.outputs, lib.d_e)
}

/// Error over every held-out pair.
pub fn validation_mse(w: &Weights, lib: &PairLibrary) -> Result<f64> {
    pair_mse(w, &lib.holdout_inputs, &lib.holdout_outputs, lib.d_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub train_mse: f64,
    pub val_mse: f64,
    /// Same measures with targets from a noise-free library, when supplied.
    pub train_mse_clean: Option<f64>,
    pub val_mse_clean: Option<f64>,
}

/// Training and validation error. `clean` must pair the same indices as
/// `lib`; its inputs are ignored and its targets replace the noisy ones.
pub fn evaluate(w: &Weights, lib: &PairLibrary, clean: Option<&PairLibrary>) -> Result<ErrorReport> {
    let train_mse = training_mse(w, lib)?;
    let val_mse = validation_mse(w, lib)?;
    let (train_mse_clean, val_mse_clean) = match clean {
        Some(c) => {
            if c.m() != lib.m() || c.n_holdout() != lib.n_holdout() || c.d_e != lib.d_e {
                return Err(Error::ShapeMismatch("clean library does not match".into()));
            }
            (
                Some(pair_mse(w, &lib.inputs, &c.outputs, lib.d_e)?),
                Some(pair_mse(w, &lib.holdout_inputs, &c.holdout_outputs, lib.d_e)?),
            )
        }
        None => (None, None),
    };
    Ok(ErrorReport {
        train_mse,
        val_mse,
        train_mse_clean,
        val_mse_clean,
    })
}

fn predict(w: &Weights, input: &[f64]) -> Result<Vec<f64>> {
    let mut layers = forward(w, input)?;
    Ok(layers.pop().expect("forward returns every layer"))
}

/// Network output for one delay vector; component 0 estimates the next sample.
pub fn one_step_predict(w: &Weights, input: &[f64]) -> Result<Vec<f64>> {
    predict(w, input)
}

/// Feeds the network its own output `n_steps` times. The seed is the first
/// element of the returned trajectory.
pub fn closed_loop_predict(w: &Weights, seed: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut traj = Vec::with_capacity(n_steps + 1);
    traj.push(seed.to_vec());
    for _ in 0..n_steps {
        let next = predict(w, traj.last().expect("seeded"))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAction);
        }
        traj.push(next);
    }
    Ok(traj)
}

/// One row of a prediction table: the sample index being predicted, the
/// network's value and the observed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub n: usize,
    pub predicted: f64,
    pub actual: f64,
}

fn delay_vector(values: &[f64], spec: EmbeddingSpec, n: usize) -> Vec<f64> {
    (0..spec.d_e).map(|q| values[n + q * spec.tau]).collect()
}

/// Predicts `values[n + 1]` from the delay vector at `n` for
/// `n = start .. start + len`.
pub fn one_step_series(
    w: &Weights,
    values: &[f64],
    spec: EmbeddingSpec,
    start: usize,
    len: usize,
) -> Result<Vec<PredictionRow>> {
    if start + len + spec.window() > values.len() {
        return Err(Error::InsufficientData(format!(
            "window {start}..{} needs {} samples, series has {}",
            start + len,
            start + len + spec.window(),
            values.len()
        )));
    }
    (start..start + len)
        .map(|n| {
            let out = one_step_predict(w, &delay_vector(values, spec, n))?;
            Ok(PredictionRow {
                n: n + 1,
                predicted: out[0],
                actual: values[n + 1],
            })
        })
        .collect()
}

/// Iterates from the delay vector at `start`. Row `j` compares the first
/// component after `j` steps with `values[start + j]`; the observed value is
/// NaN past the end of the series.
pub fn closed_loop_series(
    w: &Weights,
    values: &[f64],
    spec: EmbeddingSpec,
    start: usize,
    n_steps: usize,
) -> Result<Vec<PredictionRow>> {
    if start + spec.window() >= values.len() {
        return Err(invalid("start index leaves no room for a delay vector"));
    }
    let traj = closed_loop_predict(w, &delay_vector(values, spec, start), n_steps)?;
    Ok(traj
        .iter()
        .enumerate()
        .map(|(j, v)| PredictionRow {
            n: start + j,
            predicted: v[0],
            actual: values.get(start + j).copied().unwrap_or(f64::NAN),
        })
        .collect())
}

pub fn write_predictions_csv<W: std::io::Write>(rows: &[PredictionRow], mut out: W) -> Result<()> {
    writeln!(out, "n,predicted,actual")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e}", r.n, r.predicted, r.actual)?;
    }
    Ok(())
}
