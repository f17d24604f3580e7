//! The feedforward network, the pair library it is trained on, and the action
//! that couples measurement error at the ports with model error in the
//! layer-to-layer rule.
//!
//! # Layout of the optimisation variable
//!
//! A [`PathState`] is one flat vector. Activations come first, ordered by
//! pair `k`, then layer `l`, then unit `q`; the weight matrices follow,
//! ordered by layer, row, column (row-major). When biases are enabled each
//! weight matrix gets one extra trailing column holding the bias. Gradients
//! use the same layout.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSpec;
use crate::error::{invalid, Error, Result};
use crate::sum::NeumaierSum;

/// Pairs handled per reduction chunk. Fixed so the summation tree, and hence
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Identity => (z, 1.0),
        }
    }
}

/// Layer widths `[D_h0, ..., D_hF]`; hidden transitions use tanh, the final
/// transition uses `output`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub output: Activation,
    #[serde(default)]
    pub bias: bool,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, output: Activation, bias: bool) -> Result<Self> {
        if widths.len() < 3 {
            return Err(invalid("an architecture needs at least one hidden layer"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(Self {
            widths,
            output,
            bias,
        })
    }

    /// `n_layers` layers in total (input and output included), every hidden
    /// layer `d_h` wide, tanh everywhere, no biases.
    pub fn mlp(d_e: usize, n_layers: usize, d_h: usize) -> Result<Self> {
        if n_layers < 3 {
            return Err(invalid("need at least three layers"));
        }
        let mut widths = vec![d_e];
        widths.extend(std::iter::repeat_n(d_h, n_layers - 2));
        widths.push(d_e);
        Self::new(widths, Activation::Tanh, false)
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `(rows, cols)` of the weight matrix taking layer `l` to `l + 1`.
    pub fn weight_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l] + usize::from(self.bias))
    }

    pub fn n_weights(&self) -> usize {
        (0..self.n_transitions())
            .map(|l| {
                let (r, c) = self.weight_shape(l);
                r * c
            })
            .sum()
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.n_transitions() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    /// Sum of the widths of every layer after the input.
    pub fn model_norm(&self) -> usize {
        self.widths[1..].iter().sum()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Weight matrices for every transition, serialised as
/// `{"arch": ..., "matrices": [{"rows", "cols", "data"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub arch: Architecture,
    pub matrices: Vec<Matrix>,
}

impl Weights {
    pub fn zeros(arch: &Architecture) -> Self {
        let matrices = (0..arch.n_transitions())
            .map(|l| {
                let (r, c) = arch.weight_shape(l);
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            arch: arch.clone(),
            matrices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrices.len() != self.arch.n_transitions() {
            return Err(Error::ShapeMismatch(format!(
                "{} matrices for {} transitions",
                self.matrices.len(),
                self.arch.n_transitions()
            )));
        }
        for (l, m) in self.matrices.iter().enumerate() {
            if (m.rows, m.cols) != self.arch.weight_shape(l) || m.data.len() != m.rows * m.cols {
                return Err(Error::ShapeMismatch(format!("weight matrix {l} has the wrong shape")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: Weights = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    /// Flat weights in path-state order.
    pub fn flatten(&self) -> Vec<f64> {
        self.matrices.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.n_weights() {
            return Err(Error::ShapeMismatch("flat weight vector has the wrong length".into()));
        }
        let mut off = 0;
        let matrices = (0..arch.n_transitions())
            .map(|l| {
                let (r, c) = arch.weight_shape(l);
                let m = Matrix {
                    rows: r,
                    cols: c,
                    data: flat[off..off + r * c].to_vec(),
                };
                off += r * c;
                m
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            matrices,
        })
    }
}

/// `x(l+1) = f(W(l) x(l))` for one transition.
fn apply_layer(w: &[f64], cols: usize, bias: bool, act: Activation, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (q, o) in out.iter_mut().enumerate() {
        let row = &w[q * cols..(q + 1) * cols];
        let mut z = 0.0;
        for v in 0..n_in {
            z += row[v] * x[v];
        }
        if bias {
            z += row[n_in];
        }
        *o = act.apply(z).0;
    }
}

/// Every layer's activations for one input, input layer first.
pub fn forward(w: &Weights, input: &[f64]) -> Result<Vec<Vec<f64>>> {
    w.validate()?;
    let arch = &w.arch;
    if input.len() != arch.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} components, network expects {}",
            input.len(),
            arch.input_width()
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(invalid("input must be finite"));
    }
    let mut layers = Vec::with_capacity(arch.n_layers());
    layers.push(input.to_vec());
    for l in 0..arch.n_transitions() {
        let mut next = vec![0.0; arch.widths[l + 1]];
        apply_layer(
            &w.matrices[l].data,
            w.matrices[l].cols,
            arch.bias,
            arch.activation(l),
            &layers[l],
            &mut next,
        );
        layers.push(next);
    }
    Ok(layers)
}

/// Training pairs `Y(k)(l_0) -> Y(k)(l_F)` plus every remaining pair of the
/// library as holdout. All matrices are row-major with `d_e` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLibrary {
    pub d_e: usize,
    pub tau: usize,
    pub inputs: Vec<f64>,
    pub outputs: Vec<f64>,
    pub holdout_inputs: Vec<f64>,
    pub holdout_outputs: Vec<f64>,
}

impl PairLibrary {
    /// Total number of pairs a series of length `n` supports.
    pub fn total_pairs(n: usize, spec: EmbeddingSpec) -> usize {
        n.saturating_sub(spec.window())
    }

    /// Pair `k` takes input `y(k + q tau)` and output `y(k + 1 + q tau)`,
    /// `q = 0..d_e`. The first `m` pairs train; the remaining pairs (up to
    /// `m_total` overall, if given) are held out.
    pub fn from_series(
        values: &[f64],
        spec: EmbeddingSpec,
        m: usize,
        m_total: Option<usize>,
    ) -> Result<Self> {
        let available = Self::total_pairs(values.len(), spec);
        let total = m_total.map_or(available, |t| t.min(available));
        if m == 0 {
            return Err(invalid("need at least one training pair"));
        }
        if m > total {
            return Err(Error::InsufficientData(format!(
                "{m} training pairs requested, library holds {total}"
            )));
        }
        let d = spec.d_e;
        let pair = |k: usize, shift: usize| (0..d).map(move |q| values[k + shift + q * spec.tau]);
        let collect = |range: std::ops::Range<usize>, shift: usize| -> Vec<f64> {
            range.flat_map(|k| pair(k, shift)).collect()
        };
        Ok(Self {
            d_e: d,
            tau: spec.tau,
            inputs: collect(0..m, 0),
            outputs: collect(0..m, 1),
            holdout_inputs: collect(m..total, 0),
            holdout_outputs: collect(m..total, 1),
        })
    }

    pub fn m(&self) -> usize {
        self.inputs.len() / self.d_e
    }

    pub fn n_holdout(&self) -> usize {
        self.holdout_inputs.len() / self.d_e
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.d_e..(k + 1) * self.d_e]
    }

    pub fn output(&self, k: usize) -> &[f64] {
        &self.outputs[k * self.d_e..(k + 1) * self.d_e]
    }

    pub fn holdout_input(&self, k: usize) -> &[f64] {
        &self.holdout_inputs[k * self.d_e..(k + 1) * self.d_e]
    }

    pub fn holdout_output(&self, k: usize) -> &[f64] {
        &self.holdout_outputs[k * self.d_e..(k + 1) * self.d_e]
    }

    /// Same library with the training pairs reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.d_e;
        let gather = |src: &[f64]| -> Vec<f64> {
            perm.iter()
                .flat_map(|&k| src[k * d..(k + 1) * d].iter().copied())
                .collect()
        };
        Self {
            inputs: gather(&self.inputs),
            outputs: gather(&self.outputs),
            ..self.clone()
        }
    }
}

/// Offsets into the flat optimisation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLayout {
    pub m: usize,
    pub arch: Architecture,
    layer_offsets: Vec<usize>,
    stride: usize,
    weight_offsets: Vec<usize>,
}

impl PathLayout {
    pub fn new(m: usize, arch: &Architecture) -> Self {
        let mut layer_offsets = Vec::with_capacity(arch.n_layers());
        let mut off = 0;
        for &w in &arch.widths {
            layer_offsets.push(off);
            off += w;
        }
        let stride = off;
        let mut weight_offsets = Vec::with_capacity(arch.n_transitions());
        let mut woff = m * stride;
        for l in 0..arch.n_transitions() {
            weight_offsets.push(woff);
            let (r, c) = arch.weight_shape(l);
            woff += r * c;
        }
        Self {
            m,
            arch: arch.clone(),
            layer_offsets,
            stride,
            weight_offsets,
        }
    }

    pub fn n_activations(&self) -> usize {
        self.m * self.stride
    }

    pub fn len(&self) -> usize {
        self.n_activations() + self.arch.n_weights()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of `x^(k)_q(l)`.
    pub fn activation_index(&self, k: usize, l: usize, q: usize) -> usize {
        k * self.stride + self.layer_offsets[l] + q
    }

    /// Index of `W(l)[row, col]`.
    pub fn weight_index(&self, l: usize, row: usize, col: usize) -> usize {
        let (_, c) = self.arch.weight_shape(l);
        self.weight_offsets[l] + row * c + col
    }

    fn layer_range(&self, k: usize, l: usize) -> std::ops::Range<usize> {
        let s = k * self.stride + self.layer_offsets[l];
        s..s + self.arch.widths[l]
    }

    fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let (r, c) = self.arch.weight_shape(l);
        self.weight_offsets[l]..self.weight_offsets[l] + r * c
    }
}

/// All per-pair activations plus the shared weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathState {
    pub layout: PathLayout,
    pub values: Vec<f64>,
}

impl PathState {
    pub fn zeros(m: usize, arch: &Architecture) -> Self {
        let layout = PathLayout::new(m, arch);
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: PathLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::ShapeMismatch("path vector has the wrong length".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn m(&self) -> usize {
        self.layout.m
    }

    pub fn arch(&self) -> &Architecture {
        &self.layout.arch
    }

    pub fn layer(&self, k: usize, l: usize) -> &[f64] {
        &self.values[self.layout.layer_range(k, l)]
    }

    pub fn layer_mut(&mut self, k: usize, l: usize) -> &mut [f64] {
        let r = self.layout.layer_range(k, l);
        &mut self.values[r]
    }

    pub fn weight_slice(&self, l: usize) -> &[f64] {
        &self.values[self.layout.weight_range(l)]
    }

    pub fn weights(&self) -> Weights {
        let start = self.layout.n_activations();
        Weights::from_flat(&self.layout.arch, &self.values[start..]).expect("layout is consistent")
    }

    pub fn set_weights(&mut self, w: &Weights) -> Result<()> {
        w.validate()?;
        if w.arch != self.layout.arch {
            return Err(Error::ShapeMismatch("architecture differs".into()));
        }
        let start = self.layout.n_activations();
        self.values[start..].copy_from_slice(&w.flatten());
        Ok(())
    }

    /// Path whose activations follow the layer rule exactly from each
    /// training input.
    pub fn from_forward(w: &Weights, lib: &PairLibrary) -> Result<Self> {
        let mut ps = Self::zeros(lib.m(), &w.arch);
        ps.set_weights(w)?;
        for k in 0..lib.m() {
            let layers = forward(w, lib.input(k))?;
            for (l, act) in layers.iter().enumerate() {
                ps.layer_mut(k, l).copy_from_slice(act);
            }
        }
        Ok(ps)
    }

    /// Ports clamped to the data, hidden units uniform in [-1, 1], weights
    /// uniform in [-w0, w0].
    pub fn random<R: Rng>(lib: &PairLibrary, arch: &Architecture, w0: f64, rng: &mut R) -> Result<Self> {
        check_compat(lib, arch)?;
        let mut ps = Self::zeros(lib.m(), arch);
        let last = arch.n_layers() - 1;
        for k in 0..lib.m() {
            ps.layer_mut(k, 0).copy_from_slice(lib.input(k));
            for l in 1..last {
                for v in ps.layer_mut(k, l) {
                    *v = rng.random_range(-1.0..=1.0);
                }
            }
            ps.layer_mut(k, last).copy_from_slice(lib.output(k));
        }
        let start = ps.layout.n_activations();
        for v in &mut ps.values[start..] {
            *v = if w0 > 0.0 { rng.random_range(-w0..=w0) } else { 0.0 };
        }
        Ok(ps)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_compat(lib: &PairLibrary, arch: &Architecture) -> Result<()> {
    if arch.input_width() != lib.d_e || arch.output_width() != lib.d_e {
        return Err(Error::ShapeMismatch(format!(
            "network ports are {}/{} wide, library vectors have {} components",
            arch.input_width(),
            arch.output_width(),
            lib.d_e
        )));
    }
    Ok(())
}

/// Measurement precision `r_m` and model precision `r_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precisions {
    pub r_m: f64,
    pub r_f: f64,
}

impl Precisions {
    pub fn new(r_m: f64, r_f: f64) -> Result<Self> {
        if !(r_m > 0.0) || !(r_f >= 0.0) {
            return Err(invalid("need r_m > 0 and r_f >= 0"));
        }
        Ok(Self { r_m, r_f })
    }
}

/// The two parts of the action, each already averaged over pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionTerms {
    pub measurement: f64,
    pub model: f64,
}

impl ActionTerms {
    pub fn total(&self) -> f64 {
        self.measurement + self.model
    }
}

/// The action bound to one library, architecture and precision pair. Works
/// on flat vectors in [`PathLayout`] order so it can drive an optimizer.
#[derive(Debug, Clone)]
pub struct Action<'a> {
    lib: &'a PairLibrary,
    layout: PathLayout,
    prec: Precisions,
    parallel: bool,
}

#[derive(Default)]
struct ChunkAcc {
    meas: NeumaierSum,
    model: NeumaierSum,
}

impl<'a> Action<'a> {
    pub fn new(lib: &'a PairLibrary, arch: &Architecture, prec: Precisions) -> Result<Self> {
        check_compat(lib, arch)?;
        Ok(Self {
            lib,
            layout: PathLayout::new(lib.m(), arch),
            prec,
            parallel: false,
        })
    }

    /// Spread pair chunks over the rayon pool. Results are bit-identical to
    /// the serial path.
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn layout(&self) -> &PathLayout {
        &self.layout
    }

    pub fn precisions(&self) -> Precisions {
        self.prec
    }

    pub fn set_precisions(&mut self, prec: Precisions) {
        self.prec = prec;
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn terms(&self, x: &[f64]) -> ActionTerms {
        self.eval(x, None)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.eval(x, None).total()
    }

    /// Action value; the gradient is written into `grad`.
    pub fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad)).total()
    }

    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> ActionTerms {
        assert_eq!(x.len(), self.layout.len(), "path vector length");
        let m = self.layout.m;
        let n_chunks = m.div_ceil(CHUNK);
        let n_act = self.layout.n_activations();
        let n_w = self.layout.arch.n_weights();

        let acc: Vec<ChunkAcc> = match grad {
            None => {
                let run = |c: usize| self.chunk(x, c, None);
                if self.parallel {
                    (0..n_chunks).into_par_iter().map(run).collect()
                } else {
                    (0..n_chunks).map(run).collect()
                }
            }
            Some(g) => {
                assert_eq!(g.len(), x.len(), "gradient length");
                let (g_act, g_w) = g.split_at_mut(n_act);
                let stride = self.layout.stride;
                let run = |(c, ga): (usize, &mut [f64])| {
                    ga.fill(0.0);
                    let mut gw = vec![0.0; n_w];
                    let acc = self.chunk(x, c, Some((ga, &mut gw)));
                    (acc, gw)
                };
                let (acc, gws): (Vec<ChunkAcc>, Vec<Vec<f64>>) = if self.parallel {
                    g_act
                        .par_chunks_mut(CHUNK * stride)
                        .enumerate()
                        .map(run)
                        .unzip()
                } else {
                    g_act.chunks_mut(CHUNK * stride).enumerate().map(run).unzip()
                };
                g_w.fill(0.0);
                // chunk order is fixed, so this reduction is deterministic
                for gw in &gws {
                    for (t, s) in g_w.iter_mut().zip(gw) {
                        *t += s;
                    }
                }
                acc
            }
        };
        let mut meas = NeumaierSum::new();
        let mut model = NeumaierSum::new();
        for a in &acc {
            meas.merge(&a.meas);
            model.merge(&a.model);
        }
        let inv_m = 1.0 / m as f64;
        ActionTerms {
            measurement: meas.value() * inv_m,
            model: model.value() * inv_m,
        }
    }

    /// Accumulates the un-averaged per-pair terms of chunk `c`. With a
    /// gradient, `ga` covers this chunk's activations and `gw` is the chunk's
    /// private weight gradient.
    fn chunk(&self, x: &[f64], c: usize, mut grad: Option<(&mut [f64], &mut Vec<f64>)>) -> ChunkAcc {
        let layout = &self.layout;
        let arch = &layout.arch;
        let lib = self.lib;
        let m = layout.m;
        let stride = layout.stride;
        let n_act = layout.n_activations();
        let last = arch.n_layers() - 1;
        let d_e = lib.d_e;

        let inv_m = 1.0 / m as f64;
        let meas_coef = 0.5 * self.prec.r_m / (arch.input_width() + arch.output_width()) as f64;
        let model_coef = 0.5 * self.prec.r_f / arch.model_norm() as f64;
        let use_model = self.prec.r_f != 0.0;

        let mut acc = ChunkAcc::default();
        let k0 = c * CHUNK;
        let k1 = (k0 + CHUNK).min(m);
        let max_width = *arch.widths.iter().max().unwrap();
        let mut deriv = vec![0.0; max_width];
        let mut resid = vec![0.0; max_width];

        for k in k0..k1 {
            let base = k * stride;
            let local = (k - k0) * stride;

            // measurement at both ports
            let x_in = &x[layout.layer_range(k, 0)];
            let x_out = &x[layout.layer_range(k, last)];
            let mut s = 0.0;
            for q in 0..d_e {
                let e_in = x_in[q] - lib.inputs[k * d_e + q];
                let e_out = x_out[q] - lib.outputs[k * d_e + q];
                s += e_in * e_in + e_out * e_out;
                if let Some((ga, _)) = grad.as_mut() {
                    let g = 2.0 * meas_coef * inv_m;
                    ga[local + layout.layer_offsets[0] + q] += g * e_in;
                    ga[local + layout.layer_offsets[last] + q] += g * e_out;
                }
            }
            acc.meas.add(meas_coef * s);

            if !use_model {
                continue;
            }
            let mut s = 0.0;
            for l in 0..arch.n_transitions() {
                let (rows, cols) = arch.weight_shape(l);
                let act = arch.activation(l);
                let n_in = arch.widths[l];
                let xl_start = base + layout.layer_offsets[l];
                let xl = &x[xl_start..xl_start + n_in];
                let xn_start = base + layout.layer_offsets[l + 1];
                let xn = &x[xn_start..xn_start + rows];
                let w_start = layout.weight_offsets[l];
                let w = &x[w_start..w_start + rows * cols];
                for q in 0..rows {
                    let row = &w[q * cols..(q + 1) * cols];
                    let mut z = 0.0;
                    for v in 0..n_in {
                        z += row[v] * xl[v];
                    }
                    if arch.bias {
                        z += row[n_in];
                    }
                    let (f, df) = act.apply(z);
                    let e = xn[q] - f;
                    s += e * e;
                    resid[q] = e;
                    deriv[q] = df;
                }
                if let Some((ga, gw)) = grad.as_mut() {
                    let g = 2.0 * model_coef * inv_m;
                    let gn = local + layout.layer_offsets[l + 1];
                    let gl = local + layout.layer_offsets[l];
                    let gw_start = w_start - n_act;
                    for q in 0..rows {
                        let ge = g * resid[q];
                        ga[gn + q] += ge;
                        let delta = -ge * deriv[q];
                        if delta == 0.0 {
                            continue;
                        }
                        let row = &w[q * cols..(q + 1) * cols];
                        let gw_row = &mut gw[gw_start + q * cols..gw_start + (q + 1) * cols];
                        for v in 0..n_in {
                            ga[gl + v] += row[v] * delta;
                            gw_row[v] += delta * xl[v];
                        }
                        if arch.bias {
                            gw_row[n_in] += delta;
                        }
                    }
                }
            }
            acc.model.add(model_coef * s);
        }
        acc
    }
}

/// Port term of the action, averaged over pairs.
pub fn measurement_error(ps: &PathState, lib: &PairLibrary, r_m: f64) -> Result<f64> {
    let action = Action::new(lib, ps.arch(), Precisions::new(r_m, 0.0)?)?;
    check_len(ps, &action)?;
    Ok(action.terms(&ps.values).measurement)
}

/// Layer-rule term of the action, averaged over pairs.
pub fn model_error(ps: &PathState, arch: &Architecture, r_f: f64) -> Result<f64> {
    if !(r_f >= 0.0) {
        return Err(invalid("r_f must be nonnegative"));
    }
    if ps.arch() != arch {
        return Err(Error::ShapeMismatch("path was built for another architecture".into()));
    }
    // the model term does not read the data, so a placeholder library suffices
    let lib = PairLibrary {
        d_e: arch.input_width(),
        tau: 1,
        inputs: vec![0.0; ps.m() * arch.input_width()],
        outputs: vec![0.0; ps.m() * arch.input_width()],
        holdout_inputs: Vec::new(),
        holdout_outputs: Vec::new(),
    };
    if arch.input_width() != arch.output_width() {
        return Err(Error::ShapeMismatch("ports must have equal width".into()));
    }
    let action = Action::new(&lib, arch, Precisions::new(1.0, r_f)?)?;
    Ok(action.terms(&ps.values).model)
}

pub fn total_action(
    ps: &PathState,
    lib: &PairLibrary,
    arch: &Architecture,
    prec: Precisions,
) -> Result<f64> {
    let action = Action::new(lib, arch, prec)?;
    check_len(ps, &action)?;
    Ok(action.value(&ps.values))
}

/// Exact gradient of [`total_action`] in path-state layout.
pub fn action_gradient(
    ps: &PathState,
    lib: &PairLibrary,
    arch: &Architecture,
    prec: Precisions,
) -> Result<Vec<f64>> {
    let action = Action::new(lib, arch, prec)?;
    check_len(ps, &action)?;
    let mut g = vec![0.0; ps.values.len()];
    action.value_and_gradient(&ps.values, &mut g);
    Ok(g)
}

fn check_len(ps: &PathState, action: &Action<'_>) -> Result<()> {
    if ps.layout != action.layout {
        return Err(Error::ShapeMismatch(
            "path state does not match library size or architecture".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_library(m: usize, d_e: usize, seed: u64) -> PairLibrary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m + 40;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
        PairLibrary::from_series(&s, EmbeddingSpec::new(2, d_e).unwrap(), m, None).unwrap()
    }

    #[test]
    fn library_pairing_follows_index_rule() {
        let s: Vec<f64> = (0..30).map(f64::from).collect();
        let lib = PairLibrary::from_series(&s, EmbeddingSpec::new(3, 4).unwrap(), 5, None).unwrap();
        assert_eq!(lib.input(0), &[0.0, 3.0, 6.0, 9.0]);
        assert_eq!(lib.output(0), &[1.0, 4.0, 7.0, 10.0]);
        assert_eq!(lib.input(4), &[4.0, 7.0, 10.0, 13.0]);
        // 30 samples, window 10: 20 pairs in total
        assert_eq!(lib.m() + lib.n_holdout(), 20);
        assert_eq!(lib.holdout_input(0), &[5.0, 8.0, 11.0, 14.0]);
        assert_eq!(lib.holdout_output(14), &[20.0, 23.0, 26.0, 29.0]);
        assert!(PairLibrary::from_series(&s, EmbeddingSpec::new(3, 4).unwrap(), 21, None).is_err());
    }

    #[test]
    fn library_total_matches_reported_size() {
        // 85000 retained samples at tau = 7, D_E = 5 leave 84971 pairs
        let spec = EmbeddingSpec::new(7, 5).unwrap();
        assert_eq!(PairLibrary::total_pairs(85_000, spec), 84_971);
    }

    #[test]
    fn architecture_shapes() {
        let a = Architecture::mlp(5, 4, 15).unwrap();
        assert_eq!(a.widths, vec![5, 15, 15, 5]);
        assert_eq!(a.model_norm(), 35);
        assert_eq!(a.n_weights(), 75 + 225 + 75);
        assert!(Architecture::mlp(5, 2, 15).is_err());
        assert!(Architecture::new(vec![5, 0, 5], Activation::Tanh, false).is_err());
        let b = Architecture::new(vec![2, 3, 2], Activation::Tanh, true).unwrap();
        assert_eq!(b.weight_shape(0), (3, 3));
        assert_eq!(b.n_weights(), 9 + 8);
    }

    #[test]
    fn zero_weights_forward_to_zero() {
        let arch = Architecture::mlp(5, 5, 7).unwrap();
        let w = Weights::zeros(&arch);
        let layers = forward(&w, &[0.3, -0.2, 0.9, 0.1, -0.7]).unwrap();
        assert_eq!(layers.len(), 5);
        for l in &layers[1..] {
            assert!(l.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_signal_passes_through_identity_weights() {
        let arch = Architecture::mlp(3, 3, 3).unwrap();
        let mut w = Weights::zeros(&arch);
        for m in &mut w.matrices {
            for i in 0..3 {
                m.data[i * 3 + i] = 1.0;
            }
        }
        let eps = [1e-3, -2e-3, 5e-4];
        let out = forward(&w, &eps).unwrap();
        for q in 0..3 {
            assert_eq!(out[2][q], eps[q].tanh().tanh());
            assert!((out[2][q] - eps[q]).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_output_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture::mlp(5, 4, 15).unwrap();
        for _ in 0..20 {
            let flat: Vec<f64> = (0..arch.n_weights()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = Weights::from_flat(&arch, &flat).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = forward(&w, &x).unwrap();
            assert!(out[3].iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn forward_shape_errors() {
        let arch = Architecture::mlp(5, 4, 15).unwrap();
        let w = Weights::zeros(&arch);
        assert!(matches!(forward(&w, &[0.0; 4]), Err(Error::ShapeMismatch(_))));
        let mut bad = w.clone();
        bad.matrices.pop();
        assert!(forward(&bad, &[0.0; 5]).is_err());
    }

    #[test]
    fn weights_json_round_trip() {
        let arch = Architecture::new(vec![2, 3, 2], Activation::Identity, true).unwrap();
        let flat: Vec<f64> = (0..arch.n_weights()).map(|i| i as f64 * 0.1 - 0.5).collect();
        let w = Weights::from_flat(&arch, &flat).unwrap();
        let back = Weights::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn data_clamped_ports_have_zero_measurement_error() {
        let lib = toy_library(7, 3, 2);
        let arch = Architecture::mlp(3, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = PathState::random(&lib, &arch, 0.5, &mut rng).unwrap();
        assert_eq!(measurement_error(&ps, &lib, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_residual_measurement_error() {
        let lib = toy_library(1, 3, 4);
        let arch = Architecture::mlp(3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = PathState::random(&lib, &arch, 0.5, &mut rng).unwrap();
        let r = 0.25;
        for v in ps.layer_mut(0, 0) {
            *v += r;
        }
        for v in ps.layer_mut(0, 2) {
            *v -= r;
        }
        let rm = 3.0;
        let got = measurement_error(&ps, &lib, rm).unwrap();
        assert!((got - rm / 2.0 * r * r).abs() < 1e-15);
    }

    #[test]
    fn forward_paths_have_zero_model_error() {
        let lib = toy_library(10, 4, 6);
        let arch = Architecture::new(vec![4, 6, 5, 4], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let flat: Vec<f64> = (0..arch.n_weights()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Weights::from_flat(&arch, &flat).unwrap();
        let ps = PathState::from_forward(&w, &lib).unwrap();
        assert_eq!(model_error(&ps, &arch, 1e6).unwrap(), 0.0);
        // and the model part of the gradient vanishes there
        let g = action_gradient(&ps, &lib, &arch, Precisions::new(1e-30, 1e3).unwrap()).unwrap();
        let n_act = ps.layout.n_activations();
        assert!(g[n_act..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_model_precision_ignores_hidden_units() {
        let lib = toy_library(6, 3, 8);
        let arch = Architecture::mlp(3, 5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ps = PathState::random(&lib, &arch, 0.5, &mut rng).unwrap();
        assert_eq!(model_error(&ps, &arch, 0.0).unwrap(), 0.0);
        let prec = Precisions::new(1.0, 0.0).unwrap();
        let total = total_action(&ps, &lib, &arch, prec).unwrap();
        assert_eq!(total, measurement_error(&ps, &lib, 1.0).unwrap());
        let g = action_gradient(&ps, &lib, &arch, prec).unwrap();
        for k in 0..lib.m() {
            for l in 1..arch.n_layers() - 1 {
                for q in 0..arch.widths[l] {
                    assert_eq!(g[ps.layout.activation_index(k, l, q)], 0.0);
                }
            }
        }
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let lib = toy_library(200, 5, 10);
        let arch = Architecture::mlp(5, 4, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ps = PathState::random(&lib, &arch, 0.3, &mut rng).unwrap();
        let prec = Precisions::new(1.0, 7.5).unwrap();
        let serial = Action::new(&lib, &arch, prec).unwrap();
        let par = serial.clone().parallel(true);
        let mut g1 = vec![0.0; ps.values.len()];
        let mut g2 = vec![0.0; ps.values.len()];
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let v1 = serial.value_and_gradient(&ps.values, &mut g1);
        let v2 = pool.install(|| par.value_and_gradient(&ps.values, &mut g2));
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn shape_mismatch_between_library_and_network() {
        let lib = toy_library(4, 3, 1);
        let arch = Architecture::mlp(5, 4, 3).unwrap();
        assert!(Action::new(&lib, &arch, Precisions::new(1.0, 1.0).unwrap()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PathState::random(&lib, &arch, 0.1, &mut rng).is_err());
    }
}
