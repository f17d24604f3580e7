//! Independent reference implementations shared by integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use delaynet::netaction::{Activation, Architecture, PairLibrary, PathState, Weights};

/// Lyapunov spectrum of Lorenz96 per unit time, from RK4 integration of the
/// trajectory together with its tangent flow and periodic QR
/// re-orthonormalization. Sorted descending.
pub fn l96_tangent_spectrum(dim: usize, forcing: f64, dt: f64, transient: usize, steps: usize) -> Vec<f64> {
    let rhs = |x: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(dim, |i, _| {
            let ip1 = (i + 1) % dim;
            let im1 = (i + dim - 1) % dim;
            let im2 = (i + dim - 2) % dim;
            (x[ip1] - x[im2]) * x[im1] - x[i] + forcing
        })
    };
    let jac = |x: &DVector<f64>| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let ip1 = (i + 1) % dim;
            let im1 = (i + dim - 1) % dim;
            let im2 = (i + dim - 2) % dim;
            j[(i, ip1)] += x[im1];
            j[(i, im2)] -= x[im1];
            j[(i, im1)] += x[ip1] - x[im2];
            j[(i, i)] -= 1.0;
        }
        j
    };
    let mut x = DVector::from_fn(dim, |i, _| forcing + if i == 0 { 0.01 } else { 0.0 });
    let step = |x: &DVector<f64>, y: &DMatrix<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let k1 = (rhs(x), jac(x) * y);
        let x2 = x + &k1.0 * (dt / 2.0);
        let y2 = y + &k1.1 * (dt / 2.0);
        let k2 = (rhs(&x2), jac(&x2) * &y2);
        let x3 = x + &k2.0 * (dt / 2.0);
        let y3 = y + &k2.1 * (dt / 2.0);
        let k3 = (rhs(&x3), jac(&x3) * &y3);
        let x4 = x + &k3.0 * dt;
        let y4 = y + &k3.1 * dt;
        let k4 = (rhs(&x4), jac(&x4) * &y4);
        (
            x + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (dt / 6.0),
            y + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (dt / 6.0),
        )
    };
    let mut q = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..transient {
        x = step(&x, &q).0;
    }
    let mut sums = vec![0.0; dim];
    for _ in 0..steps {
        let (xn, yn) = step(&x, &q);
        x = xn;
        let qr = yn.qr();
        let r = qr.r();
        for i in 0..dim {
            sums[i] += r[(i, i)].abs().ln();
        }
        q = qr.q();
    }
    let mut lam: Vec<f64> = sums.iter().map(|s| s / (steps as f64 * dt)).collect();
    lam.sort_by(|a, b| b.total_cmp(a));
    lam
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
    }
}

fn transition_activation(arch: &Architecture, l: usize) -> Activation {
    if l + 2 == arch.widths.len() {
        arch.output
    } else {
        Activation::Tanh
    }
}

/// Layer rule written out with explicit indices.
fn layer_rule(arch: &Architecture, wmat: &dyn Fn(usize, usize, usize) -> f64, l: usize, x: &[f64]) -> Vec<f64> {
    let n_in = arch.widths[l];
    (0..arch.widths[l + 1])
        .map(|r| {
            let mut z = 0.0;
            for c in 0..n_in {
                z += wmat(l, r, c) * x[c];
            }
            if arch.bias {
                z += wmat(l, r, n_in);
            }
            act(transition_activation(arch, l), z)
        })
        .collect()
}

/// The action summed term by term from the flat path vector.
pub fn brute_action(ps: &PathState, lib: &PairLibrary, r_m: f64, r_f: f64) -> f64 {
    let lay = &ps.layout;
    let arch = &lay.arch;
    let n_layers = arch.widths.len();
    let last = n_layers - 1;
    let x = |k: usize, l: usize, q: usize| ps.values[lay.activation_index(k, l, q)];
    let wmat = |l: usize, r: usize, c: usize| ps.values[lay.weight_index(l, r, c)];
    let d0 = arch.widths[0];
    let df = arch.widths[last];
    let model_norm: usize = arch.widths[1..].iter().sum();
    let m = lay.m;
    let mut total = 0.0;
    for k in 0..m {
        let mut meas = 0.0;
        for q in 0..d0 {
            meas += (x(k, 0, q) - lib.inputs[k * d0 + q]).powi(2);
        }
        for q in 0..df {
            meas += (x(k, last, q) - lib.outputs[k * df + q]).powi(2);
        }
        let mut model = 0.0;
        for l in 0..last {
            let prev: Vec<f64> = (0..arch.widths[l]).map(|q| x(k, l, q)).collect();
            let next = layer_rule(arch, &wmat, l, &prev);
            for (q, g) in next.iter().enumerate() {
                model += (x(k, l + 1, q) - g).powi(2);
            }
        }
        total += r_m / 2.0 / (d0 + df) as f64 * meas + r_f / 2.0 / model_norm as f64 * model;
    }
    total / m as f64
}

/// Plain forward pass with explicit loops.
pub fn naive_forward(w: &Weights, input: &[f64]) -> Vec<f64> {
    let arch = &w.arch;
    let wmat = |l: usize, r: usize, c: usize| w.matrices[l].data[r * w.matrices[l].cols + c];
    let mut x = input.to_vec();
    for l in 0..arch.widths.len() - 1 {
        x = layer_rule(arch, &wmat, l, &x);
    }
    x
}

/// `(1/N) sum_k (1/D) sum_q (out_q - target_q)^2` with plain summation.
pub fn naive_mse(w: &Weights, inputs: &[f64], targets: &[f64], d: usize) -> f64 {
    let n = inputs.len() / d;
    let mut s = 0.0;
    for k in 0..n {
        let out = naive_forward(w, &inputs[k * d..(k + 1) * d]);
        let mut e = 0.0;
        for q in 0..d {
            e += (out[q] - targets[k * d + q]).powi(2);
        }
        s += e / d as f64;
    }
    s / n as f64
}

/// Mutual information in bits between `s(n)` and `s(n + tau)` after
/// splitting the range at its midpoint, by counting the four symbol pairs.
pub fn two_bin_ami(values: &[f64], tau: usize) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mid = lo + (hi - lo) / 2.0;
    let sym: Vec<usize> = values.iter().map(|&v| usize::from(v >= mid && hi > lo)).collect();
    let n = (values.len() - tau) as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for i in 0..values.len() - tau {
        joint[sym[i]][sym[i + tau]] += 1.0;
    }
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            if joint[a][b] == 0.0 {
                continue;
            }
            let pa = (joint[a][0] + joint[a][1]) / n;
            let pb = (joint[0][b] + joint[1][b]) / n;
            let p = joint[a][b] / n;
            mi += p * (p / (pa * pb)).log2();
        }
    }
    mi
}
