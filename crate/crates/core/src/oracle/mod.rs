//! Brute-force reference implementations used to check the fast paths.
//!
//! Nothing here shares arithmetic helpers with the modules it checks: the
//! outer-product spectrum is computed by nalgebra's symmetric eigensolver,
//! losses by scalar loops, and measures by re-summing the full sample log.

pub mod selfcheck;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{usage, Result};
use crate::fisher::SpectralSample;
use crate::model::{JacobianBatch, MlpSpec};

/// Largest parameter count for which the `P × P` matrix is materialised.
pub const MAX_ORACLE_PARAMS: usize = 64;

/// Eigenvalues (descending) of the `P × P` outer product `Σ_i g_i g_iᵀ` of
/// the Jacobian rows.
pub fn full_fisher_spectrum(j: &JacobianBatch) -> Result<Vec<f64>> {
    let m = &j.matrix;
    let p = m.cols();
    if p == 0 || m.rows() == 0 {
        return usage("outer product of an empty jacobian");
    }
    if p > MAX_ORACLE_PARAMS {
        return usage(format!("oracle limited to {MAX_ORACLE_PARAMS} parameters, got {p}"));
    }
    let mut f = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let mut s = 0.0;
            for i in 0..m.rows() {
                s += m.get(i, a) * m.get(i, b);
            }
            f[(a, b)] = s;
        }
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(f).eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// Per-sample cross-entropy by scalar loops, plus the sign pattern of every
/// hidden pre-activation (`true` where active).
pub fn naive_sample_loss(spec: &MlpSpec, theta: &[f64], x: &[f64], label: usize) -> (f64, Vec<bool>) {
    let widths = &spec.layer_widths;
    let mut act: Vec<f64> = x.to_vec();
    let mut pattern = Vec::new();
    let mut offset = 0;
    let layers = widths.len() - 1;
    for l in 0..layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &theta[offset..offset + n_in * n_out];
        let b = &theta[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = b[o];
            for k in 0..n_in {
                s += w[o * n_in + k] * act[k];
            }
            z[o] = s;
        }
        if l + 1 < layers {
            for v in z.iter_mut() {
                pattern.push(*v > 0.0);
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        act = z;
    }
    let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + act.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - act[label], pattern)
}

/// One central-difference derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCoordinate {
    pub index: usize,
    pub value: f64,
    /// `false` when the ±h perturbation flips a ReLU, i.e. the loss is not
    /// smooth across the stencil.
    pub smooth: bool,
}

/// Central differences `(ℓ(θ + h·e_i) − ℓ(θ − h·e_i)) / 2h` at `coords`.
pub fn finite_difference_gradient(
    spec: &MlpSpec,
    theta: &[f64],
    x: &[f64],
    label: usize,
    h: f64,
    coords: &[usize],
) -> Result<Vec<FdCoordinate>> {
    if !(h > 0.0) {
        return usage(format!("finite-difference step must be positive, got {h}"));
    }
    let (_, base) = naive_sample_loss(spec, theta, x, label);
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= theta.len() {
            return usage(format!("coordinate {i} out of range"));
        }
        let orig = work[i];
        work[i] = orig + h;
        let (up, pu) = naive_sample_loss(spec, &work, x, label);
        work[i] = orig - h;
        let (down, pd) = naive_sample_loss(spec, &work, x, label);
        work[i] = orig;
        out.push(FdCoordinate { index: i, value: (up - down) / (2.0 * h), smooth: pu == base && pd == base });
    }
    Ok(out)
}

/// `(C̄_K, L_K)` for every epoch `1..=epochs`, recomputed from scratch over
/// the full sample log for each `K`.
pub fn flat_measures(samples: &[SpectralSample], epochs: usize) -> Vec<(Option<f64>, f64)> {
    (1..=epochs)
        .map(|k| {
            let upto: Vec<&SpectralSample> = samples.iter().filter(|s| s.epoch <= k).collect();
            let cs: Vec<f64> = upto.iter().filter_map(|s| s.c_k).collect();
            let c_bar = if cs.is_empty() { None } else { Some(cs.iter().sum::<f64>() / cs.len() as f64) };
            (c_bar, upto.iter().map(|s| s.l_k).sum())
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
