//! Independent oracles shared by unit tests. Everything here is a literal
//! transcription of the defining formulas, kept free of the optimized code
//! paths it is used to check.

use crate::kan::KanLayer;
use crate::tensor::DenseTensor;

/// Cox-de Boor by direct recursion over the full knot vector.
pub fn naive_basis(i: usize, k: usize, x: f64, t: &[f64]) -> f64 {
    if k == 0 {
        return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    if t[i + k] > t[i] {
        v += (x - t[i]) / (t[i + k] - t[i]) * naive_basis(i, k - 1, x, t);
    }
    if t[i + k + 1] > t[i + 1] {
        v += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * naive_basis(i + 1, k - 1, x, t);
    }
    v
}

/// KAN layer forward as a double loop over edges and the full basis vector.
pub fn naive_kan_forward(layer: &KanLayer, x: &DenseTensor) -> DenseTensor {
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let b = layer.grid.num_basis();
    let k = layer.grid.degree();
    let t = layer.grid.knots();
    let coeffs = layer.spline_coeffs.value.as_slice();
    let bw = layer.base_weight.value.as_slice();
    let sc = layer.scale_spline.value.as_slice();
    let mut y = DenseTensor::zeros(&[x.nrows(), layer.out_dim]);
    for n in 0..x.nrows() {
        for j in 0..layer.out_dim {
            let mut acc = 0.0;
            for i in 0..layer.in_dim {
                let xv = x.row(n)[i];
                let xc = xv.clamp(layer.grid.t_min(), layer.grid.t_max());
                let mut spline = 0.0;
                for bi in 0..b {
                    spline += coeffs[(j * layer.in_dim + i) * b + bi] * naive_basis(bi, k, xc, t);
                }
                acc += bw[j * layer.in_dim + i] * silu(xv) + sc[j * layer.in_dim + i] * spline;
            }
            y.row_mut(n)[j] = acc;
        }
    }
    y
}

/// Relative error with an absolute floor, for finite-difference comparisons.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Brute-force SIA: per query, per neighbor, run a naive KAN on the
/// concatenated input, softmax the last channel, weighted-sum candidates.
pub fn naive_sia(
    unit: &crate::spatial::SiaUnit,
    f_a: &DenseTensor,
    f_b: &DenseTensor,
    p: usize,
) -> DenseTensor {
    let d = unit.latent_dim;
    let mut out = DenseTensor::zeros(&[p * p, d]);
    for qr in 0..p {
        for qc in 0..p {
            let q = qr * p + qc;
            let nbs = crate::spatial::neighborhood((qr, qc), p, &unit.neighborhood);
            let mut cands = Vec::new();
            let mut logits = Vec::new();
            for nb in &nbs {
                let mut input = vec![0.0; 2 * d + 2];
                input[..d].copy_from_slice(f_a.row(nb.index));
                input[d..2 * d].copy_from_slice(f_b.row(q));
                input[2 * d] = nb.offset.0;
                input[2 * d + 1] = nb.offset.1;
                let x = DenseTensor::from_vec(&[1, 2 * d + 2], input).unwrap();
                let v = naive_kan_forward(&unit.kan, &x);
                cands.push(v.row(0)[..d].to_vec());
                logits.push(v.row(0)[d]);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (k, cand) in cands.iter().enumerate() {
                for i in 0..d {
                    out.row_mut(q)[i] += exps[k] / z * cand[i];
                }
            }
        }
    }
    out
}

/// Literal O(P^4) double-sum DFT per channel; returns (re, im) flat data.
pub fn naive_dft2(field: &DenseTensor, p: usize) -> (Vec<f64>, Vec<f64>) {
    let d = field.last_dim();
    let mut re = vec![0.0; p * p * d];
    let mut im = vec![0.0; p * p * d];
    for u in 0..p {
        for v in 0..p {
            for a in 0..p {
                for b in 0..p {
                    let angle = -std::f64::consts::TAU * ((u * a + v * b) as f64) / p as f64;
                    for ch in 0..d {
                        let x = field.as_slice()[(a * p + b) * d + ch];
                        re[(u * p + v) * d + ch] += x * angle.cos();
                        im[(u * p + v) * d + ch] += x * angle.sin();
                    }
                }
            }
        }
    }
    (re, im)
}

/// Literal 1/P^2-normalized inverse transform; returns the real part.
pub fn naive_idft2(re: &[f64], im: &[f64], p: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * p * d];
    for a in 0..p {
        for b in 0..p {
            for u in 0..p {
                for v in 0..p {
                    let angle = std::f64::consts::TAU * ((u * a + v * b) as f64) / p as f64;
                    for ch in 0..d {
                        out[(a * p + b) * d + ch] += re[(u * p + v) * d + ch] * angle.cos()
                            - im[(u * p + v) * d + ch] * angle.sin();
                    }
                }
            }
        }
    }
    let norm = 1.0 / (p * p) as f64;
    out.iter_mut().for_each(|v| *v *= norm);
    out
}
