//! Kolmogorov-Arnold layer: every edge (i -> j) carries a learnable spline
//! plus a SiLU base term,
//!
//! `y[n,j] = sum_i base_weight[j,i] * silu(x[n,i])
//!         + scale_spline[j,i] * sum_b spline_coeffs[j,i,b] * B_b(clamp(x[n,i]))`
//!
//! The spline residual form keeps the all-zero-parameter layer exactly zero
//! and trains stably without grid updates. Inputs are clamped into the grid
//! range before spline evaluation; the SiLU term sees the raw value.

use crate::error::{IfgError, Result};
use crate::spline::SplineGrid;
use crate::tensor::{silu, silu_deriv, DenseTensor, Parameter, Rng};

#[derive(Debug, Clone)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    /// Spline coefficients, shape (out_dim, in_dim, B).
    pub spline_coeffs: Parameter,
    /// SiLU base weights, shape (out_dim, in_dim).
    pub base_weight: Parameter,
    /// Per-edge spline scaling, shape (out_dim, in_dim).
    pub scale_spline: Parameter,
}

/// Everything backward needs from a forward call.
#[derive(Debug, Clone)]
pub struct KanCache {
    x: DenseTensor,
    spans: Vec<u32>,
    basis: Vec<f64>,    // (N * in_dim) * (k+1)
    dbasis: Vec<f64>,   // same layout
    silu_v: Vec<f64>,   // N * in_dim
    dsilu_v: Vec<f64>,  // N * in_dim
    in_range: Vec<bool>, // raw input inside [t_min, t_max]
}

impl KanCache {
    pub fn batch_len(&self) -> usize {
        self.x.nrows()
    }
}

impl KanLayer {
    /// Fresh layer with the initialization scheme used throughout the model:
    /// spline coefficients ~ N(0, 0.1/sqrt(B)), base weights fan-in-scaled
    /// uniform, spline scales 1. Draw order is fixed so that seeded model
    /// construction is reproducible.
    pub fn new(in_dim: usize, out_dim: usize, grid: SplineGrid, rng: &mut Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(IfgError::InvalidArgument(format!(
                "layer dims must be positive, got {in_dim} -> {out_dim}"
            )));
        }
        let b = grid.num_basis();
        let coeff_std = 0.1 / (b as f64).sqrt();
        let coeffs: Vec<f64> = (0..out_dim * in_dim * b)
            .map(|_| rng.normal() * coeff_std)
            .collect();
        let bound = 1.0 / (in_dim as f64).sqrt();
        let base: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Ok(KanLayer {
            in_dim,
            out_dim,
            spline_coeffs: Parameter::new(DenseTensor::from_vec(&[out_dim, in_dim, b], coeffs)?),
            base_weight: Parameter::new(DenseTensor::from_vec(&[out_dim, in_dim], base)?),
            scale_spline: Parameter::new(DenseTensor::from_vec(
                &[out_dim, in_dim],
                vec![1.0; out_dim * in_dim],
            )?),
            grid,
        })
    }

    /// Layer with all parameters zero (forward of anything is zero).
    pub fn zeros(in_dim: usize, out_dim: usize, grid: SplineGrid) -> Result<Self> {
        let b = grid.num_basis();
        Ok(KanLayer {
            in_dim,
            out_dim,
            spline_coeffs: Parameter::zeros(&[out_dim, in_dim, b]),
            base_weight: Parameter::zeros(&[out_dim, in_dim]),
            scale_spline: Parameter::zeros(&[out_dim, in_dim]),
            grid,
        })
    }

    pub fn param_count(&self) -> usize {
        self.spline_coeffs.len() + self.base_weight.len() + self.scale_spline.len()
    }

    pub fn params(&self) -> [(&'static str, &Parameter); 3] {
        [
            ("spline_coeffs", &self.spline_coeffs),
            ("base_weight", &self.base_weight),
            ("scale_spline", &self.scale_spline),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Parameter); 3] {
        [
            ("spline_coeffs", &mut self.spline_coeffs),
            ("base_weight", &mut self.base_weight),
            ("scale_spline", &mut self.scale_spline),
        ]
    }

    fn check_input(&self, x: &DenseTensor, context: &'static str) -> Result<usize> {
        if x.rank() != 2 || x.last_dim() != self.in_dim {
            return Err(IfgError::shape(
                context,
                format!("(N, {})", self.in_dim),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(x.nrows())
    }

    /// Forward pass with cache for backward. Input shape (N, in_dim),
    /// output (N, out_dim).
    pub fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, KanCache)> {
        let n = self.check_input(x, "kan_layer_forward")?;
        let k = self.grid.degree();
        let kw = k + 1;
        let mut cache = KanCache {
            x: x.clone(),
            spans: vec![0; n * self.in_dim],
            basis: vec![0.0; n * self.in_dim * kw],
            dbasis: vec![0.0; n * self.in_dim * kw],
            silu_v: vec![0.0; n * self.in_dim],
            dsilu_v: vec![0.0; n * self.in_dim],
            in_range: vec![false; n * self.in_dim],
        };
        for (c, &xv) in cache.x.as_slice().iter().enumerate() {
            let xc = self.grid.clamp(xv);
            let span = self.grid.find_span(xc);
            cache.spans[c] = span as u32;
            cache.in_range[c] = xv >= self.grid.t_min() && xv <= self.grid.t_max();
            self.grid.basis_and_deriv_local(
                xc,
                span,
                &mut cache.basis[c * kw..(c + 1) * kw],
                &mut cache.dbasis[c * kw..(c + 1) * kw],
            );
            cache.silu_v[c] = silu(xv);
            cache.dsilu_v[c] = silu_deriv(xv);
        }
        let y = self.combine(&cache, n)?;
        Ok((y, cache))
    }

    /// Transposed, pre-scaled weight views built once per call and amortized
    /// over the batch: `w2t[(i*B + b)*out + j] = scale_spline[j,i] *
    /// spline_coeffs[j,i,b]` and `bwt[i*out + j] = base_weight[j,i]`. The
    /// inner loops then run contiguously over the output channels.
    fn transposed_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.grid.num_basis();
        let (in_dim, out_dim) = (self.in_dim, self.out_dim);
        let coeffs = self.spline_coeffs.value.as_slice();
        let bw = self.base_weight.value.as_slice();
        let sc = self.scale_spline.value.as_slice();
        let mut w2t = vec![0.0; in_dim * b * out_dim];
        let mut bwt = vec![0.0; in_dim * out_dim];
        for j in 0..out_dim {
            let edge = j * in_dim;
            for i in 0..in_dim {
                bwt[i * out_dim + j] = bw[edge + i];
                let scv = sc[edge + i];
                let co = (edge + i) * b;
                for bi in 0..b {
                    w2t[(i * b + bi) * out_dim + j] = scv * coeffs[co + bi];
                }
            }
        }
        (w2t, bwt)
    }

    /// Forward without building a cache — evaluation-time fast path.
    pub fn infer(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let n = self.check_input(x, "kan_layer_infer")?;
        let k = self.grid.degree();
        let kw = k + 1;
        let b = self.grid.num_basis();
        let out_dim = self.out_dim;
        let (w2t, bwt) = self.transposed_weights();
        let mut y = DenseTensor::zeros(&[n, out_dim]);
        let mut basis = [0.0; crate::spline::MAX_DEGREE + 1];
        for row in 0..n {
            for i in 0..self.in_dim {
                let xv = x.row(row)[i];
                let xc = self.grid.clamp(xv);
                let span = self.grid.find_span(xc);
                self.grid.basis_local(xc, span, &mut basis);
                let sv = silu(xv);
                let acc = y.row_mut(row);
                let brow = &bwt[i * out_dim..(i + 1) * out_dim];
                for j in 0..out_dim {
                    acc[j] += sv * brow[j];
                }
                let start = span - k;
                for r in 0..kw {
                    let w = basis[r];
                    let wrow = &w2t[(i * b + start + r) * out_dim..][..out_dim];
                    for j in 0..out_dim {
                        acc[j] += w * wrow[j];
                    }
                }
            }
        }
        Ok(y)
    }

    fn combine(&self, cache: &KanCache, n: usize) -> Result<DenseTensor> {
        let k = self.grid.degree();
        let kw = k + 1;
        let b = self.grid.num_basis();
        let out_dim = self.out_dim;
        let (w2t, bwt) = self.transposed_weights();
        let mut y = DenseTensor::zeros(&[n, out_dim]);
        for row in 0..n {
            let cbase = row * self.in_dim;
            let acc = y.row_mut(row);
            for i in 0..self.in_dim {
                let c = cbase + i;
                let sv = cache.silu_v[c];
                let brow = &bwt[i * out_dim..(i + 1) * out_dim];
                for j in 0..out_dim {
                    acc[j] += sv * brow[j];
                }
                let start = cache.spans[c] as usize - k;
                for r in 0..kw {
                    let w = cache.basis[c * kw + r];
                    let wrow = &w2t[(i * b + start + r) * out_dim..][..out_dim];
                    for j in 0..out_dim {
                        acc[j] += w * wrow[j];
                    }
                }
            }
        }
        Ok(y)
    }

    /// Backward pass: returns dL/dx and accumulates parameter gradients.
    /// Clamped inputs receive zero spline-derivative contribution; the SiLU
    /// base term always differentiates against the raw input.
    ///
    /// Gradients are first gathered in the transposed layout of
    /// [`Self::transposed_weights`], then folded back into the parameter
    /// tensors in one pass (d coeffs = dW2 * scale, d scale = dW2 . coeffs).
    pub fn backward(&mut self, cache: &KanCache, dy: &DenseTensor) -> Result<DenseTensor> {
        let n = cache.x.nrows();
        if dy.rank() != 2 || dy.nrows() != n || dy.last_dim() != self.out_dim {
            return Err(IfgError::shape(
                "kan_layer_backward",
                format!("({n}, {})", self.out_dim),
                format!("{:?}", dy.shape()),
            ));
        }
        if cache.x.last_dim() != self.in_dim {
            return Err(IfgError::shape(
                "kan_layer_backward cache",
                format!("(N, {})", self.in_dim),
                format!("{:?}", cache.x.shape()),
            ));
        }
        let k = self.grid.degree();
        let kw = k + 1;
        let b = self.grid.num_basis();
        let (in_dim, out_dim) = (self.in_dim, self.out_dim);
        let (w2t, bwt) = self.transposed_weights();
        let mut dw2t = vec![0.0; in_dim * b * out_dim];
        let mut dbwt = vec![0.0; in_dim * out_dim];
        let mut dx = DenseTensor::zeros(&[n, in_dim]);
        for row in 0..n {
            let cbase = row * in_dim;
            let g = dy.row(row);
            let dx_row = dx.row_mut(row);
            for i in 0..in_dim {
                let c = cbase + i;
                let sv = cache.silu_v[c];
                let brow = &bwt[i * out_dim..(i + 1) * out_dim];
                let dbrow = &mut dbwt[i * out_dim..(i + 1) * out_dim];
                let mut g_dot_bw = 0.0;
                for j in 0..out_dim {
                    dbrow[j] += sv * g[j];
                    g_dot_bw += g[j] * brow[j];
                }
                let mut dxi = cache.dsilu_v[c] * g_dot_bw;
                let start = cache.spans[c] as usize - k;
                let mut spline_dx = 0.0;
                for r in 0..kw {
                    let idx = (i * b + start + r) * out_dim;
                    let wrow = &w2t[idx..idx + out_dim];
                    let dwrow = &mut dw2t[idx..idx + out_dim];
                    let bval = cache.basis[c * kw + r];
                    let mut g_dot_w = 0.0;
                    for j in 0..out_dim {
                        dwrow[j] += bval * g[j];
                        g_dot_w += g[j] * wrow[j];
                    }
                    spline_dx += cache.dbasis[c * kw + r] * g_dot_w;
                }
                if cache.in_range[c] {
                    dxi += spline_dx;
                }
                dx_row[i] += dxi;
            }
        }
        // fold the transposed accumulators into the parameter gradients
        let c_vals = self.spline_coeffs.value.as_slice();
        let sc_vals = self.scale_spline.value.as_slice();
        let d_coeffs = self.spline_coeffs.grad.as_mut_slice();
        let d_bw = self.base_weight.grad.as_mut_slice();
        let d_sc = self.scale_spline.grad.as_mut_slice();
        for j in 0..out_dim {
            let edge = j * in_dim;
            for i in 0..in_dim {
                d_bw[edge + i] += dbwt[i * out_dim + j];
                let scv = sc_vals[edge + i];
                let co = (edge + i) * b;
                let mut dsc = 0.0;
                for bi in 0..b {
                    let dw2 = dw2t[(i * b + bi) * out_dim + j];
                    d_coeffs[co + bi] += dw2 * scv;
                    dsc += dw2 * c_vals[co + bi];
                }
                d_sc[edge + i] += dsc;
            }
        }
        Ok(dx)
    }
}
