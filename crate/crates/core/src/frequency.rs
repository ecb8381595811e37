//! Frequency-domain implicit aggregation: both latent fields go through an
//! unnormalized 2D DFT per channel, the implicit aggregation operator runs
//! component-wise over real and imaginary parts with neighborhoods defined
//! on the (u, v) frequency grid, and the result comes back through a
//! 1/P^2-normalized inverse transform.
//!
//! The two SIA passes are independent nonlinear maps, so the combined
//! spectrum loses conjugate symmetry and the inverse transform is complex in
//! general; only its real part is kept, which is what the additive fusion
//! stage downstream expects.
//!
//! Transforms are computed separably (row pass then column pass, O(P^3) per
//! channel) with per-size twiddle tables. At patch scale there is no need
//! for an FFT.

use crate::error::{IfgError, Result};
use crate::spatial::{SiaCache, SiaUnit};
use crate::spline::SplineGrid;
use crate::tensor::{DenseTensor, Parameter, Rng};

/// Paired real/imaginary feature grids of shape (P^2, D).
#[derive(Debug, Clone)]
pub struct ComplexField {
    pub re: DenseTensor,
    pub im: DenseTensor,
}

impl ComplexField {
    pub fn new(re: DenseTensor, im: DenseTensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(IfgError::shape(
                "ComplexField",
                format!("{:?}", re.shape()),
                format!("{:?}", im.shape()),
            ));
        }
        Ok(ComplexField { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ComplexField {
            re: DenseTensor::zeros(shape),
            im: DenseTensor::zeros(shape),
        }
    }
}

fn square_side(t: &DenseTensor, context: &'static str) -> Result<usize> {
    if t.rank() != 2 {
        return Err(IfgError::shape(context, "(P^2, D)", format!("{:?}", t.shape())));
    }
    let n = t.nrows();
    let p = (n as f64).sqrt().round() as usize;
    if p * p != n {
        return Err(IfgError::shape(context, "square pixel count", n));
    }
    Ok(p)
}

/// One separable complex transform pass along `axis` (0 = rows, 1 = cols)
/// with kernel e^{sign * i * 2*pi * m / P}.
fn pass(
    re_in: &[f64],
    im_in: &[f64],
    p: usize,
    d: usize,
    sign: f64,
    axis: usize,
    re_out: &mut [f64],
    im_out: &mut [f64],
) {
    let cos_t: Vec<f64> = (0..p)
        .map(|m| (std::f64::consts::TAU * m as f64 / p as f64).cos())
        .collect();
    let sin_t: Vec<f64> = (0..p)
        .map(|m| sign * (std::f64::consts::TAU * m as f64 / p as f64).sin())
        .collect();
    for fixed in 0..p {
        for out_idx in 0..p {
            let dst = if axis == 1 {
                (fixed * p + out_idx) * d
            } else {
                (out_idx * p + fixed) * d
            };
            re_out[dst..dst + d].iter_mut().for_each(|v| *v = 0.0);
            im_out[dst..dst + d].iter_mut().for_each(|v| *v = 0.0);
            for sum_idx in 0..p {
                let src = if axis == 1 {
                    (fixed * p + sum_idx) * d
                } else {
                    (sum_idx * p + fixed) * d
                };
                let m = (out_idx * sum_idx) % p;
                let (c, s) = (cos_t[m], sin_t[m]);
                for ch in 0..d {
                    let xr = re_in[src + ch];
                    let xi = im_in[src + ch];
                    re_out[dst + ch] += xr * c - xi * s;
                    im_out[dst + ch] += xr * s + xi * c;
                }
            }
        }
    }
}

fn transform(re: &[f64], im: &[f64], p: usize, d: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let n = p * p * d;
    let mut tr = vec![0.0; n];
    let mut ti = vec![0.0; n];
    pass(re, im, p, d, sign, 1, &mut tr, &mut ti);
    let mut or_ = vec![0.0; n];
    let mut oi = vec![0.0; n];
    pass(&tr, &ti, p, d, sign, 0, &mut or_, &mut oi);
    (or_, oi)
}

/// Unnormalized forward 2D DFT per channel:
/// `H(u,v) = sum_{a,b} h(a,b) e^{-2 pi i (ua + vb) / P}`.
pub fn dft2(field: &DenseTensor) -> Result<ComplexField> {
    let p = square_side(field, "dft2")?;
    let d = field.last_dim();
    let zeros = vec![0.0; field.len()];
    let (re, im) = transform(field.as_slice(), &zeros, p, d, -1.0);
    Ok(ComplexField {
        re: DenseTensor::from_vec(field.shape(), re)?,
        im: DenseTensor::from_vec(field.shape(), im)?,
    })
}

/// 1/P^2-normalized inverse transform; returns the real part only.
pub fn idft2(c: &ComplexField) -> Result<DenseTensor> {
    let p = square_side(&c.re, "idft2")?;
    let d = c.re.last_dim();
    let (mut re, _) = transform(c.re.as_slice(), c.im.as_slice(), p, d, 1.0);
    let norm = 1.0 / (p * p) as f64;
    re.iter_mut().for_each(|v| *v *= norm);
    Ok(DenseTensor::from_vec(c.re.shape(), re)?)
}

/// Adjoint of [`idft2`] restricted to its real output: maps the gradient of
/// a real spatial field back to spectrum gradients (a 1/P^2-scaled forward
/// transform).
pub fn idft2_adjoint(d_out: &DenseTensor) -> Result<ComplexField> {
    let p = square_side(d_out, "idft2_adjoint")?;
    let d = d_out.last_dim();
    let zeros = vec![0.0; d_out.len()];
    let (mut re, mut im) = transform(d_out.as_slice(), &zeros, p, d, -1.0);
    let norm = 1.0 / (p * p) as f64;
    re.iter_mut().for_each(|v| *v *= norm);
    im.iter_mut().for_each(|v| *v *= norm);
    Ok(ComplexField {
        re: DenseTensor::from_vec(d_out.shape(), re)?,
        im: DenseTensor::from_vec(d_out.shape(), im)?,
    })
}

/// Adjoint of [`dft2`] for a real input field: collapses spectrum gradients
/// back to the spatial grid (an unnormalized inverse transform, real part).
pub fn dft2_adjoint(d_spec: &ComplexField) -> Result<DenseTensor> {
    let p = square_side(&d_spec.re, "dft2_adjoint")?;
    let d = d_spec.re.last_dim();
    let (re, _) = transform(d_spec.re.as_slice(), d_spec.im.as_slice(), p, d, 1.0);
    Ok(DenseTensor::from_vec(d_spec.re.shape(), re)?)
}

/// Frequency-domain aggregation: distinct SIA instances for the real and
/// imaginary components (the operator form is shared with the spatial unit,
/// the parameters are not — unless the model-level sharing switch is on, in
/// which case a single unit is routed through these same functions).
#[derive(Debug, Clone)]
pub struct FrequencyAggregator {
    pub sia_re: SiaUnit,
    pub sia_im: SiaUnit,
}

#[derive(Debug)]
pub struct FreqCache {
    pub c_re: SiaCache,
    pub c_im: SiaCache,
}

impl FrequencyAggregator {
    pub fn new(
        latent_dim: usize,
        neighborhood: crate::spatial::NeighborhoodConfig,
        grid: &SplineGrid,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(FrequencyAggregator {
            sia_re: SiaUnit::new(latent_dim, neighborhood, grid, rng)?,
            sia_im: SiaUnit::new(latent_dim, neighborhood, grid, rng)?,
        })
    }

    pub fn zeroed(
        latent_dim: usize,
        neighborhood: crate::spatial::NeighborhoodConfig,
        grid: &SplineGrid,
    ) -> Result<Self> {
        Ok(FrequencyAggregator {
            sia_re: SiaUnit::zeroed(latent_dim, neighborhood, grid)?,
            sia_im: SiaUnit::zeroed(latent_dim, neighborhood, grid)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.sia_re.param_count() + self.sia_im.param_count()
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter)) {
        self.sia_re.visit_params(&format!("{prefix}.re"), f);
        self.sia_im.visit_params(&format!("{prefix}.im"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.sia_re.visit_params_mut(&format!("{prefix}.re"), f);
        self.sia_im.visit_params_mut(&format!("{prefix}.im"), f);
    }

    /// dft2 both modalities, aggregate the real and imaginary spectra with
    /// their own units over frequency-grid neighborhoods, reconstruct via
    /// idft2.
    pub fn forward(
        &self,
        f_hsi: &DenseTensor,
        f_lidar: &DenseTensor,
    ) -> Result<(DenseTensor, FreqCache)> {
        let h = dft2(f_hsi)?;
        let l = dft2(f_lidar)?;
        let (g_re, c_re) = self.sia_re.forward(&h.re, &l.re)?;
        let (g_im, c_im) = self.sia_im.forward(&h.im, &l.im)?;
        let out = idft2(&ComplexField::new(g_re, g_im)?)?;
        Ok((out, FreqCache { c_re, c_im }))
    }

    pub fn infer(&self, f_hsi: &DenseTensor, f_lidar: &DenseTensor) -> Result<DenseTensor> {
        let h = dft2(f_hsi)?;
        let l = dft2(f_lidar)?;
        let g_re = self.sia_re.infer(&h.re, &l.re)?;
        let g_im = self.sia_im.infer(&h.im, &l.im)?;
        idft2(&ComplexField::new(g_re, g_im)?)
    }

    /// Gradients flow through the IDFT adjoint, both SIA units, and the
    /// forward-DFT adjoints; returns (dF_hsi, dF_lidar).
    pub fn backward(
        &mut self,
        cache: &FreqCache,
        d_out: &DenseTensor,
    ) -> Result<(DenseTensor, DenseTensor)> {
        let dg = idft2_adjoint(d_out)?;
        let (dh_re, dl_re) = self.sia_re.backward(&cache.c_re, &dg.re)?;
        let (dh_im, dl_im) = self.sia_im.backward(&cache.c_im, &dg.im)?;
        let d_hsi = dft2_adjoint(&ComplexField::new(dh_re, dh_im)?)?;
        let d_lidar = dft2_adjoint(&ComplexField::new(dl_re, dl_im)?)?;
        Ok((d_hsi, d_lidar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::NeighborhoodConfig;
    use crate::testutil::rel_err;

    fn grid() -> SplineGrid {
        SplineGrid::new(-3.0, 3.0, 8, 3).unwrap()
    }

    fn random_field(p: usize, d: usize, seed: u64) -> DenseTensor {
        let mut rng = Rng::new(seed);
        let data = (0..p * p * d).map(|_| rng.normal()).collect();
        DenseTensor::from_vec(&[p * p, d], data).unwrap()
    }

    use crate::testutil::naive_dft2;

    #[test]
    fn constant_field_is_dc_only() {
        let c = 1.7;
        let p = 4;
        let field = DenseTensor::from_vec(&[p * p, 1], vec![c; p * p]).unwrap();
        let spec = dft2(&field).unwrap();
        assert!((spec.re.as_slice()[0] - c * (p * p) as f64).abs() <= 1e-12);
        for i in 1..p * p {
            assert!(spec.re.as_slice()[i].abs() <= 1e-12);
        }
        assert!(spec.im.as_slice().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn unit_impulse_has_flat_spectrum() {
        let p = 3;
        let mut data = vec![0.0; p * p];
        data[0] = 1.0;
        let field = DenseTensor::from_vec(&[p * p, 1], data).unwrap();
        let spec = dft2(&field).unwrap();
        for i in 0..p * p {
            assert!((spec.re.as_slice()[i] - 1.0).abs() <= 1e-12);
            assert!(spec.im.as_slice()[i].abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_naive_double_sum() {
        for p in [2usize, 3, 5] {
            let field = random_field(p, 3, 100 + p as u64);
            let spec = dft2(&field).unwrap();
            let (re, im) = naive_dft2(&field, p);
            for i in 0..p * p * 3 {
                assert!((spec.re.as_slice()[i] - re[i]).abs() <= 1e-10);
                assert!((spec.im.as_slice()[i] - im[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn non_square_pixel_count_rejected() {
        let field = DenseTensor::zeros(&[8, 2]);
        assert!(dft2(&field).is_err());
    }

    #[test]
    fn roundtrip_identity() {
        let field = random_field(4, 3, 7);
        let back = idft2(&dft2(&field).unwrap()).unwrap();
        for (a, b) in field.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_and_dc_spectra() {
        let z = ComplexField::zeros(&[9, 2]);
        assert!(idft2(&z).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let p = 3;
        let c = -0.6;
        let mut dc = ComplexField::zeros(&[p * p, 1]);
        dc.re.as_mut_slice()[0] = c * (p * p) as f64;
        let field = idft2(&dc).unwrap();
        for &v in field.as_slice() {
            assert!((v - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn conjugate_symmetry_of_real_input() {
        let p = 5;
        let field = random_field(p, 2, 42);
        let spec = dft2(&field).unwrap();
        for u in 0..p {
            for v in 0..p {
                let (mu, mv) = ((p - u) % p, (p - v) % p);
                for ch in 0..2 {
                    let re1 = spec.re.as_slice()[(u * p + v) * 2 + ch];
                    let re2 = spec.re.as_slice()[(mu * p + mv) * 2 + ch];
                    let im1 = spec.im.as_slice()[(u * p + v) * 2 + ch];
                    let im2 = spec.im.as_slice()[(mu * p + mv) * 2 + ch];
                    assert!((re1 - re2).abs() <= 1e-10);
                    assert!((im1 + im2).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn parseval_and_linearity() {
        let p = 4;
        let x = random_field(p, 2, 1);
        let y = random_field(p, 2, 2);
        let sx = dft2(&x).unwrap();
        let energy_spatial: f64 = x.as_slice().iter().map(|v| v * v).sum();
        let energy_spec: f64 = sx
            .re
            .as_slice()
            .iter()
            .zip(sx.im.as_slice())
            .map(|(r, i)| r * r + i * i)
            .sum();
        let rel = (energy_spatial * (p * p) as f64 - energy_spec).abs() / energy_spec;
        assert!(rel <= 1e-8, "parseval violated: rel {rel}");

        let (a, b) = (0.7, -1.3);
        let mut combo = x.clone();
        combo.scale(a);
        let mut yb = y.clone();
        yb.scale(b);
        combo.add_assign(&yb).unwrap();
        let sc = dft2(&combo).unwrap();
        let sy = dft2(&y).unwrap();
        for i in 0..p * p * 2 {
            let expect = a * sx.re.as_slice()[i] + b * sy.re.as_slice()[i];
            assert!((sc.re.as_slice()[i] - expect).abs() <= 1e-10);
            let expect = a * sx.im.as_slice()[i] + b * sy.im.as_slice()[i];
            assert!((sc.im.as_slice()[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn zeroed_units_map_zero_to_zero() {
        let mut rng = Rng::new(3);
        let d = 2;
        let mut agg =
            FrequencyAggregator::new(d, NeighborhoodConfig::new(1), &grid(), &mut rng).unwrap();
        for unit in [&mut agg.sia_re, &mut agg.sia_im] {
            for (_, p) in unit.kan.params_mut() {
                p.value.fill(0.0);
            }
        }
        let zero = DenseTensor::zeros(&[9, d]);
        let (out, _) = agg.forward(&zero, &zero).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = Rng::new(5);
        let d = 2;
        let agg =
            FrequencyAggregator::new(d, NeighborhoodConfig::new(1), &grid(), &mut rng).unwrap();
        for p in [3usize, 5, 9] {
            let h = random_field(p, d, p as u64);
            let l = random_field(p, d, 2 * p as u64);
            let (out, _) = agg.forward(&h, &l).unwrap();
            assert_eq!(out.shape(), &[p * p, d]);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut rng = Rng::new(6);
        let d = 2;
        let mut agg =
            FrequencyAggregator::new(d, NeighborhoodConfig::new(1), &grid(), &mut rng).unwrap();
        let h = random_field(3, d, 10);
        let l = random_field(3, d, 11);
        let (_, cache) = agg.forward(&h, &l).unwrap();
        let (dh, dl) = agg.backward(&cache, &DenseTensor::zeros(&[9, d])).unwrap();
        assert!(dh.as_slice().iter().all(|&v| v == 0.0));
        assert!(dl.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_is_linear() {
        let p = 3;
        let x = random_field(p, 2, 20);
        let y = random_field(p, 2, 21);
        let mut sum = x.clone();
        sum.add_assign(&y).unwrap();
        let gx = idft2_adjoint(&x).unwrap();
        let gy = idft2_adjoint(&y).unwrap();
        let gs = idft2_adjoint(&sum).unwrap();
        for i in 0..p * p * 2 {
            assert!(
                (gs.re.as_slice()[i] - gx.re.as_slice()[i] - gy.re.as_slice()[i]).abs() <= 1e-10
            );
            assert!(
                (gs.im.as_slice()[i] - gx.im.as_slice()[i] - gy.im.as_slice()[i]).abs() <= 1e-10
            );
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        let d = 2;
        let p = 3;
        let mut agg =
            FrequencyAggregator::new(d, NeighborhoodConfig::new(1), &grid(), &mut rng).unwrap();
        let f_h = random_field(p, d, 30);
        let f_l = random_field(p, d, 31);
        let proj: Vec<f64> = (0..p * p * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let loss = |agg: &FrequencyAggregator, fh: &DenseTensor, fl: &DenseTensor| -> f64 {
            let out = agg.infer(fh, fl).unwrap();
            out.as_slice().iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = agg.forward(&f_h, &f_l).unwrap();
        let d_out = DenseTensor::from_vec(&[p * p, d], proj.clone()).unwrap();
        let (dh, dl) = agg.backward(&cache, &d_out).unwrap();
        let h = 1e-5;
        for i in 0..p * p * d {
            let mut fh2 = f_h.clone();
            fh2.as_mut_slice()[i] += h;
            let up = loss(&agg, &fh2, &f_l);
            fh2.as_mut_slice()[i] -= 2.0 * h;
            let dn = loss(&agg, &fh2, &f_l);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                rel_err(dh.as_slice()[i], fd) <= 1e-5,
                "dF_hsi[{i}]: {} vs {fd}",
                dh.as_slice()[i]
            );
            let mut fl2 = f_l.clone();
            fl2.as_mut_slice()[i] += h;
            let up = loss(&agg, &f_h, &fl2);
            fl2.as_mut_slice()[i] -= 2.0 * h;
            let dn = loss(&agg, &f_h, &fl2);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                rel_err(dl.as_slice()[i], fd) <= 1e-5,
                "dF_lidar[{i}]: {} vs {fd}",
                dl.as_slice()[i]
            );
        }
        // parameters of both units, strided
        for (ui, unit) in [&agg.sia_re, &agg.sia_im].iter().enumerate() {
            for pi in 0..3 {
                let n = unit.kan.params()[pi].1.len();
                for ci in (0..n).step_by(11) {
                    let g = unit.kan.params()[pi].1.grad.as_slice()[ci];
                    let probe = |delta: f64| {
                        let mut a2 = agg.clone();
                        let u = if ui == 0 { &mut a2.sia_re } else { &mut a2.sia_im };
                        u.kan.params_mut()[pi].1.value.as_mut_slice()[ci] += delta;
                        loss(&a2, &f_h, &f_l)
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    assert!(
                        rel_err(g, fd) <= 1e-5,
                        "unit {ui} param {pi}[{ci}]: {g} vs {fd}"
                    );
                }
            }
        }
    }
}
