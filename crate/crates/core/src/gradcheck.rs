//! Finite-difference verification of every backward pass: KAN layers, the
//! spatial aggregation unit, the frequency path, and the end-to-end loss.
//! Central differences at h = 1e-5 against the analytic gradients, reported
//! per parameter group. The layer-level suites run at 1e-5 relative
//! tolerance, the end-to-end loss at 1e-4.

use crate::data::PatchSample;
use crate::error::Result;
use crate::frequency::FrequencyAggregator;
use crate::kan::KanLayer;
use crate::model::{cross_entropy, IfgNet, IfgNetConfig};
use crate::spatial::{NeighborhoodConfig, SiaUnit};
use crate::spline::SplineGrid;
use crate::tensor::{DenseTensor, Rng};

const FD_STEP: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-5;
const E2E_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    /// Test hook: perturb one analytic gradient so the report must fail.
    pub corrupt_backward: bool,
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl GroupReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass())
    }

    pub fn max_layer_err(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.tolerance == LAYER_TOL)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn max_e2e_err(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.tolerance == E2E_TOL)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// One line per group: name, max relative error, tolerance, verdict.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.groups.iter().map(|g| g.group.len()).max().unwrap_or(0);
        for g in &self.groups {
            out.push_str(&format!(
                "{:<width$}  max_rel_err={:.3e}  tol={:.0e}  coords={:<3}  {}\n",
                g.group,
                g.max_rel_err,
                g.tolerance,
                g.coords_checked,
                if g.pass() { "PASS" } else { "FAIL" },
            ));
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.pass() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

// Central differences of an O(1) loss at h=1e-5 carry ~1e-11 of roundoff,
// so coordinates whose true gradient is below the floor are judged on
// absolute error (1e-9 at the stated tolerance) instead of drowning in
// division noise.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Strided coordinate list: every coordinate for small groups, roughly
/// `target` evenly spaced ones for large groups.
fn coords(len: usize, target: usize) -> Vec<usize> {
    let step = (len / target.max(1)).max(1);
    (0..len).step_by(step).collect()
}

/// Max relative error between recorded analytic gradients and central
/// differences of `eval` under per-coordinate perturbations of `values`.
fn check_coords(
    analytic: &[f64],
    picks: &[usize],
    mut perturb_eval: impl FnMut(usize, f64) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &ci in picks {
        let up = perturb_eval(ci, FD_STEP);
        let down = perturb_eval(ci, -FD_STEP);
        let fd = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel(analytic[ci], fd));
    }
    worst
}

fn kan_layer_section(report: &mut GradcheckReport, opts: &GradcheckOptions) -> Result<()> {
    let grid = SplineGrid::new(-3.0, 3.0, 8, 3)?;
    for (seed, (in_dim, out_dim)) in [(101u64, (1usize, 1usize)), (102, (2, 4)), (103, (4, 2))] {
        let mut rng = Rng::new(seed);
        let mut layer = KanLayer::new(in_dim, out_dim, grid.clone(), &mut rng)?;
        let n = 3;
        let x = DenseTensor::from_vec(
            &[n, in_dim],
            (0..n * in_dim).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
        )?;
        let proj: Vec<f64> = (0..n * out_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let loss = |l: &KanLayer, xs: &DenseTensor| -> f64 {
            l.infer(xs)
                .unwrap()
                .as_slice()
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = layer.forward(&x)?;
        let dy = DenseTensor::from_vec(&[n, out_dim], proj.clone())?;
        let dx = layer.backward(&cache, &dy)?;
        let tag = format!("kan_{in_dim}x{out_dim}");

        let mut dx_analytic = dx.as_slice().to_vec();
        if opts.corrupt_backward && report.groups.is_empty() {
            dx_analytic[0] += 1e-2;
        }
        let picks = coords(dx_analytic.len(), 32);
        let err = check_coords(&dx_analytic, &picks, |ci, delta| {
            let mut x2 = x.clone();
            x2.as_mut_slice()[ci] += delta;
            loss(&layer, &x2)
        });
        report.groups.push(GroupReport {
            group: format!("{tag}.input"),
            max_rel_err: err,
            tolerance: LAYER_TOL,
            coords_checked: picks.len(),
        });

        for pi in 0..3 {
            let (pname, grads) = {
                let (name, p) = &layer.params()[pi];
                (*name, p.grad.as_slice().to_vec())
            };
            let picks = coords(grads.len(), 32);
            let err = check_coords(&grads, &picks, |ci, delta| {
                let mut l2 = layer.clone();
                l2.params_mut()[pi].1.value.as_mut_slice()[ci] += delta;
                loss(&l2, &x)
            });
            report.groups.push(GroupReport {
                group: format!("{tag}.{pname}"),
                max_rel_err: err,
                tolerance: LAYER_TOL,
                coords_checked: picks.len(),
            });
        }
    }
    Ok(())
}

fn siau_section(report: &mut GradcheckReport, latent_dim: usize, patch_side: usize) -> Result<()> {
    let grid = SplineGrid::new(-3.0, 3.0, 8, 3)?;
    let mut rng = Rng::new(201);
    let mut unit = SiaUnit::new(latent_dim, NeighborhoodConfig::new(1), &grid, &mut rng)?;
    let n = patch_side * patch_side;
    let f_a = DenseTensor::from_vec(
        &[n, latent_dim],
        (0..n * latent_dim).map(|_| rng.normal() * 0.8).collect(),
    )?;
    let f_b = DenseTensor::from_vec(
        &[n, latent_dim],
        (0..n * latent_dim).map(|_| rng.normal() * 0.8).collect(),
    )?;
    let proj: Vec<f64> = (0..n * latent_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let loss = |u: &SiaUnit, fa: &DenseTensor, fb: &DenseTensor| -> f64 {
        u.infer(fa, fb)
            .unwrap()
            .as_slice()
            .iter()
            .zip(&proj)
            .map(|(a, b)| a * b)
            .sum()
    };
    let (_, cache) = unit.forward(&f_a, &f_b)?;
    let d_out = DenseTensor::from_vec(&[n, latent_dim], proj.clone())?;
    let (d_fa, d_fb) = unit.backward(&cache, &d_out)?;

    for (name, analytic, which) in [
        ("siau.input_hsi", d_fa.as_slice().to_vec(), 0),
        ("siau.input_lidar", d_fb.as_slice().to_vec(), 1),
    ] {
        let picks = coords(analytic.len(), 48);
        let err = check_coords(&analytic, &picks, |ci, delta| {
            let mut fa2 = f_a.clone();
            let mut fb2 = f_b.clone();
            if which == 0 {
                fa2.as_mut_slice()[ci] += delta;
            } else {
                fb2.as_mut_slice()[ci] += delta;
            }
            loss(&unit, &fa2, &fb2)
        });
        report.groups.push(GroupReport {
            group: name.into(),
            max_rel_err: err,
            tolerance: LAYER_TOL,
            coords_checked: picks.len(),
        });
    }
    for pi in 0..3 {
        let (pname, grads) = {
            let (name, p) = &unit.kan.params()[pi];
            (*name, p.grad.as_slice().to_vec())
        };
        let picks = coords(grads.len(), 48);
        let err = check_coords(&grads, &picks, |ci, delta| {
            let mut u2 = unit.clone();
            u2.kan.params_mut()[pi].1.value.as_mut_slice()[ci] += delta;
            loss(&u2, &f_a, &f_b)
        });
        report.groups.push(GroupReport {
            group: format!("siau.kan.{pname}"),
            max_rel_err: err,
            tolerance: LAYER_TOL,
            coords_checked: picks.len(),
        });
    }
    Ok(())
}

fn frequency_section(
    report: &mut GradcheckReport,
    latent_dim: usize,
    patch_side: usize,
) -> Result<()> {
    let grid = SplineGrid::new(-3.0, 3.0, 8, 3)?;
    let mut rng = Rng::new(301);
    let mut agg = FrequencyAggregator::new(latent_dim, NeighborhoodConfig::new(1), &grid, &mut rng)?;
    let n = patch_side * patch_side;
    let f_h = DenseTensor::from_vec(
        &[n, latent_dim],
        (0..n * latent_dim).map(|_| rng.normal() * 0.6).collect(),
    )?;
    let f_l = DenseTensor::from_vec(
        &[n, latent_dim],
        (0..n * latent_dim).map(|_| rng.normal() * 0.6).collect(),
    )?;
    let proj: Vec<f64> = (0..n * latent_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let loss = |a: &FrequencyAggregator, fh: &DenseTensor, fl: &DenseTensor| -> f64 {
        a.infer(fh, fl)
            .unwrap()
            .as_slice()
            .iter()
            .zip(&proj)
            .map(|(x, y)| x * y)
            .sum()
    };
    let (_, cache) = agg.forward(&f_h, &f_l)?;
    let d_out = DenseTensor::from_vec(&[n, latent_dim], proj.clone())?;
    let (d_fh, d_fl) = agg.backward(&cache, &d_out)?;

    for (name, analytic, which) in [
        ("frequency.input_hsi", d_fh.as_slice().to_vec(), 0),
        ("frequency.input_lidar", d_fl.as_slice().to_vec(), 1),
    ] {
        let picks = coords(analytic.len(), 48);
        let err = check_coords(&analytic, &picks, |ci, delta| {
            let mut fh2 = f_h.clone();
            let mut fl2 = f_l.clone();
            if which == 0 {
                fh2.as_mut_slice()[ci] += delta;
            } else {
                fl2.as_mut_slice()[ci] += delta;
            }
            loss(&agg, &fh2, &fl2)
        });
        report.groups.push(GroupReport {
            group: name.into(),
            max_rel_err: err,
            tolerance: LAYER_TOL,
            coords_checked: picks.len(),
        });
    }
    for (ui, uname) in [(0usize, "re"), (1, "im")] {
        for pi in 0..3 {
            let unit = if ui == 0 { &agg.sia_re } else { &agg.sia_im };
            let (pname, grads) = {
                let (name, p) = &unit.kan.params()[pi];
                (*name, p.grad.as_slice().to_vec())
            };
            let picks = coords(grads.len(), 32);
            let err = check_coords(&grads, &picks, |ci, delta| {
                let mut a2 = agg.clone();
                let u2 = if ui == 0 { &mut a2.sia_re } else { &mut a2.sia_im };
                u2.kan.params_mut()[pi].1.value.as_mut_slice()[ci] += delta;
                loss(&a2, &f_h, &f_l)
            });
            report.groups.push(GroupReport {
                group: format!("frequency.{uname}.kan.{pname}"),
                max_rel_err: err,
                tolerance: LAYER_TOL,
                coords_checked: picks.len(),
            });
        }
    }
    Ok(())
}

fn end_to_end_section(report: &mut GradcheckReport, cfg: &IfgNetConfig) -> Result<()> {
    let mut model = IfgNet::new(cfg.clone())?;
    let mut rng = Rng::new(401);
    let p2 = cfg.patch_side * cfg.patch_side;
    let sample = PatchSample {
        hsi: DenseTensor::from_vec(
            &[p2, cfg.bands],
            (0..p2 * cfg.bands).map(|_| rng.normal()).collect(),
        )?,
        lidar: DenseTensor::from_vec(&[p2, 1], (0..p2).map(|_| rng.normal()).collect())?,
        label: 1,
        center: (0, 0),
    };
    let (logits, cache) = model.forward(&sample)?;
    let (_, dlogits) = cross_entropy(&logits, sample.label)?;
    model.backward(&cache, &dlogits)?;

    let names = model.param_group_names();
    for (gi, name) in names.iter().enumerate() {
        let grads = {
            let mut grads = Vec::new();
            let mut idx = 0;
            model.visit_params(&mut |_, p| {
                if idx == gi {
                    grads = p.grad.as_slice().to_vec();
                }
                idx += 1;
            });
            grads
        };
        // roughly 1% of each group's coordinates, at least 3
        let picks = coords(grads.len(), (grads.len() / 100).max(3));
        let err = check_coords(&grads, &picks, |ci, delta| {
            let mut m2 = model.clone();
            let mut idx = 0;
            m2.visit_params_mut(&mut |_, p| {
                if idx == gi {
                    p.value.as_mut_slice()[ci] += delta;
                }
                idx += 1;
            });
            let logits = m2.infer(&sample).unwrap();
            cross_entropy(&logits, sample.label).unwrap().0
        });
        report.groups.push(GroupReport {
            group: format!("model.{name}"),
            max_rel_err: err,
            tolerance: E2E_TOL,
            coords_checked: picks.len(),
        });
    }
    Ok(())
}

/// Run all four suites on the small verification config (P=3, T=4, D=8, C=3).
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    kan_layer_section(&mut report, opts)?;
    siau_section(&mut report, 8, 3)?;
    frequency_section(&mut report, 8, 3)?;
    let mut cfg = IfgNetConfig::new(3, 4, 3);
    cfg.latent_dim = 8;
    cfg.seed = 40;
    end_to_end_section(&mut report, &cfg)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_everywhere() {
        let report = run(&GradcheckOptions::default()).unwrap();
        assert!(report.pass(), "\n{}", report.render());
        assert!(report.max_layer_err() <= LAYER_TOL);
        assert!(report.max_e2e_err() <= E2E_TOL);
        // every trainable group of the model appears by name
        for needle in [
            "model.hsi_encoder.0.spline_coeffs",
            "model.lidar_encoder.1.base_weight",
            "model.sia.spatial.kan.scale_spline",
            "model.sia.freq.re.kan.spline_coeffs",
            "model.sia.freq.im.kan.base_weight",
            "model.head.weight",
            "model.head.bias",
        ] {
            assert!(
                report.groups.iter().any(|g| g.group == needle),
                "missing group {needle}"
            );
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let report = run(&GradcheckOptions {
            corrupt_backward: true,
        })
        .unwrap();
        assert!(!report.pass());
        let rendered = report.render();
        assert!(rendered.contains("FAIL"));
    }
}
