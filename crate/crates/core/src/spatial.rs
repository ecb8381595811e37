//! Spatial Implicit Aggregation Unit (SIAU).
//!
//! For every query position `q` on the patch grid, each neighbor `x_k` in a
//! clipped window contributes the input `[f_a(x_k) || f_b(q) || (q - x_k)]`
//! to a shared KAN producing `D` candidate channels plus one unnormalized
//! weight. Weights are softmax-normalized over the neighborhood and the
//! output at `q` is the weighted sum of candidates. `f_a` plays the role of
//! the HSI latents being aggregated; `f_b` is the guidance latent sampled at
//! the query itself.

use crate::error::{IfgError, Result};
use crate::kan::{KanCache, KanLayer};
use crate::spline::SplineGrid;
use crate::tensor::{softmax_slice, DenseTensor, Parameter, Rng};

/// Clipped square window around a grid position. Neighbors outside the grid
/// are dropped, so border queries see fewer of them and the softmax simply
/// renormalizes over what is left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborhoodConfig {
    /// Window radius r; the full window is (2r+1)^2.
    pub window_radius: usize,
    /// Divisor applied to integer offsets; defaults to r so normalized
    /// offsets lie in [-1, 1], inside the well-conditioned spline range.
    pub offset_scale: f64,
}

impl NeighborhoodConfig {
    pub fn new(window_radius: usize) -> Self {
        NeighborhoodConfig {
            window_radius,
            offset_scale: (window_radius.max(1)) as f64,
        }
    }
}

/// One neighbor of a query: its row-major grid index and the normalized
/// offset `(q - x_k) / offset_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub offset: (f64, f64),
}

/// Neighbors of `q` on a `patch_side` x `patch_side` grid, enumerated
/// row-major over the window.
pub fn neighborhood(
    q: (usize, usize),
    patch_side: usize,
    cfg: &NeighborhoodConfig,
) -> Vec<Neighbor> {
    let r = cfg.window_radius as isize;
    let p = patch_side as isize;
    let (qr, qc) = (q.0 as isize, q.1 as isize);
    debug_assert!(qr < p && qc < p);
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dr in -r..=r {
        let nr = qr + dr;
        if nr < 0 || nr >= p {
            continue;
        }
        for dc in -r..=r {
            let nc = qc + dc;
            if nc < 0 || nc >= p {
                continue;
            }
            out.push(Neighbor {
                index: (nr * p + nc) as usize,
                offset: (
                    -(dr as f64) / cfg.offset_scale,
                    -(dc as f64) / cfg.offset_scale,
                ),
            });
        }
    }
    out
}

/// One implicit aggregation operator: a KAN of width 2D+2 -> D+1 plus its
/// neighborhood geometry.
#[derive(Debug, Clone)]
pub struct SiaUnit {
    pub kan: KanLayer,
    pub neighborhood: NeighborhoodConfig,
    pub latent_dim: usize,
}

#[derive(Debug)]
pub struct SiaCache {
    kan_cache: KanCache,
    /// KAN output rows (M, D+1): candidates plus the weight logit.
    kan_out: DenseTensor,
    /// Softmax weights, one per input row.
    alphas: Vec<f64>,
    /// Per-query (start, len) into the row-block, in query order.
    ranges: Vec<(usize, usize)>,
    /// Source grid index of each row's neighbor.
    sources: Vec<usize>,
    rows: usize,
    cols: usize,
}

impl SiaUnit {
    pub fn new(
        latent_dim: usize,
        neighborhood: NeighborhoodConfig,
        grid: &SplineGrid,
        rng: &mut Rng,
    ) -> Result<Self> {
        let kan = KanLayer::new(2 * latent_dim + 2, latent_dim + 1, grid.clone(), rng)?;
        Ok(SiaUnit {
            kan,
            neighborhood,
            latent_dim,
        })
    }

    /// All-zero-parameter unit; used when loading checkpoints.
    pub fn zeroed(
        latent_dim: usize,
        neighborhood: NeighborhoodConfig,
        grid: &SplineGrid,
    ) -> Result<Self> {
        let kan = KanLayer::zeros(2 * latent_dim + 2, latent_dim + 1, grid.clone())?;
        Ok(SiaUnit {
            kan,
            neighborhood,
            latent_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kan.param_count()
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter)) {
        for (name, p) in self.kan.params() {
            f(format!("{prefix}.kan.{name}"), p);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        for (name, p) in self.kan.params_mut() {
            f(format!("{prefix}.kan.{name}"), p);
        }
    }

    fn check_fields(&self, f_a: &DenseTensor, f_b: &DenseTensor) -> Result<usize> {
        let d = self.latent_dim;
        if f_a.rank() != 2 || f_a.last_dim() != d || f_b.shape() != f_a.shape() {
            return Err(IfgError::shape(
                "sia_forward",
                format!("matching (P^2, {d}) fields"),
                format!("{:?} vs {:?}", f_a.shape(), f_b.shape()),
            ));
        }
        let n = f_a.nrows();
        let p = (n as f64).sqrt().round() as usize;
        if p * p != n {
            return Err(IfgError::shape("sia_forward", "square pixel count", n));
        }
        Ok(p)
    }

    /// Default neighbor enumeration for every query on a P x P grid.
    pub fn neighbor_lists(&self, patch_side: usize) -> Vec<Vec<Neighbor>> {
        let mut lists = Vec::with_capacity(patch_side * patch_side);
        for qr in 0..patch_side {
            for qc in 0..patch_side {
                lists.push(neighborhood((qr, qc), patch_side, &self.neighborhood));
            }
        }
        lists
    }

    pub fn forward(
        &self,
        f_a: &DenseTensor,
        f_b: &DenseTensor,
    ) -> Result<(DenseTensor, SiaCache)> {
        let p = self.check_fields(f_a, f_b)?;
        self.forward_over(f_a, f_b, &self.neighbor_lists(p))
    }

    /// Forward with explicit neighbor lists (one per query, query-major).
    /// Exposed so tests can permute enumeration order and the frequency
    /// module can share the machinery.
    pub fn forward_over(
        &self,
        f_a: &DenseTensor,
        f_b: &DenseTensor,
        lists: &[Vec<Neighbor>],
    ) -> Result<(DenseTensor, SiaCache)> {
        self.check_fields(f_a, f_b)?;
        let d = self.latent_dim;
        let (inputs, ranges, sources) = self.assemble(f_a, f_b, lists);
        let (kan_out, kan_cache) = self.kan.forward(&inputs)?;
        let mut out = DenseTensor::zeros(&[lists.len(), d]);
        let mut alphas = vec![0.0; sources.len()];
        for (q, &(start, len)) in ranges.iter().enumerate() {
            let logits: Vec<f64> = (0..len).map(|k| kan_out.row(start + k)[d]).collect();
            softmax_slice(&logits, &mut alphas[start..start + len]);
            let out_row = out.row_mut(q);
            for k in 0..len {
                let a = alphas[start + k];
                let cand = &kan_out.row(start + k)[..d];
                for (o, c) in out_row.iter_mut().zip(cand) {
                    *o += a * c;
                }
            }
        }
        Ok((
            out,
            SiaCache {
                kan_cache,
                kan_out,
                alphas,
                ranges,
                sources,
                rows: f_a.nrows(),
                cols: d,
            },
        ))
    }

    /// Evaluation-time forward without a cache.
    pub fn infer(&self, f_a: &DenseTensor, f_b: &DenseTensor) -> Result<DenseTensor> {
        let p = self.check_fields(f_a, f_b)?;
        let d = self.latent_dim;
        let lists = self.neighbor_lists(p);
        let (inputs, ranges, _) = self.assemble(f_a, f_b, &lists);
        let kan_out = self.kan.infer(&inputs)?;
        let mut out = DenseTensor::zeros(&[lists.len(), d]);
        let mut alpha = Vec::new();
        for (q, &(start, len)) in ranges.iter().enumerate() {
            let logits: Vec<f64> = (0..len).map(|k| kan_out.row(start + k)[d]).collect();
            alpha.resize(len, 0.0);
            softmax_slice(&logits, &mut alpha[..len]);
            let out_row = out.row_mut(q);
            for k in 0..len {
                let cand = &kan_out.row(start + k)[..d];
                for (o, c) in out_row.iter_mut().zip(cand) {
                    *o += alpha[k] * c;
                }
            }
        }
        Ok(out)
    }

    fn assemble(
        &self,
        f_a: &DenseTensor,
        f_b: &DenseTensor,
        lists: &[Vec<Neighbor>],
    ) -> (DenseTensor, Vec<(usize, usize)>, Vec<usize>) {
        let d = self.latent_dim;
        let width = 2 * d + 2;
        let total: usize = lists.iter().map(|l| l.len()).sum();
        let mut data = vec![0.0; total * width];
        let mut ranges = Vec::with_capacity(lists.len());
        let mut sources = Vec::with_capacity(total);
        let mut row = 0;
        for (q, list) in lists.iter().enumerate() {
            ranges.push((row, list.len()));
            for nb in list {
                let dst = &mut data[row * width..(row + 1) * width];
                dst[..d].copy_from_slice(f_a.row(nb.index));
                dst[d..2 * d].copy_from_slice(f_b.row(q));
                dst[2 * d] = nb.offset.0;
                dst[2 * d + 1] = nb.offset.1;
                sources.push(nb.index);
                row += 1;
            }
        }
        (
            DenseTensor::from_vec(&[total, width], data).unwrap(),
            ranges,
            sources,
        )
    }

    /// Backward: exact gradients through the weighted sum, the softmax, and
    /// the internal KAN. Parameter gradients accumulate into the unit;
    /// returns (dF_a, dF_b).
    pub fn backward(
        &mut self,
        cache: &SiaCache,
        d_out: &DenseTensor,
    ) -> Result<(DenseTensor, DenseTensor)> {
        let d = self.latent_dim;
        if d_out.rank() != 2 || d_out.nrows() != cache.ranges.len() || d_out.last_dim() != d {
            return Err(IfgError::shape(
                "sia_backward",
                format!("({}, {d})", cache.ranges.len()),
                format!("{:?}", d_out.shape()),
            ));
        }
        let mut d_kan_out = DenseTensor::zeros(&[cache.sources.len(), d + 1]);
        for (q, &(start, len)) in cache.ranges.iter().enumerate() {
            let g = d_out.row(q);
            // dot_k = <g, cand_k>; dlogit_k = alpha_k (dot_k - sum_j alpha_j dot_j)
            let mut dots = vec![0.0; len];
            let mut weighted = 0.0;
            for k in 0..len {
                let cand = &cache.kan_out.row(start + k)[..d];
                let dot: f64 = g.iter().zip(cand).map(|(a, b)| a * b).sum();
                dots[k] = dot;
                weighted += cache.alphas[start + k] * dot;
            }
            for k in 0..len {
                let a = cache.alphas[start + k];
                let row = d_kan_out.row_mut(start + k);
                for (dst, &gv) in row[..d].iter_mut().zip(g) {
                    *dst = a * gv;
                }
                row[d] = a * (dots[k] - weighted);
            }
        }
        let d_inputs = self.kan.backward(&cache.kan_cache, &d_kan_out)?;
        let mut d_fa = DenseTensor::zeros(&[cache.rows, cache.cols]);
        let mut d_fb = DenseTensor::zeros(&[cache.rows, cache.cols]);
        for (q, &(start, len)) in cache.ranges.iter().enumerate() {
            for k in 0..len {
                let row = d_inputs.row(start + k);
                let fa_row = d_fa.row_mut(cache.sources[start + k]);
                for (dst, &v) in fa_row.iter_mut().zip(&row[..d]) {
                    *dst += v;
                }
                let fb_row = d_fb.row_mut(q);
                for (dst, &v) in fb_row.iter_mut().zip(&row[d..2 * d]) {
                    *dst += v;
                }
            }
        }
        Ok((d_fa, d_fb))
    }
}
