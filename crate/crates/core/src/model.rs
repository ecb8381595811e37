//! Full network assembly: modality encoders feed the spatial and frequency
//! aggregation branches, the branch outputs fuse additively, and a pooled
//! affine head produces class logits. Disabled branches contribute an exact
//! zero tensor, so the fusion site is the same expression for all three
//! model variants. Includes the softmax cross-entropy loss and the binary
//! checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, PatchSample};
use crate::encoders::{Encoder, EncoderCache};
use crate::error::{IfgError, Result};
use crate::frequency::{
    dft2, dft2_adjoint, idft2, idft2_adjoint, ComplexField, FreqCache, FrequencyAggregator,
};
use crate::spatial::{NeighborhoodConfig, SiaCache, SiaUnit};
use crate::spline::SplineGrid;
use crate::tensor::{adam_step, DenseTensor, Parameter, Rng};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IFGK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which aggregation branches are active (the ablation rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SpatialOnly,
    FrequencyOnly,
}

impl Variant {
    pub fn spatial_active(self) -> bool {
        matches!(self, Variant::Full | Variant::SpatialOnly)
    }

    pub fn frequency_active(self) -> bool {
        matches!(self, Variant::Full | Variant::FrequencyOnly)
    }
}

impl std::str::FromStr for Variant {
    type Err = IfgError;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(Variant::Full),
            "spatial-only" | "spatial" => Ok(Variant::SpatialOnly),
            "frequency-only" | "frequency" => Ok(Variant::FrequencyOnly),
            other => Err(IfgError::InvalidArgument(format!(
                "unknown variant '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::SpatialOnly => "spatial-only",
            Variant::FrequencyOnly => "frequency-only",
        })
    }
}

/// How the fused field collapses to one feature vector for the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Mean over all P^2 positions (default).
    MeanPool,
    /// Take the center position only.
    CenterPixel,
}

impl std::str::FromStr for HeadMode {
    type Err = IfgError;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "mean" | "mean-pool" => Ok(HeadMode::MeanPool),
            "center" | "center-pixel" => Ok(HeadMode::CenterPixel),
            other => Err(IfgError::InvalidArgument(format!(
                "unknown head mode '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadMode::MeanPool => "mean",
            HeadMode::CenterPixel => "center",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfgNetConfig {
    /// Patch side P (odd).
    pub patch_side: usize,
    /// HSI band count T.
    pub bands: usize,
    /// Latent width D.
    pub latent_dim: usize,
    /// Class count C.
    pub num_classes: usize,
    pub variant: Variant,
    /// Reuse one SIA parameter set for the spatial unit and both frequency
    /// components instead of three independent instances.
    pub share_sia_params: bool,
    /// Neighborhood radius r for both domains.
    pub window_radius: usize,
    /// Spline grid intervals G.
    pub grid_intervals: usize,
    /// Spline degree k.
    pub spline_degree: usize,
    /// Splines live on [-grid_range, grid_range].
    pub grid_range: f64,
    pub head: HeadMode,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl IfgNetConfig {
    pub fn new(patch_side: usize, bands: usize, num_classes: usize) -> Self {
        IfgNetConfig {
            patch_side,
            bands,
            latent_dim: 32,
            num_classes,
            variant: Variant::Full,
            share_sia_params: false,
            window_radius: 1,
            grid_intervals: 8,
            spline_degree: 3,
            grid_range: 3.0,
            head: HeadMode::MeanPool,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.patch_side % 2 == 0 {
            return Err(IfgError::InvalidArgument(format!(
                "patch side must be odd and positive, got {}",
                self.patch_side
            )));
        }
        if self.bands == 0 || self.latent_dim == 0 || self.num_classes < 2 {
            return Err(IfgError::InvalidArgument(format!(
                "need bands > 0, latent_dim > 0, classes >= 2; got T={}, D={}, C={}",
                self.bands, self.latent_dim, self.num_classes
            )));
        }
        if self.grid_range <= 0.0 {
            return Err(IfgError::InvalidArgument(format!(
                "grid range must be positive, got {}",
                self.grid_range
            )));
        }
        Ok(())
    }

    pub fn spline_grid(&self) -> Result<SplineGrid> {
        SplineGrid::new(
            -self.grid_range,
            self.grid_range,
            self.grid_intervals,
            self.spline_degree,
        )
    }

    fn neighborhood(&self) -> NeighborhoodConfig {
        NeighborhoodConfig::new(self.window_radius)
    }
}

/// Either three independent SIA instances or one shared set of parameters
/// routed through all three roles.
#[derive(Debug, Clone)]
enum SiaStack {
    Separate {
        spatial: SiaUnit,
        freq: FrequencyAggregator,
    },
    Shared {
        unit: SiaUnit,
    },
}

#[derive(Debug, Clone)]
pub struct IfgNet {
    pub config: IfgNetConfig,
    pub hsi_encoder: Encoder,
    pub lidar_encoder: Encoder,
    sia: SiaStack,
    head_weight: Parameter,
    head_bias: Parameter,
    /// Standardization fitted on the training pixels; stored in checkpoints
    /// so evaluation reproduces the exact preprocessing.
    pub norm: Option<NormStats>,
}

pub struct ForwardCache {
    enc_h: EncoderCache,
    enc_l: EncoderCache,
    spa: Option<SiaCache>,
    freq: Option<FreqCache>,
    pooled: Vec<f64>,
    positions: usize,
}

impl IfgNet {
    /// Build a freshly initialized model. Every component of every variant is
    /// constructed in a fixed draw order, so models that differ only in
    /// `variant` start from identical parameters.
    pub fn new(config: IfgNetConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.spline_grid()?;
        let mut rng = Rng::derive(config.seed, 0x4D4F444C); // "MODL"
        let d = config.latent_dim;
        let hsi_encoder = Encoder::hsi(config.bands, d, &grid, &mut rng)?;
        let lidar_encoder = Encoder::lidar(d, &grid, &mut rng)?;
        let nbhd = config.neighborhood();
        let spatial = SiaUnit::new(d, nbhd, &grid, &mut rng)?;
        let sia = if config.share_sia_params {
            SiaStack::Shared { unit: spatial }
        } else {
            SiaStack::Separate {
                spatial,
                freq: FrequencyAggregator::new(d, nbhd, &grid, &mut rng)?,
            }
        };
        let c = config.num_classes;
        let bound = 1.0 / (d as f64).sqrt();
        let w: Vec<f64> = (0..c * d).map(|_| rng.uniform_in(-bound, bound)).collect();
        Ok(IfgNet {
            config,
            hsi_encoder,
            lidar_encoder,
            sia,
            head_weight: Parameter::new(DenseTensor::from_vec(&[c, d], w)?),
            head_bias: Parameter::zeros(&[c]),
            norm: None,
        })
    }

    /// All-zero-parameter model used as the target of checkpoint loads.
    fn zeroed(config: IfgNetConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.spline_grid()?;
        let d = config.latent_dim;
        let nbhd = config.neighborhood();
        let sia = if config.share_sia_params {
            SiaStack::Shared {
                unit: SiaUnit::zeroed(d, nbhd, &grid)?,
            }
        } else {
            SiaStack::Separate {
                spatial: SiaUnit::zeroed(d, nbhd, &grid)?,
                freq: FrequencyAggregator::zeroed(d, nbhd, &grid)?,
            }
        };
        Ok(IfgNet {
            hsi_encoder: Encoder::zeroed(config.bands, d, &grid)?,
            lidar_encoder: Encoder::zeroed(1, d, &grid)?,
            sia,
            head_weight: Parameter::zeros(&[config.num_classes, d]),
            head_bias: Parameter::zeros(&[config.num_classes]),
            norm: None,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    pub fn param_group_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name));
        names
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Parameter)) {
        self.hsi_encoder.visit_params("hsi_encoder", f);
        self.lidar_encoder.visit_params("lidar_encoder", f);
        match &self.sia {
            SiaStack::Separate { spatial, freq } => {
                spatial.visit_params("sia.spatial", f);
                freq.visit_params("sia.freq", f);
            }
            SiaStack::Shared { unit } => unit.visit_params("sia.shared", f),
        }
        f("head.weight".into(), &self.head_weight);
        f("head.bias".into(), &self.head_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.hsi_encoder.visit_params_mut("hsi_encoder", f);
        self.lidar_encoder.visit_params_mut("lidar_encoder", f);
        match &mut self.sia {
            SiaStack::Separate { spatial, freq } => {
                spatial.visit_params_mut("sia.spatial", f);
                freq.visit_params_mut("sia.freq", f);
            }
            SiaStack::Shared { unit } => unit.visit_params_mut("sia.shared", f),
        }
        f("head.weight".into(), &mut self.head_weight);
        f("head.bias".into(), &mut self.head_bias);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn adam_step_all(&mut self, lr: f64) -> Result<()> {
        let mut result = Ok(());
        self.visit_params_mut(&mut |_, p| {
            if result.is_ok() {
                result = adam_step(
                    p,
                    lr,
                    crate::tensor::ADAM_BETA1,
                    crate::tensor::ADAM_BETA2,
                    crate::tensor::ADAM_EPS,
                );
            }
        });
        result
    }

    fn check_sample(&self, sample: &PatchSample) -> Result<usize> {
        let p2 = self.config.patch_side * self.config.patch_side;
        if sample.hsi.shape() != [p2, self.config.bands] {
            return Err(IfgError::shape(
                "model forward hsi",
                format!("[{p2}, {}]", self.config.bands),
                format!("{:?}", sample.hsi.shape()),
            ));
        }
        if sample.lidar.shape() != [p2, 1] {
            return Err(IfgError::shape(
                "model forward lidar",
                format!("[{p2}, 1]"),
                format!("{:?}", sample.lidar.shape()),
            ));
        }
        Ok(p2)
    }

    fn spatial_unit(&self) -> &SiaUnit {
        match &self.sia {
            SiaStack::Separate { spatial, .. } => spatial,
            SiaStack::Shared { unit } => unit,
        }
    }

    /// Mean- or center-pool the fused field into one D-vector.
    fn pool(&self, fused: &DenseTensor) -> Vec<f64> {
        let n = fused.nrows();
        let d = fused.last_dim();
        match self.config.head {
            HeadMode::MeanPool => {
                let mut out = vec![0.0; d];
                for row in 0..n {
                    for (o, v) in out.iter_mut().zip(fused.row(row)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= n as f64);
                out
            }
            HeadMode::CenterPixel => fused.row((n - 1) / 2).to_vec(),
        }
    }

    fn affine(&self, pooled: &[f64]) -> Vec<f64> {
        let d = self.config.latent_dim;
        let w = self.head_weight.value.as_slice();
        let b = self.head_bias.value.as_slice();
        (0..self.config.num_classes)
            .map(|c| {
                b[c] + w[c * d..(c + 1) * d]
                    .iter()
                    .zip(pooled)
                    .map(|(wv, pv)| wv * pv)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Pool + affine head over an already-fused field; exposed for the
    /// fusion-wiring tests.
    pub fn head_logits(&self, fused: &DenseTensor) -> Vec<f64> {
        self.affine(&self.pool(fused))
    }

    /// Branch outputs (F_spa, F_fre) without fusing them.
    pub fn branch_outputs(
        &self,
        sample: &PatchSample,
    ) -> Result<(Option<DenseTensor>, Option<DenseTensor>)> {
        self.check_sample(sample)?;
        let f_h = self.hsi_encoder.infer(&sample.hsi)?;
        let f_l = self.lidar_encoder.infer(&sample.lidar)?;
        let spa = if self.config.variant.spatial_active() {
            Some(self.spatial_unit().infer(&f_h, &f_l)?)
        } else {
            None
        };
        let freq = if self.config.variant.frequency_active() {
            Some(self.freq_infer(&f_h, &f_l)?)
        } else {
            None
        };
        Ok((spa, freq))
    }

    fn freq_infer(&self, f_h: &DenseTensor, f_l: &DenseTensor) -> Result<DenseTensor> {
        match &self.sia {
            SiaStack::Separate { freq, .. } => freq.infer(f_h, f_l),
            SiaStack::Shared { unit } => {
                let h = dft2(f_h)?;
                let l = dft2(f_l)?;
                let g_re = unit.infer(&h.re, &l.re)?;
                let g_im = unit.infer(&h.im, &l.im)?;
                idft2(&ComplexField::new(g_re, g_im)?)
            }
        }
    }

    pub fn forward(&self, sample: &PatchSample) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_masked(
            sample,
            self.config.variant.spatial_active(),
            self.config.variant.frequency_active(),
        )
    }

    /// Forward with explicit branch masks. `forward` derives the masks from
    /// the configured variant; tests use this to force one branch's output
    /// to zero on a full model.
    pub fn forward_masked(
        &self,
        sample: &PatchSample,
        spatial_on: bool,
        freq_on: bool,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let p2 = self.check_sample(sample)?;
        let d = self.config.latent_dim;
        let (f_h, enc_h) = self.hsi_encoder.forward(&sample.hsi)?;
        let (f_l, enc_l) = self.lidar_encoder.forward(&sample.lidar)?;
        let mut fused = DenseTensor::zeros(&[p2, d]);
        let spa = if spatial_on {
            let (out, c) = self.spatial_unit().forward(&f_h, &f_l)?;
            fused.add_assign(&out)?;
            Some(c)
        } else {
            None
        };
        let freq = if freq_on {
            let (out, c) = match &self.sia {
                SiaStack::Separate { freq, .. } => freq.forward(&f_h, &f_l)?,
                SiaStack::Shared { unit } => {
                    let h = dft2(&f_h)?;
                    let l = dft2(&f_l)?;
                    let (g_re, c_re) = unit.forward(&h.re, &l.re)?;
                    let (g_im, c_im) = unit.forward(&h.im, &l.im)?;
                    (
                        idft2(&ComplexField::new(g_re, g_im)?)?,
                        FreqCache { c_re, c_im },
                    )
                }
            };
            fused.add_assign(&out)?;
            Some(c)
        } else {
            None
        };
        let pooled = self.pool(&fused);
        let logits = self.affine(&pooled);
        Ok((
            logits,
            ForwardCache {
                enc_h,
                enc_l,
                spa,
                freq,
                pooled,
                positions: p2,
            },
        ))
    }

    /// Evaluation-time forward without caches.
    pub fn infer(&self, sample: &PatchSample) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let f_h = self.hsi_encoder.infer(&sample.hsi)?;
        let f_l = self.lidar_encoder.infer(&sample.lidar)?;
        let d = self.config.latent_dim;
        let mut fused = DenseTensor::zeros(&[f_h.nrows(), d]);
        if self.config.variant.spatial_active() {
            fused.add_assign(&self.spatial_unit().infer(&f_h, &f_l)?)?;
        }
        if self.config.variant.frequency_active() {
            fused.add_assign(&self.freq_infer(&f_h, &f_l)?)?;
        }
        Ok(self.affine(&self.pool(&fused)))
    }

    /// Accumulate gradients for one sample given dL/dlogits.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &[f64]) -> Result<()> {
        let d = self.config.latent_dim;
        let c = self.config.num_classes;
        if dlogits.len() != c {
            return Err(IfgError::shape("model backward", c, dlogits.len()));
        }
        // head
        let mut dpooled = vec![0.0; d];
        {
            let w = self.head_weight.value.as_slice();
            let dw = self.head_weight.grad.as_mut_slice();
            let db = self.head_bias.grad.as_mut_slice();
            for ci in 0..c {
                db[ci] += dlogits[ci];
                for di in 0..d {
                    dw[ci * d + di] += dlogits[ci] * cache.pooled[di];
                    dpooled[di] += dlogits[ci] * w[ci * d + di];
                }
            }
        }
        // un-pool into the fused field gradient
        let n = cache.positions;
        let mut dfused = DenseTensor::zeros(&[n, d]);
        match self.config.head {
            HeadMode::MeanPool => {
                for row in 0..n {
                    for (dst, &v) in dfused.row_mut(row).iter_mut().zip(&dpooled) {
                        *dst = v / n as f64;
                    }
                }
            }
            HeadMode::CenterPixel => {
                dfused.row_mut((n - 1) / 2).copy_from_slice(&dpooled);
            }
        }
        // branches (additive fusion: both see the same dfused)
        let mut d_fh = DenseTensor::zeros(&[n, d]);
        let mut d_fl = DenseTensor::zeros(&[n, d]);
        if let Some(freq_cache) = &cache.freq {
            let (dh, dl) = match &mut self.sia {
                SiaStack::Separate { freq, .. } => freq.backward(freq_cache, &dfused)?,
                SiaStack::Shared { unit } => {
                    let dg = idft2_adjoint(&dfused)?;
                    let (dh_re, dl_re) = unit.backward(&freq_cache.c_re, &dg.re)?;
                    let (dh_im, dl_im) = unit.backward(&freq_cache.c_im, &dg.im)?;
                    (
                        dft2_adjoint(&ComplexField::new(dh_re, dh_im)?)?,
                        dft2_adjoint(&ComplexField::new(dl_re, dl_im)?)?,
                    )
                }
            };
            d_fh.add_assign(&dh)?;
            d_fl.add_assign(&dl)?;
        }
        if let Some(spa_cache) = &cache.spa {
            let unit = match &mut self.sia {
                SiaStack::Separate { spatial, .. } => spatial,
                SiaStack::Shared { unit } => unit,
            };
            let (dh, dl) = unit.backward(spa_cache, &dfused)?;
            d_fh.add_assign(&dh)?;
            d_fl.add_assign(&dl)?;
        }
        // encoders; gradients wrt the raw patches are discarded
        self.hsi_encoder.backward(&cache.enc_h, &d_fh)?;
        self.lidar_encoder.backward(&cache.enc_l, &d_fl)?;
        Ok(())
    }

    // ---- checkpoint format -------------------------------------------------

    /// Write magic, version, config JSON, then one record per parameter
    /// (name, rank, dims, raw little-endian f64 data). Standardization
    /// statistics ride along as `norm.*` records.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let config_json = serde_json::to_vec(&self.config)?;
        out.write_u32::<LittleEndian>(config_json.len() as u32)?;
        out.write_all(&config_json)?;
        let mut io_err: Result<()> = Ok(());
        self.visit_params(&mut |name, p| {
            if io_err.is_ok() {
                io_err = write_record(&mut out, &name, p.value.shape(), p.value.as_slice());
            }
        });
        io_err?;
        if let Some(norm) = &self.norm {
            write_record(&mut out, "norm.hsi_mean", &[norm.hsi_mean.len()], &norm.hsi_mean)?;
            write_record(&mut out, "norm.hsi_std", &[norm.hsi_std.len()], &norm.hsi_std)?;
            write_record(&mut out, "norm.lidar_mean", &[1], &[norm.lidar_mean])?;
            write_record(&mut out, "norm.lidar_std", &[1], &[norm.lidar_std])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint; the embedded config decides the
    /// architecture.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut rd = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic).map_err(|_| IfgError::Truncated {
            path: path.display().to_string(),
            detail: "missing magic".into(),
        })?;
        if magic != CHECKPOINT_MAGIC {
            return Err(IfgError::BadMagic {
                path: path.display().to_string(),
                expected: CHECKPOINT_MAGIC,
            });
        }
        let version = rd.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(IfgError::VersionMismatch {
                path: path.display().to_string(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let json_len = rd.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; json_len];
        rd.read_exact(&mut json).map_err(|_| IfgError::Truncated {
            path: path.display().to_string(),
            detail: "config block cut short".into(),
        })?;
        let config: IfgNetConfig = serde_json::from_slice(&json)?;
        let mut records = std::collections::BTreeMap::new();
        while let Some((name, shape, data)) = read_record(&mut rd, path)? {
            records.insert(name, (shape, data));
        }
        let mut model = IfgNet::zeroed(config)?;
        let mut fill_err: Result<()> = Ok(());
        model.visit_params_mut(&mut |name, p| {
            if fill_err.is_err() {
                return;
            }
            match records.remove(&name) {
                Some((shape, data)) => {
                    if shape != p.value.shape() {
                        fill_err = Err(IfgError::ConfigMismatch(format!(
                            "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                            p.value.shape()
                        )));
                    } else {
                        p.value.as_mut_slice().copy_from_slice(&data);
                    }
                }
                None => {
                    fill_err = Err(IfgError::Truncated {
                        path: path.display().to_string(),
                        detail: format!("missing parameter record {name}"),
                    })
                }
            }
        });
        fill_err?;
        let norm_keys = [
            "norm.hsi_mean",
            "norm.hsi_std",
            "norm.lidar_mean",
            "norm.lidar_std",
        ];
        let present = norm_keys.iter().filter(|k| records.contains_key(**k)).count();
        if present == 4 {
            let mut take = |k: &str| records.remove(k).unwrap().1;
            model.norm = Some(NormStats {
                hsi_mean: take("norm.hsi_mean"),
                hsi_std: take("norm.hsi_std"),
                lidar_mean: take("norm.lidar_mean")[0],
                lidar_std: take("norm.lidar_std")[0],
            });
        } else if present != 0 {
            return Err(IfgError::Truncated {
                path: path.display().to_string(),
                detail: "partial normalization records".into(),
            });
        }
        if let Some(extra) = records.keys().next() {
            return Err(IfgError::ConfigMismatch(format!(
                "unexpected record '{extra}' in checkpoint"
            )));
        }
        Ok(model)
    }

    /// Load a checkpoint that must match `expected` exactly (variant, dims,
    /// every architectural switch).
    pub fn load_checkpoint_expecting(path: &Path, expected: &IfgNetConfig) -> Result<Self> {
        let model = IfgNet::load_checkpoint(path)?;
        if &model.config != expected {
            return Err(IfgError::ConfigMismatch(format!(
                "checkpoint was built for variant '{}' (P={}, T={}, D={}, C={}), requested \
                 variant '{}' (P={}, T={}, D={}, C={})",
                model.config.variant,
                model.config.patch_side,
                model.config.bands,
                model.config.latent_dim,
                model.config.num_classes,
                expected.variant,
                expected.patch_side,
                expected.bands,
                expected.latent_dim,
                expected.num_classes,
            )));
        }
        Ok(model)
    }
}

fn write_record<W: Write>(out: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    out.write_u32::<LittleEndian>(shape.len() as u32)?;
    for &dim in shape {
        out.write_u32::<LittleEndian>(dim as u32)?;
    }
    for &v in data {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
fn read_record<R: Read>(
    rd: &mut R,
    path: &Path,
) -> Result<Option<(String, Vec<usize>, Vec<f64>)>> {
    let name_len = match rd.read_u32::<LittleEndian>() {
        Ok(v) => v as usize,
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let truncated = |detail: String| IfgError::Truncated {
        path: path.display().to_string(),
        detail,
    };
    let mut name_bytes = vec![0u8; name_len];
    rd.read_exact(&mut name_bytes)
        .map_err(|_| truncated("record name cut short".into()))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| truncated("record name is not UTF-8".into()))?;
    let rank = rd
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated("missing rank".into()))? as usize;
    if rank == 0 || rank > 3 {
        return Err(truncated(format!("record {name} has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(
            rd.read_u32::<LittleEndian>()
                .map_err(|_| truncated("missing dims".into()))? as usize,
        );
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(
            rd.read_f64::<LittleEndian>()
                .map_err(|_| truncated(format!("record {name} data cut short")))?,
        );
    }
    Ok(Some((name, shape, data)))
}

/// Softmax cross-entropy: loss = -log softmax(logits)[label], with the exact
/// gradient dlogits = softmax(logits) - onehot(label).
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(IfgError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut dlogits: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = dlogits.iter().sum();
    let loss = z.ln() + max - logits[label];
    for v in dlogits.iter_mut() {
        *v /= z;
    }
    dlogits[label] -= 1.0;
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatchSample;
    use crate::testutil::{naive_dft2, naive_idft2, naive_kan_forward, naive_sia, rel_err};
    use tempfile::tempdir;

    fn test_config() -> IfgNetConfig {
        let mut cfg = IfgNetConfig::new(3, 4, 3);
        cfg.latent_dim = 8;
        cfg.seed = 7;
        cfg
    }

    fn sample(cfg: &IfgNetConfig, seed: u64) -> PatchSample {
        let mut rng = Rng::new(seed);
        let p2 = cfg.patch_side * cfg.patch_side;
        let hsi: Vec<f64> = (0..p2 * cfg.bands).map(|_| rng.normal()).collect();
        let lidar: Vec<f64> = (0..p2).map(|_| rng.normal()).collect();
        PatchSample {
            hsi: DenseTensor::from_vec(&[p2, cfg.bands], hsi).unwrap(),
            lidar: DenseTensor::from_vec(&[p2, 1], lidar).unwrap(),
            label: 0,
            center: (0, 0),
        }
    }

    #[test]
    fn cross_entropy_worked_examples() {
        let (loss, grad) = cross_entropy(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() <= 1e-15);
        for (c, g) in grad.iter().enumerate() {
            let expect = 0.25 - if c == 2 { 1.0 } else { 0.0 };
            assert!((g - expect).abs() <= 1e-15);
        }
        let (loss, _) = cross_entropy(&[1.0, 2.0, 3.0], 0).unwrap();
        let expect = -1.0 + (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((loss - expect).abs() <= 1e-12);
        let (loss, _) = cross_entropy(&[1000.0, 0.0, 0.0], 0).unwrap();
        assert!(loss.abs() <= 1e-10);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn variants_share_initialization_and_fuse_additively() {
        let cfg = test_config();
        let full = IfgNet::new(cfg.clone()).unwrap();
        let mut cfg_spa = cfg.clone();
        cfg_spa.variant = Variant::SpatialOnly;
        let spa_model = IfgNet::new(cfg_spa).unwrap();
        let mut cfg_fre = cfg.clone();
        cfg_fre.variant = Variant::FrequencyOnly;
        let fre_model = IfgNet::new(cfg_fre).unwrap();

        let s = sample(&cfg, 1);
        // forcing one branch of the full model to zero reproduces the
        // single-branch variants bit-exactly
        let (spa_masked, _) = full.forward_masked(&s, true, false).unwrap();
        let (spa_logits, _) = spa_model.forward(&s).unwrap();
        assert_eq!(spa_masked, spa_logits);
        let (fre_masked, _) = full.forward_masked(&s, false, true).unwrap();
        let (fre_logits, _) = fre_model.forward(&s).unwrap();
        assert_eq!(fre_masked, fre_logits);

        // the two fusion addends commute bit-exactly
        let (spa_out, fre_out) = full.branch_outputs(&s).unwrap();
        let (spa_out, fre_out) = (spa_out.unwrap(), fre_out.unwrap());
        let mut ab = spa_out.clone();
        ab.add_assign(&fre_out).unwrap();
        let mut ba = fre_out.clone();
        ba.add_assign(&spa_out).unwrap();
        assert_eq!(full.head_logits(&ab), full.head_logits(&ba));
        // and they reproduce the full forward
        let (full_logits, _) = full.forward(&s).unwrap();
        assert_eq!(full.head_logits(&ab), full_logits);
    }

    #[test]
    fn forward_matches_scripted_module_oracles() {
        let cfg = test_config();
        let model = IfgNet::new(cfg.clone()).unwrap();
        let s = sample(&cfg, 9);
        let (logits, _) = model.forward(&s).unwrap();

        // straight-line composition of the per-module oracles
        let p = cfg.patch_side;
        let d = cfg.latent_dim;
        let f_h = naive_kan_forward(
            &model.hsi_encoder.layers[1],
            &naive_kan_forward(&model.hsi_encoder.layers[0], &s.hsi),
        );
        let f_l = naive_kan_forward(
            &model.lidar_encoder.layers[1],
            &naive_kan_forward(&model.lidar_encoder.layers[0], &s.lidar),
        );
        let (spatial, freq) = match &model.sia {
            SiaStack::Separate { spatial, freq } => (spatial, freq),
            _ => unreachable!(),
        };
        let spa = naive_sia(spatial, &f_h, &f_l, p);
        let (h_re, h_im) = naive_dft2(&f_h, p);
        let (l_re, l_im) = naive_dft2(&f_l, p);
        let to_t = |v: Vec<f64>| DenseTensor::from_vec(&[p * p, d], v).unwrap();
        let g_re = naive_sia(&freq.sia_re, &to_t(h_re), &to_t(l_re), p);
        let g_im = naive_sia(&freq.sia_im, &to_t(h_im), &to_t(l_im), p);
        let fre = naive_idft2(g_re.as_slice(), g_im.as_slice(), p, d);
        let mut pooled = vec![0.0; d];
        for q in 0..p * p {
            for di in 0..d {
                pooled[di] += (spa.row(q)[di] + fre[q * d + di]) / (p * p) as f64;
            }
        }
        let w = model.head_weight.value.as_slice();
        let b = model.head_bias.value.as_slice();
        for c in 0..cfg.num_classes {
            let expect: f64 = b[c] + (0..d).map(|di| w[c * d + di] * pooled[di]).sum::<f64>();
            assert!(
                (logits[c] - expect).abs() <= 1e-9,
                "logit {c}: {} vs {expect}",
                logits[c]
            );
        }
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let cfg = test_config();
        let model = IfgNet::new(cfg.clone()).unwrap();
        let mut rng = Rng::new(3);
        let p2 = cfg.patch_side * cfg.patch_side;
        let data: Vec<f64> = (0..p2 * cfg.latent_dim).map(|_| rng.normal()).collect();
        let fused = DenseTensor::from_vec(&[p2, cfg.latent_dim], data.clone()).unwrap();
        let base = model.head_logits(&fused);
        let mut perm: Vec<usize> = (0..p2).collect();
        rng.shuffle(&mut perm);
        let mut pdata = vec![0.0; data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            pdata[dst * cfg.latent_dim..(dst + 1) * cfg.latent_dim]
                .copy_from_slice(&data[src * cfg.latent_dim..(src + 1) * cfg.latent_dim]);
        }
        let permuted =
            model.head_logits(&DenseTensor::from_vec(&[p2, cfg.latent_dim], pdata).unwrap());
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn center_head_reads_the_center_position() {
        let mut cfg = test_config();
        cfg.head = HeadMode::CenterPixel;
        let model = IfgNet::new(cfg.clone()).unwrap();
        let p2 = cfg.patch_side * cfg.patch_side;
        let mut fused = DenseTensor::zeros(&[p2, cfg.latent_dim]);
        for (i, v) in fused.row_mut((p2 - 1) / 2).iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let logits = model.head_logits(&fused);
        // zeroing every non-center row must not change anything
        let mut only_center = DenseTensor::zeros(&[p2, cfg.latent_dim]);
        only_center
            .row_mut((p2 - 1) / 2)
            .copy_from_slice(fused.row((p2 - 1) / 2));
        assert_eq!(logits, model.head_logits(&only_center));
    }

    #[test]
    fn end_to_end_gradients_spot_check() {
        let cfg = test_config();
        let mut model = IfgNet::new(cfg.clone()).unwrap();
        let s = sample(&cfg, 5);
        let (logits, cache) = model.forward(&s).unwrap();
        let (_, dlogits) = cross_entropy(&logits, 1).unwrap();
        model.backward(&cache, &dlogits).unwrap();
        let h = 1e-5;
        let names = model.param_group_names();
        let mut checked = 0;
        for (gi, name) in names.iter().enumerate() {
            let (len, grads) = {
                let mut len = 0;
                let mut grads = Vec::new();
                let mut idx = 0;
                model.visit_params(&mut |_, p| {
                    if idx == gi {
                        len = p.len();
                        grads = p.grad.as_slice().to_vec();
                    }
                    idx += 1;
                });
                (len, grads)
            };
            for ci in (0..len).step_by(len / 2 + 1) {
                let probe = |delta: f64| {
                    let mut m2 = model.clone();
                    let mut idx = 0;
                    m2.visit_params_mut(&mut |_, p| {
                        if idx == gi {
                            p.value.as_mut_slice()[ci] += delta;
                        }
                        idx += 1;
                    });
                    let logits = m2.infer(&s).unwrap();
                    cross_entropy(&logits, 1).unwrap().0
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                assert!(
                    rel_err(grads[ci], fd) <= 1e-4,
                    "{name}[{ci}]: {} vs {fd}",
                    grads[ci]
                );
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn shared_sia_gradients_accumulate_across_all_three_roles() {
        let mut cfg = test_config();
        cfg.share_sia_params = true;
        let mut model = IfgNet::new(cfg.clone()).unwrap();
        assert!(model
            .param_group_names()
            .iter()
            .any(|n| n.starts_with("sia.shared")));
        let s = sample(&cfg, 11);
        let (logits, cache) = model.forward(&s).unwrap();
        let (_, dlogits) = cross_entropy(&logits, 2).unwrap();
        model.backward(&cache, &dlogits).unwrap();
        let h = 1e-5;
        let unit = match &model.sia {
            SiaStack::Shared { unit } => unit.clone(),
            _ => unreachable!(),
        };
        for ci in (0..unit.kan.base_weight.len()).step_by(23) {
            let g = unit.kan.base_weight.grad.as_slice()[ci];
            let probe = |delta: f64| {
                let mut m2 = model.clone();
                if let SiaStack::Shared { unit } = &mut m2.sia {
                    unit.kan.base_weight.value.as_mut_slice()[ci] += delta;
                }
                let logits = m2.infer(&s).unwrap();
                cross_entropy(&logits, 2).unwrap().0
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(rel_err(g, fd) <= 1e-4, "shared[{ci}]: {g} vs {fd}");
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = test_config();
        let a = IfgNet::new(cfg.clone()).unwrap();
        let b = IfgNet::new(cfg.clone()).unwrap();
        let s = sample(&cfg, 2);
        assert_eq!(a.infer(&s).unwrap(), b.infer(&s).unwrap());
        assert!(a.param_count() > 0);
        assert_eq!(a.param_group_names(), b.param_group_names());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ifgk");
        let cfg = test_config();
        let mut model = IfgNet::new(cfg.clone()).unwrap();
        model.norm = Some(NormStats {
            hsi_mean: vec![0.1, 0.2, 0.3, 0.4],
            hsi_std: vec![1.0, 2.0, 3.0, 4.0],
            lidar_mean: -0.5,
            lidar_std: 2.5,
        });
        model.save_checkpoint(&path).unwrap();
        let loaded = IfgNet::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.norm, model.norm);
        let s = sample(&cfg, 4);
        let (a, _) = model.forward(&s).unwrap();
        let (b, _) = loaded.forward(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_error_paths_are_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ifgk");
        let cfg = test_config();
        let model = IfgNet::new(cfg.clone()).unwrap();
        model.save_checkpoint(&path).unwrap();

        let good = std::fs::read(&path).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            IfgNet::load_checkpoint(&path),
            Err(IfgError::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            IfgNet::load_checkpoint(&path),
            Err(IfgError::VersionMismatch { found: 9, .. })
        ));

        std::fs::write(&path, &good[..good.len() - 11]).unwrap();
        assert!(matches!(
            IfgNet::load_checkpoint(&path),
            Err(IfgError::Truncated { .. })
        ));

        // variant mismatch on an otherwise valid file
        std::fs::write(&path, &good).unwrap();
        let mut other = cfg.clone();
        other.variant = Variant::SpatialOnly;
        match IfgNet::load_checkpoint_expecting(&path, &other) {
            Err(IfgError::ConfigMismatch(msg)) => {
                assert!(msg.contains("full") && msg.contains("spatial-only"));
            }
            other => panic!("expected ConfigMismatch, got {other:?}"),
        }
    }
}
