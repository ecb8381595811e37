//! Modality-specific encoders: two stacked KAN layers mapping each pixel of
//! a patch independently into the shared latent space of width `D`. The HSI
//! encoder consumes all `T` bands, the LiDAR encoder a single channel; no
//! cross-pixel mixing happens here.

use crate::error::{IfgError, Result};
use crate::kan::{KanCache, KanLayer};
use crate::spline::SplineGrid;
use crate::tensor::{DenseTensor, Parameter, Rng};

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: [KanLayer; 2],
}

#[derive(Debug)]
pub struct EncoderCache {
    c0: KanCache,
    c1: KanCache,
}

impl Encoder {
    pub fn new(in_dim: usize, latent_dim: usize, grid: &SplineGrid, rng: &mut Rng) -> Result<Self> {
        Ok(Encoder {
            layers: [
                KanLayer::new(in_dim, latent_dim, grid.clone(), rng)?,
                KanLayer::new(latent_dim, latent_dim, grid.clone(), rng)?,
            ],
        })
    }

    /// Encoder for HSI spectral vectors (T bands -> D).
    pub fn hsi(bands: usize, latent_dim: usize, grid: &SplineGrid, rng: &mut Rng) -> Result<Self> {
        Encoder::new(bands, latent_dim, grid, rng)
    }

    /// Encoder for scalar LiDAR values (1 -> D).
    pub fn lidar(latent_dim: usize, grid: &SplineGrid, rng: &mut Rng) -> Result<Self> {
        Encoder::new(1, latent_dim, grid, rng)
    }

    /// All-zero-parameter encoder; used when loading checkpoints.
    pub fn zeroed(in_dim: usize, latent_dim: usize, grid: &SplineGrid) -> Result<Self> {
        Ok(Encoder {
            layers: [
                KanLayer::zeros(in_dim, latent_dim, grid.clone())?,
                KanLayer::zeros(latent_dim, latent_dim, grid.clone())?,
            ],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter)) {
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.params() {
                f(format!("{prefix}.{li}.{name}"), p);
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.params_mut() {
                f(format!("{prefix}.{li}.{name}"), p);
            }
        }
    }

    /// Encode a patch of shape (P^2, C) into (P^2, D). Errors if the channel
    /// count does not match the modality.
    pub fn forward(&self, patch: &DenseTensor) -> Result<(DenseTensor, EncoderCache)> {
        if patch.rank() != 2 || patch.last_dim() != self.in_dim() {
            return Err(IfgError::shape(
                "encode",
                format!("(P^2, {})", self.in_dim()),
                format!("{:?}", patch.shape()),
            ));
        }
        let (h, c0) = self.layers[0].forward(patch)?;
        let (y, c1) = self.layers[1].forward(&h)?;
        Ok((y, EncoderCache { c0, c1 }))
    }

    pub fn infer(&self, patch: &DenseTensor) -> Result<DenseTensor> {
        if patch.rank() != 2 || patch.last_dim() != self.in_dim() {
            return Err(IfgError::shape(
                "encode",
                format!("(P^2, {})", self.in_dim()),
                format!("{:?}", patch.shape()),
            ));
        }
        self.layers[1].infer(&self.layers[0].infer(patch)?)
    }

    pub fn backward(&mut self, cache: &EncoderCache, dy: &DenseTensor) -> Result<DenseTensor> {
        let dh = self.layers[1].backward(&cache.c1, dy)?;
        self.layers[0].backward(&cache.c0, &dh)
    }
}
