//! Shared fixtures for the benchmarks: deterministic layers, fields, and
//! patch samples at the sizes the training loop actually runs.

use ifgnet_core::data::PatchSample;
use ifgnet_core::kan::KanLayer;
use ifgnet_core::model::{IfgNet, IfgNetConfig};
use ifgnet_core::spatial::{NeighborhoodConfig, SiaUnit};
use ifgnet_core::spline::SplineGrid;
use ifgnet_core::tensor::{DenseTensor, Rng};

pub fn default_grid() -> SplineGrid {
    SplineGrid::new(-3.0, 3.0, 8, 3).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    DenseTensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn demo_kan_layer(in_dim: usize, out_dim: usize) -> KanLayer {
    let mut rng = Rng::new(1);
    KanLayer::new(in_dim, out_dim, default_grid(), &mut rng).unwrap()
}

pub fn demo_sia_unit(latent_dim: usize) -> SiaUnit {
    let mut rng = Rng::new(2);
    SiaUnit::new(latent_dim, NeighborhoodConfig::new(1), &default_grid(), &mut rng).unwrap()
}

pub fn demo_model(patch_side: usize, bands: usize, latent_dim: usize) -> IfgNet {
    let mut cfg = IfgNetConfig::new(patch_side, bands, 4);
    cfg.latent_dim = latent_dim;
    cfg.seed = 3;
    IfgNet::new(cfg).unwrap()
}

pub fn demo_sample(patch_side: usize, bands: usize) -> PatchSample {
    let p2 = patch_side * patch_side;
    PatchSample {
        hsi: random_tensor(&[p2, bands], 4),
        lidar: random_tensor(&[p2, 1], 5),
        label: 0,
        center: (0, 0),
    }
}
