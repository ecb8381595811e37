//! Scene IO, standardization, patch extraction, class-balanced splits, and
//! the synthetic HSI+LiDAR scene generator used for desk-scale verification.
//!
//! File formats (little-endian throughout):
//!
//! - cube:   magic `IFGC`, u32 version = 1, u32 H, u32 W, u32 C, then
//!           H*W*C f32 values, row-major, channel-fastest
//! - labels: magic `IFGL`, u32 version = 1, u32 H, u32 W, then H*W u16
//!           labels, 0 = unlabeled, 1..=C = classes

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{IfgError, Result};
use crate::tensor::{DenseTensor, Rng};

pub const CUBE_MAGIC: [u8; 4] = *b"IFGC";
pub const LABEL_MAGIC: [u8; 4] = *b"IFGL";
pub const CUBE_VERSION: u32 = 1;

/// Co-registered HSI cube, LiDAR raster, and label map sharing one H x W grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// H*W*T, row-major, band-fastest.
    pub hsi: Vec<f64>,
    /// H*W elevation values.
    pub lidar: Vec<f64>,
    /// H*W labels; 0 = unlabeled.
    pub labels: Vec<u16>,
}

impl SceneCube {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn label_at(&self, idx: usize) -> u16 {
        self.labels[idx]
    }

    /// Highest label value present (the class count C).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.pixel_count())
            .filter(|&i| self.labels[i] > 0)
            .collect()
    }

    fn hsi_at(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.bands;
        &self.hsi[base..base + self.bands]
    }

    pub fn write(
        &self,
        hsi_path: &Path,
        lidar_path: &Path,
        label_path: &Path,
    ) -> Result<()> {
        write_cube(hsi_path, self.height, self.width, self.bands, &self.hsi)?;
        write_cube(lidar_path, self.height, self.width, 1, &self.lidar)?;
        write_labels(label_path, self.height, self.width, &self.labels)
    }
}

pub fn write_cube(path: &Path, h: usize, w: usize, c: usize, data: &[f64]) -> Result<()> {
    if data.len() != h * w * c {
        return Err(IfgError::shape("write_cube", h * w * c, data.len()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CUBE_MAGIC)?;
    out.write_u32::<LittleEndian>(CUBE_VERSION)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    out.write_u32::<LittleEndian>(c as u32)?;
    for &v in data {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    out.flush()?;
    Ok(())
}

fn read_magic(reader: &mut impl Read, path: &Path, expected: [u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| IfgError::Truncated {
        path: path.display().to_string(),
        detail: "missing magic".into(),
    })?;
    if magic != expected {
        return Err(IfgError::BadMagic {
            path: path.display().to_string(),
            expected,
        });
    }
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut rd = BufReader::new(File::open(path)?);
    read_magic(&mut rd, path, CUBE_MAGIC)?;
    let version = rd.read_u32::<LittleEndian>()?;
    if version != CUBE_VERSION {
        return Err(IfgError::VersionMismatch {
            path: path.display().to_string(),
            found: version,
            expected: CUBE_VERSION,
        });
    }
    let h = rd.read_u32::<LittleEndian>()? as usize;
    let w = rd.read_u32::<LittleEndian>()? as usize;
    let c = rd.read_u32::<LittleEndian>()? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| IfgError::Truncated {
            path: path.display().to_string(),
            detail: "absurd dimensions".into(),
        })?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = rd.read_f32::<LittleEndian>().map_err(|_| IfgError::Truncated {
            path: path.display().to_string(),
            detail: format!("expected {n} f32 values"),
        })?;
        data.push(v as f64);
    }
    Ok((h, w, c, data))
}

pub fn write_labels(path: &Path, h: usize, w: usize, labels: &[u16]) -> Result<()> {
    if labels.len() != h * w {
        return Err(IfgError::shape("write_labels", h * w, labels.len()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&LABEL_MAGIC)?;
    out.write_u32::<LittleEndian>(CUBE_VERSION)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    for &v in labels {
        out.write_u16::<LittleEndian>(v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut rd = BufReader::new(File::open(path)?);
    read_magic(&mut rd, path, LABEL_MAGIC)?;
    let version = rd.read_u32::<LittleEndian>()?;
    if version != CUBE_VERSION {
        return Err(IfgError::VersionMismatch {
            path: path.display().to_string(),
            found: version,
            expected: CUBE_VERSION,
        });
    }
    let h = rd.read_u32::<LittleEndian>()? as usize;
    let w = rd.read_u32::<LittleEndian>()? as usize;
    let mut labels = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let v = rd.read_u16::<LittleEndian>().map_err(|_| IfgError::Truncated {
            path: path.display().to_string(),
            detail: format!("expected {} u16 labels", h * w),
        })?;
        labels.push(v);
    }
    Ok((h, w, labels))
}

/// Load and cross-validate the three scene files. Data is raw at this point;
/// standardization happens once the train split is known.
pub fn load_scene(hsi_path: &Path, lidar_path: &Path, label_path: &Path) -> Result<SceneCube> {
    let (h, w, bands, hsi) = read_cube(hsi_path)?;
    let (lh, lw, lc, lidar) = read_cube(lidar_path)?;
    if (lh, lw) != (h, w) || lc != 1 {
        return Err(IfgError::shape(
            "load_scene lidar",
            format!("{h}x{w}x1"),
            format!("{lh}x{lw}x{lc}"),
        ));
    }
    let (gh, gw, labels) = read_labels(label_path)?;
    if (gh, gw) != (h, w) {
        return Err(IfgError::shape(
            "load_scene labels",
            format!("{h}x{w}"),
            format!("{gh}x{gw}"),
        ));
    }
    if hsi.iter().chain(lidar.iter()).any(|v| !v.is_finite()) {
        return Err(IfgError::NonFinite("scene data"));
    }
    Ok(SceneCube {
        height: h,
        width: w,
        bands,
        hsi,
        lidar,
        labels,
    })
}

/// Per-band standardization statistics, fit on train pixels only and
/// persisted inside checkpoints so evaluation applies the exact same affine
/// map to new scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub hsi_mean: Vec<f64>,
    pub hsi_std: Vec<f64>,
    pub lidar_mean: f64,
    pub lidar_std: f64,
}

impl NormStats {
    /// Mean/std over the given train pixel indices (population std, floored
    /// to avoid division by zero on constant bands).
    pub fn fit(scene: &SceneCube, train: &[usize]) -> Result<Self> {
        if train.is_empty() {
            return Err(IfgError::InvalidArgument(
                "cannot fit standardization on an empty train set".into(),
            ));
        }
        let t = scene.bands;
        let n = train.len() as f64;
        let mut hsi_mean = vec![0.0; t];
        let mut hsi_std = vec![0.0; t];
        for &idx in train {
            for b in 0..t {
                hsi_mean[b] += scene.hsi[idx * t + b];
            }
        }
        hsi_mean.iter_mut().for_each(|m| *m /= n);
        for &idx in train {
            for b in 0..t {
                let d = scene.hsi[idx * t + b] - hsi_mean[b];
                hsi_std[b] += d * d;
            }
        }
        hsi_std
            .iter_mut()
            .for_each(|s| *s = (*s / n).sqrt().max(1e-12));
        let lidar_mean = train.iter().map(|&i| scene.lidar[i]).sum::<f64>() / n;
        let lidar_var = train
            .iter()
            .map(|&i| (scene.lidar[i] - lidar_mean).powi(2))
            .sum::<f64>()
            / n;
        Ok(NormStats {
            hsi_mean,
            hsi_std,
            lidar_mean,
            lidar_std: lidar_var.sqrt().max(1e-12),
        })
    }

    /// Standardize a scene in place.
    pub fn apply(&self, scene: &mut SceneCube) -> Result<()> {
        if self.hsi_mean.len() != scene.bands {
            return Err(IfgError::shape(
                "NormStats::apply",
                self.hsi_mean.len(),
                scene.bands,
            ));
        }
        let t = scene.bands;
        for (i, v) in scene.hsi.iter_mut().enumerate() {
            let b = i % t;
            *v = (*v - self.hsi_mean[b]) / self.hsi_std[b];
        }
        for v in scene.lidar.iter_mut() {
            *v = (*v - self.lidar_mean) / self.lidar_std;
        }
        Ok(())
    }
}

/// One training/evaluation sample: co-registered patches plus the 0-based
/// class of the center pixel.
#[derive(Debug, Clone)]
pub struct PatchSample {
    /// (P^2, T)
    pub hsi: DenseTensor,
    /// (P^2, 1)
    pub lidar: DenseTensor,
    /// 0-based class index of the center pixel.
    pub label: usize,
    pub center: (usize, usize),
}

/// Mirror-reflect an index into [0, n): ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// The raw patch tensors at an arbitrary center (no label requirement);
/// windows crossing the border are mirror-padded.
pub fn patch_tensors(
    scene: &SceneCube,
    center: (usize, usize),
    patch_side: usize,
) -> Result<(DenseTensor, DenseTensor)> {
    if patch_side % 2 == 0 || patch_side == 0 {
        return Err(IfgError::InvalidArgument(format!(
            "patch side must be odd and positive, got {patch_side}"
        )));
    }
    if center.0 >= scene.height || center.1 >= scene.width {
        return Err(IfgError::InvalidArgument(format!(
            "center {center:?} outside {}x{} scene",
            scene.height, scene.width
        )));
    }
    let r = (patch_side / 2) as isize;
    let t = scene.bands;
    let mut hsi = Vec::with_capacity(patch_side * patch_side * t);
    let mut lidar = Vec::with_capacity(patch_side * patch_side);
    for dr in -r..=r {
        let row = mirror(center.0 as isize + dr, scene.height);
        for dc in -r..=r {
            let col = mirror(center.1 as isize + dc, scene.width);
            hsi.extend_from_slice(scene.hsi_at(row, col));
            lidar.push(scene.lidar[row * scene.width + col]);
        }
    }
    Ok((
        DenseTensor::from_vec(&[patch_side * patch_side, t], hsi)?,
        DenseTensor::from_vec(&[patch_side * patch_side, 1], lidar)?,
    ))
}

/// Extract the P x P window centered at a labeled pixel, flattened row-major.
pub fn extract_patch(
    scene: &SceneCube,
    center: (usize, usize),
    patch_side: usize,
) -> Result<PatchSample> {
    let label = scene.labels[center.0 * scene.width + center.1];
    if label == 0 {
        return Err(IfgError::InvalidArgument(format!(
            "center {center:?} is unlabeled"
        )));
    }
    let (hsi, lidar) = patch_tensors(scene, center, patch_side)?;
    Ok(PatchSample {
        hsi,
        lidar,
        label: label as usize - 1,
        center,
    })
}

/// How train pixels are chosen: a fixed count per class with a seeded
/// shuffle, or an explicit train-mask raster (Houston-style standard splits).
#[derive(Debug, Clone)]
pub enum SplitSpec {
    PerClass { train_per_class: usize, seed: u64 },
    TrainMask(Vec<u16>),
}

/// Disjoint (train, test) pixel-index sets over the labeled pixels.
pub fn split_balanced(scene: &SceneCube, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    match spec {
        SplitSpec::PerClass {
            train_per_class,
            seed,
        } => {
            let classes = scene.num_classes();
            if classes == 0 {
                return Err(IfgError::InvalidArgument("scene has no labeled pixels".into()));
            }
            let mut rng = Rng::derive(*seed, 0x53504C49); // "SPLI"
            let mut train = Vec::new();
            let mut test = Vec::new();
            for class in 1..=classes {
                let mut members: Vec<usize> = (0..scene.pixel_count())
                    .filter(|&i| scene.labels[i] as usize == class)
                    .collect();
                if members.len() < *train_per_class {
                    return Err(IfgError::ClassTooSmall {
                        class,
                        have: members.len(),
                        need: *train_per_class,
                    });
                }
                rng.shuffle(&mut members);
                train.extend_from_slice(&members[..*train_per_class]);
                test.extend_from_slice(&members[*train_per_class..]);
            }
            Ok((train, test))
        }
        SplitSpec::TrainMask(mask) => {
            if mask.len() != scene.pixel_count() {
                return Err(IfgError::shape(
                    "split mask",
                    scene.pixel_count(),
                    mask.len(),
                ));
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for i in 0..scene.pixel_count() {
                if mask[i] > 0 {
                    if scene.labels[i] == 0 {
                        return Err(IfgError::InvalidArgument(format!(
                            "train mask marks unlabeled pixel {i}"
                        )));
                    }
                    train.push(i);
                } else if scene.labels[i] > 0 {
                    test.push(i);
                }
            }
            if train.is_empty() {
                return Err(IfgError::InvalidArgument("train mask is empty".into()));
            }
            Ok((train, test))
        }
    }
}

/// Synthetic scene recipe. Each class gets a Gaussian-bump spectral
/// signature, a distinct LiDAR elevation level, and a periodic spatial
/// texture added to every band; each cue can be switched off to build
/// scenes separable through exactly one pathway. Regions come from a
/// seeded Voronoi partition with `sites_per_class` cells per class.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub seed: u64,
    /// Additive Gaussian noise on HSI bands.
    pub noise_sigma: f64,
    /// Additive Gaussian noise on the LiDAR raster.
    pub lidar_noise_sigma: f64,
    pub spectral_cue: bool,
    pub elevation_cue: bool,
    pub texture_cue: bool,
    pub sites_per_class: usize,
    pub texture_amp: f64,
    /// Texture wavelength in pixels; matches the default patch side so the
    /// dominant component lands on the first frequency bin of a patch DFT.
    pub texture_period: f64,
}

impl SynthSpec {
    pub fn new(classes: usize, height: usize, width: usize, bands: usize, seed: u64) -> Self {
        SynthSpec {
            classes,
            height,
            width,
            bands,
            seed,
            noise_sigma: 0.1,
            lidar_noise_sigma: 0.05,
            spectral_cue: true,
            elevation_cue: true,
            texture_cue: true,
            sites_per_class: 3,
            texture_amp: 0.5,
            texture_period: 5.0,
        }
    }
}

/// Integer direction of the periodic texture for class `k`, or None for a
/// textureless class. The first three directions sit on the lowest
/// frequency bins of a patch-sized DFT; later classes take harmonics.
pub fn texture_direction(k: usize) -> Option<(f64, f64)> {
    const DIRS: [(f64, f64); 7] = [
        (0.0, 1.0),
        (1.0, 0.0),
        (1.0, 1.0),
        (0.0, 2.0),
        (2.0, 0.0),
        (2.0, 2.0),
        (1.0, 2.0),
    ];
    match k {
        0..=2 => Some(DIRS[k]),
        3 => None,
        _ => Some(DIRS[(k - 1) % DIRS.len()]),
    }
}

/// Generate a synthetic scene. Values are rounded through f32 so the
/// in-memory cube is identical to what a write/read round trip yields.
pub fn synth_scene(spec: &SynthSpec) -> Result<SceneCube> {
    if spec.classes < 2 {
        return Err(IfgError::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.height == 0 || spec.width == 0 || spec.bands == 0 {
        return Err(IfgError::InvalidArgument("degenerate scene dimensions".into()));
    }
    let mut rng = Rng::derive(spec.seed, 0x53594E54); // "SYNT"
    let num_sites = spec.classes * spec.sites_per_class.max(1);
    let sites: Vec<(usize, usize, usize)> = (0..num_sites)
        .map(|s| (rng.below(spec.height), rng.below(spec.width), s % spec.classes))
        .collect();
    // one phase per class: regions of a class stay texture-coherent, so only
    // class boundaries interrupt the waves
    let phases: Vec<f64> = (0..spec.classes)
        .map(|_| rng.uniform() * std::f64::consts::TAU)
        .collect();

    let t = spec.bands;
    let sig_width = (t as f64 / (2.0 * spec.classes as f64)).max(0.75);
    let signature = |class: usize, band: usize| -> f64 {
        let mu = if spec.spectral_cue {
            (class as f64 + 0.5) * t as f64 / spec.classes as f64 - 0.5
        } else {
            (t as f64 - 1.0) / 2.0
        };
        let d = band as f64 - mu;
        (-d * d / (2.0 * sig_width * sig_width)).exp()
    };

    let mut hsi = vec![0.0; spec.height * spec.width * t];
    let mut lidar = vec![0.0; spec.height * spec.width];
    let mut labels = vec![0u16; spec.height * spec.width];
    for r in 0..spec.height {
        for c in 0..spec.width {
            let idx = r * spec.width + c;
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (s, &(sr, sc, _)) in sites.iter().enumerate() {
                let dr = sr.abs_diff(r);
                let dc = sc.abs_diff(c);
                let d = dr * dr + dc * dc;
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            let class = sites[best].2;
            labels[idx] = (class + 1) as u16;
            let tex = if spec.texture_cue {
                match texture_direction(class) {
                    Some((u, v)) => {
                        let angle = std::f64::consts::TAU
                            * (u * r as f64 + v * c as f64)
                            / spec.texture_period
                            + phases[class];
                        spec.texture_amp * angle.cos()
                    }
                    None => 0.0,
                }
            } else {
                0.0
            };
            for b in 0..t {
                let v = signature(class, b) + tex + spec.noise_sigma * rng.normal();
                hsi[idx * t + b] = v as f32 as f64;
            }
            let elev = if spec.elevation_cue { class as f64 } else { 0.0 };
            lidar[idx] = (elev + spec.lidar_noise_sigma * rng.normal()) as f32 as f64;
        }
    }
    Ok(SceneCube {
        height: spec.height,
        width: spec.width,
        bands: t,
        hsi,
        lidar,
        labels,
    })
}
