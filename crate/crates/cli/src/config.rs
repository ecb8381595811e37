//! Resolved run configuration: flags merged over an optional key=value file
//! merged over defaults (flags win). The resolved form round-trips through
//! its textual representation and is echoed into the output directory so a
//! run can be reproduced from its artifacts alone.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use ifgnet_core::model::{HeadMode, IfgNetConfig, Variant};
use ifgnet_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub hsi: String,
    pub lidar: String,
    pub labels: String,
    pub out: String,
    pub patch: usize,
    pub latent: usize,
    pub variant: Variant,
    pub share_sia: bool,
    pub radius: usize,
    pub grid_intervals: usize,
    pub degree: usize,
    pub grid_range: f64,
    pub head: HeadMode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub train_mask: Option<String>,
}

impl RunConfig {
    pub fn model_config(&self, bands: usize, num_classes: usize) -> IfgNetConfig {
        IfgNetConfig {
            patch_side: self.patch,
            bands,
            latent_dim: self.latent,
            num_classes,
            variant: self.variant,
            share_sia_params: self.share_sia,
            window_radius: self.radius,
            grid_intervals: self.grid_intervals,
            spline_degree: self.degree,
            grid_range: self.grid_range,
            head: self.head,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, threads: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            seed: self.seed,
            threads,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        push("command", self.command.clone());
        push("hsi", self.hsi.clone());
        push("lidar", self.lidar.clone());
        push("labels", self.labels.clone());
        push("out", self.out.clone());
        push("patch", self.patch.to_string());
        push("latent", self.latent.to_string());
        push("variant", self.variant.to_string());
        push("share_sia", self.share_sia.to_string());
        push("radius", self.radius.to_string());
        push("grid_intervals", self.grid_intervals.to_string());
        push("degree", self.degree.to_string());
        push("grid_range", format!("{:?}", self.grid_range));
        push("head", self.head.to_string());
        push("epochs", self.epochs.to_string());
        push("batch", self.batch.to_string());
        push("lr", format!("{:?}", self.lr));
        push("seed", self.seed.to_string());
        push("train_per_class", self.train_per_class.to_string());
        if let Some(mask) = &self.train_mask {
            push("train_mask", mask.clone());
        }
        out
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub fn from_kv(text: &str) -> anyhow::Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| -> anyhow::Result<&String> {
            map.get(k).with_context(|| format!("missing key '{k}'"))
        };
        Ok(RunConfig {
            command: get("command")?.clone(),
            hsi: get("hsi")?.clone(),
            lidar: get("lidar")?.clone(),
            labels: get("labels")?.clone(),
            out: get("out")?.clone(),
            patch: get("patch")?.parse()?,
            latent: get("latent")?.parse()?,
            variant: get("variant")?.parse::<Variant>()?,
            share_sia: get("share_sia")?.parse()?,
            radius: get("radius")?.parse()?,
            grid_intervals: get("grid_intervals")?.parse()?,
            degree: get("degree")?.parse()?,
            grid_range: get("grid_range")?.parse()?,
            head: get("head")?.parse::<HeadMode>()?,
            epochs: get("epochs")?.parse()?,
            batch: get("batch")?.parse()?,
            lr: get("lr")?.parse()?,
            seed: get("seed")?.parse()?,
            train_per_class: get("train_per_class")?.parse()?,
            train_mask: map.get("train_mask").cloned(),
        })
    }
}

/// key=value lines; '#' starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got '{raw}'", ln + 1);
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn load_kv_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    parse_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_is_lossless() {
        let cfg = RunConfig {
            command: "train".into(),
            hsi: "scene/hsi.ifgc".into(),
            lidar: "scene/lidar.ifgc".into(),
            labels: "scene/labels.ifgl".into(),
            out: "runs/a".into(),
            patch: 5,
            latent: 16,
            variant: Variant::FrequencyOnly,
            share_sia: true,
            radius: 1,
            grid_intervals: 8,
            degree: 3,
            grid_range: 3.0,
            head: HeadMode::CenterPixel,
            epochs: 50,
            batch: 64,
            lr: 1e-3,
            seed: 42,
            train_per_class: 150,
            train_mask: None,
        };
        let text = cfg.to_kv();
        let back = RunConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
        // and a second trip is byte-stable
        assert_eq!(text, back.to_kv());
    }

    #[test]
    fn kv_parser_handles_comments_and_rejects_garbage() {
        let map = parse_kv("a=1\n# comment\n\nb = two # trailing\n").unwrap();
        assert_eq!(map["a"], "1");
        assert_eq!(map["b"], "two");
        assert!(parse_kv("nonsense line\n").is_err());
    }
}
