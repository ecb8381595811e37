//! Shuffled mini-batch Adam training over patch samples, plus evaluation.
//!
//! Everything here is deterministic given (config, seed): the split, the
//! standardization, parameter initialization, and the per-epoch shuffles all
//! derive from explicit seeds, and batches run in a fixed order. Evaluation
//! forward passes are pure, so they may fan out over threads; results are
//! written by sample index and are identical for any thread count.

use crate::data::{extract_patch, patch_tensors, split_balanced, NormStats, PatchSample, SceneCube, SplitSpec};
use crate::error::{IfgError, Result};
use crate::metrics::{oa_aa_kappa, ConfusionMatrix, MetricsSummary};
use crate::model::{cross_entropy, IfgNet, IfgNetConfig};
use crate::tensor::Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seed for the per-epoch shuffles (the model has its own init seed).
    pub seed: u64,
    /// Worker threads for evaluation-time forward passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_oa: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} train_oa={:.2}",
            self.epoch,
            self.mean_loss,
            self.train_oa * 100.0
        )
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fit standardization on the train pixels of a raw scene, then train a
/// fresh model. Returns the trained model (stats attached) and per-epoch
/// logs; `train_indices` come back so callers can evaluate the matching
/// test split.
pub fn train_model(
    scene: &SceneCube,
    split: &SplitSpec,
    model_cfg: &IfgNetConfig,
    train_cfg: &TrainConfig,
) -> Result<(IfgNet, Vec<EpochLog>, Vec<usize>, Vec<usize>)> {
    train_model_with(scene, split, model_cfg, train_cfg, |_| {})
}

/// [`train_model`] with a per-epoch callback (progress printing).
pub fn train_model_with(
    scene: &SceneCube,
    split: &SplitSpec,
    model_cfg: &IfgNetConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(IfgNet, Vec<EpochLog>, Vec<usize>, Vec<usize>)> {
    let (train_idx, test_idx) = split_balanced(scene, split)?;
    if scene.num_classes() != model_cfg.num_classes {
        return Err(IfgError::InvalidArgument(format!(
            "scene has {} classes but the model is configured for {}",
            scene.num_classes(),
            model_cfg.num_classes
        )));
    }
    let stats = NormStats::fit(scene, &train_idx)?;
    let mut std_scene = scene.clone();
    stats.apply(&mut std_scene)?;
    let mut model = IfgNet::new(model_cfg.clone())?;
    model.norm = Some(stats);

    let samples: Vec<PatchSample> = train_idx
        .iter()
        .map(|&i| {
            extract_patch(
                &std_scene,
                (i / scene.width, i % scene.width),
                model_cfg.patch_side,
            )
        })
        .collect::<Result<_>>()?;

    let mut shuffle_rng = Rng::derive(train_cfg.seed, 0x53485546); // "SHUF"
    let mut logs = Vec::with_capacity(train_cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=train_cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(train_cfg.batch_size.max(1)) {
            let scale = 1.0 / batch.len() as f64;
            for &si in batch {
                let sample = &samples[si];
                let (logits, cache) = model.forward(sample)?;
                let (loss, mut dlogits) = cross_entropy(&logits, sample.label)?;
                if !loss.is_finite() {
                    return Err(IfgError::NonFinite("training loss"));
                }
                loss_sum += loss;
                if argmax(&logits) == sample.label {
                    correct += 1;
                }
                dlogits.iter_mut().for_each(|g| *g *= scale);
                model.backward(&cache, &dlogits)?;
            }
            model.adam_step_all(train_cfg.learning_rate)?;
            model.zero_grads();
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            train_oa: correct as f64 / samples.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs, train_idx, test_idx))
}

/// Chunked scoped-thread map. Chunk boundaries depend only on the item count
/// and thread cap, and each result lands at its item's index, so the output
/// is identical for any thread count.
fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Vec<U>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked"));
        }
        out
    })
}

/// Classify the given pixel indices of a raw scene with a trained model.
pub fn evaluate(
    model: &IfgNet,
    scene: &SceneCube,
    indices: &[usize],
    threads: usize,
) -> Result<(ConfusionMatrix, MetricsSummary)> {
    let std_scene = standardized(model, scene)?;
    let preds: Vec<Result<usize>> = parallel_map(indices, threads, |&i| {
        let sample = extract_patch(
            &std_scene,
            (i / scene.width, i % scene.width),
            model.config.patch_side,
        )?;
        Ok(argmax(&model.infer(&sample)?))
    })
    .into_iter()
    .collect();
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (pred, &i) in preds.into_iter().zip(indices) {
        let true_class = scene.labels[i] as usize - 1;
        cm.accumulate(true_class, pred?)?;
    }
    let summary = oa_aa_kappa(&cm)?;
    Ok((cm, summary))
}

/// Predicted label map (1..=C) over every pixel, or over labeled pixels only
/// with zeros elsewhere.
pub fn predict_map(
    model: &IfgNet,
    scene: &SceneCube,
    labeled_only: bool,
    threads: usize,
) -> Result<Vec<u16>> {
    let std_scene = standardized(model, scene)?;
    let indices: Vec<usize> = if labeled_only {
        scene.labeled_indices()
    } else {
        (0..scene.pixel_count()).collect()
    };
    let preds: Vec<Result<u16>> = parallel_map(&indices, threads, |&i| {
        let (hsi, lidar) = patch_tensors(
            &std_scene,
            (i / scene.width, i % scene.width),
            model.config.patch_side,
        )?;
        let sample = PatchSample {
            hsi,
            lidar,
            label: 0,
            center: (i / scene.width, i % scene.width),
        };
        Ok(argmax(&model.infer(&sample)?) as u16 + 1)
    })
    .into_iter()
    .collect();
    let mut map = vec![0u16; scene.pixel_count()];
    for (pred, &i) in preds.into_iter().zip(&indices) {
        map[i] = pred?;
    }
    Ok(map)
}

fn standardized(model: &IfgNet, scene: &SceneCube) -> Result<SceneCube> {
    let stats = model.norm.as_ref().ok_or_else(|| {
        IfgError::InvalidArgument("model carries no standardization statistics".into())
    })?;
    if scene.bands != model.config.bands {
        return Err(IfgError::shape(
            "evaluate scene",
            model.config.bands,
            scene.bands,
        ));
    }
    let mut std_scene = scene.clone();
    stats.apply(&mut std_scene)?;
    Ok(std_scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;

    fn quick_scene() -> SceneCube {
        let mut spec = SynthSpec::new(2, 16, 16, 3, 5);
        spec.noise_sigma = 0.0;
        spec.lidar_noise_sigma = 0.0;
        spec.texture_cue = false;
        crate::data::synth_scene(&spec).unwrap()
    }

    fn quick_cfg() -> IfgNetConfig {
        let mut cfg = IfgNetConfig::new(3, 3, 2);
        cfg.latent_dim = 4;
        cfg.seed = 1;
        cfg
    }

    #[test]
    fn zero_epochs_returns_initial_weights_and_no_logs() {
        let scene = quick_scene();
        let split = SplitSpec::PerClass {
            train_per_class: 20,
            seed: 3,
        };
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (model, logs, train_idx, test_idx) =
            train_model(&scene, &split, &quick_cfg(), &tc).unwrap();
        assert!(logs.is_empty());
        assert!(model.norm.is_some());
        assert_eq!(train_idx.len(), 40);
        assert!(!test_idx.is_empty());
        // untouched parameters equal a fresh model's
        let fresh = IfgNet::new(quick_cfg()).unwrap();
        let mut equal = true;
        let mut fresh_vals = Vec::new();
        fresh.visit_params(&mut |_, p| fresh_vals.push(p.value.clone()));
        let mut i = 0;
        model.visit_params(&mut |_, p| {
            if p.value != fresh_vals[i] {
                equal = false;
            }
            i += 1;
        });
        assert!(equal);
    }

    #[test]
    fn training_is_reproducible_and_learns_an_easy_scene() {
        let scene = quick_scene();
        let split = SplitSpec::PerClass {
            train_per_class: 30,
            seed: 3,
        };
        let tc = TrainConfig {
            epochs: 14,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 7,
            threads: 1,
        };
        let (model_a, logs_a, _, test_idx) =
            train_model(&scene, &split, &quick_cfg(), &tc).unwrap();
        let (model_b, logs_b, _, _) = train_model(&scene, &split, &quick_cfg(), &tc).unwrap();
        assert_eq!(logs_a, logs_b);
        let sa: Vec<String> = logs_a.iter().map(|l| l.to_string()).collect();
        let sb: Vec<String> = logs_b.iter().map(|l| l.to_string()).collect();
        assert_eq!(sa, sb);
        // the noise-free two-class scene should be learned essentially perfectly
        assert!(
            logs_a.last().unwrap().train_oa >= 0.99,
            "final train OA {}",
            logs_a.last().unwrap().train_oa
        );
        let (_, summary) = evaluate(&model_a, &scene, &test_idx, 1).unwrap();
        assert!(summary.oa >= 0.95, "test OA {}", summary.oa);
        // bitwise identical models
        let mut vals_b = Vec::new();
        model_b.visit_params(&mut |_, p| vals_b.push(p.value.clone()));
        let mut i = 0;
        model_a.visit_params(&mut |_, p| {
            assert_eq!(p.value, vals_b[i]);
            i += 1;
        });
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let scene = quick_scene();
        let split = SplitSpec::PerClass {
            train_per_class: 20,
            seed: 1,
        };
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (model, _, _, test_idx) = train_model(&scene, &split, &quick_cfg(), &tc).unwrap();
        let (cm1, s1) = evaluate(&model, &scene, &test_idx, 1).unwrap();
        let (cm4, s4) = evaluate(&model, &scene, &test_idx, 4).unwrap();
        assert_eq!(cm1, cm4);
        assert_eq!(s1, s4);
        let m1 = predict_map(&model, &scene, false, 1).unwrap();
        let m4 = predict_map(&model, &scene, false, 3).unwrap();
        assert_eq!(m1, m4);
        assert!(m1.iter().all(|&v| v >= 1 && v <= 2));
    }

    #[test]
    fn fresh_model_sits_near_chance() {
        let scene = quick_scene();
        let split = SplitSpec::PerClass {
            train_per_class: 20,
            seed: 2,
        };
        let (train_idx, test_idx) = split_balanced(&scene, &split).unwrap();
        let mut model = IfgNet::new(quick_cfg()).unwrap();
        model.norm = Some(NormStats::fit(&scene, &train_idx).unwrap());
        let (_, summary) = evaluate(&model, &scene, &test_idx, 1).unwrap();
        // chance level for 2 balanced-ish classes, generous tolerance
        assert!(summary.oa >= 0.5 - 0.35 && summary.oa <= 0.5 + 0.35);
    }

    #[test]
    fn class_count_mismatch_fails_before_training() {
        let scene = quick_scene();
        let mut cfg = quick_cfg();
        cfg.num_classes = 5;
        let split = SplitSpec::PerClass {
            train_per_class: 20,
            seed: 3,
        };
        assert!(train_model(&scene, &split, &cfg, &TrainConfig::default()).is_err());
    }
}
