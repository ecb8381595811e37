//! `ifgnet` command line: train, eval, predict, gradcheck, synth.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 check failure.
//! `IFGNET_THREADS` caps evaluation-time parallelism; training itself is
//! single-threaded so runs are bit-reproducible from (config, seed).

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use config::{load_kv_file, RunConfig};
use ifgnet_core::data::{
    load_scene, read_labels, synth_scene, write_labels, SceneCube, SplitSpec, SynthSpec,
};
use ifgnet_core::gradcheck::{self, GradcheckOptions};
use ifgnet_core::metrics::{format_kv, format_table};
use ifgnet_core::model::{HeadMode, IfgNet, Variant};
use ifgnet_core::train::{evaluate, predict_map, train_model_with};

#[derive(Parser)]
#[command(name = "ifgnet", version, about = "Implicit spatial-frequency fusion of HSI and LiDAR patches")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a scene and report test metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on a scene's test split
    Eval(EvalArgs),
    /// Write a per-pixel predicted label map
    Predict(PredictArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic HSI+LiDAR scene
    Synth(SynthArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// HSI cube file (IFGC)
    #[arg(long)]
    hsi: PathBuf,
    /// LiDAR raster file (IFGC, single channel)
    #[arg(long)]
    lidar: PathBuf,
    /// Label map file (IFGL)
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Labeled samples per class used for training
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Explicit train-mask raster (IFGL); overrides --train-per-class
    #[arg(long)]
    train_mask: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Output directory for checkpoint, logs, and reports
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file; explicit flags win over it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    /// full | spatial-only | frequency-only
    #[arg(long)]
    variant: Option<Variant>,
    /// Share one SIA parameter set across the spatial and frequency units
    #[arg(long)]
    share_sia: Option<bool>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    grid_intervals: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    grid_range: Option<f64>,
    /// mean | center
    #[arg(long)]
    head: Option<HeadMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint (IFGK)
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Seed for reconstructing a per-class split (must match training)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional file to write the metrics report into
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    /// Output label map (IFGL)
    #[arg(long)]
    out: PathBuf,
    /// Predict only labeled pixels, writing 0 elsewhere
    #[arg(long, default_value_t = false)]
    labeled_only: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Negative-control hook: corrupt one analytic gradient
    #[arg(long, hide = true, default_value_t = false)]
    corrupt_backward: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for hsi.ifgc, lidar.ifgc, labels.ifgl, synth.txt
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    bands: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise sigma on HSI bands
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Gaussian noise sigma on the LiDAR raster
    #[arg(long, default_value_t = 0.05)]
    lidar_noise: f64,
    /// Drop the per-class spectral signatures
    #[arg(long, default_value_t = false)]
    no_spectral: bool,
    /// Drop the per-class elevation levels
    #[arg(long, default_value_t = false)]
    no_elevation: bool,
    /// Drop the per-class periodic textures
    #[arg(long, default_value_t = false)]
    no_texture: bool,
    #[arg(long, default_value_t = 3)]
    sites_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    texture_amp: f64,
    #[arg(long, default_value_t = 5.0)]
    texture_period: f64,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Evaluation-time thread count: available cores capped by IFGNET_THREADS.
fn threads() -> anyhow::Result<usize> {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("IFGNET_THREADS") {
        Ok(v) => {
            let cap: usize = v
                .parse()
                .with_context(|| format!("IFGNET_THREADS must be a positive integer, got '{v}'"))?;
            if cap == 0 {
                bail!("IFGNET_THREADS must be positive");
            }
            Ok(avail.min(cap))
        }
        Err(_) => Ok(avail),
    }
}

fn resolve_run_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let file = match &args.config {
        Some(path) => load_kv_file(path)?,
        None => Default::default(),
    };
    // precedence: explicit flag, then config file, then default
    macro_rules! pick {
        ($flag:expr, $key:literal, $default:expr) => {
            match (&$flag, file.get($key)) {
                (Some(v), _) => v.clone(),
                (None, Some(raw)) => raw
                    .parse()
                    .with_context(|| format!("config key '{}': bad value '{raw}'", $key))?,
                (None, None) => $default,
            }
        };
    }
    let train_mask = match (&args.split.train_mask, file.get("train_mask")) {
        (Some(p), _) => Some(p.display().to_string()),
        (None, Some(p)) => Some(p.clone()),
        (None, None) => None,
    };
    Ok(RunConfig {
        command: "train".into(),
        hsi: args.scene.hsi.display().to_string(),
        lidar: args.scene.lidar.display().to_string(),
        labels: args.scene.labels.display().to_string(),
        out: args.out.display().to_string(),
        patch: pick!(args.patch, "patch", 5),
        latent: pick!(args.latent, "latent", 32),
        variant: pick!(args.variant, "variant", Variant::Full),
        share_sia: pick!(args.share_sia, "share_sia", false),
        radius: pick!(args.radius, "radius", 1),
        grid_intervals: pick!(args.grid_intervals, "grid_intervals", 8),
        degree: pick!(args.degree, "degree", 3),
        grid_range: pick!(args.grid_range, "grid_range", 3.0),
        head: pick!(args.head, "head", HeadMode::MeanPool),
        epochs: pick!(args.epochs, "epochs", 50),
        batch: pick!(args.batch, "batch", 64),
        lr: pick!(args.lr, "lr", 1e-3),
        seed: pick!(args.seed, "seed", 0),
        train_per_class: pick!(args.split.train_per_class, "train_per_class", 150),
        train_mask,
    })
}

fn split_spec(
    scene: &SceneCube,
    mask_path: Option<&Path>,
    train_per_class: usize,
    seed: u64,
) -> anyhow::Result<SplitSpec> {
    match mask_path {
        Some(path) => {
            let (h, w, mask) = read_labels(path)?;
            if (h, w) != (scene.height, scene.width) {
                bail!(
                    "train mask is {h}x{w} but the scene is {}x{}",
                    scene.height,
                    scene.width
                );
            }
            Ok(SplitSpec::TrainMask(mask))
        }
        None => Ok(SplitSpec::PerClass {
            train_per_class,
            seed,
        }),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<i32> {
    let rc = resolve_run_config(&args)?;
    let scene = load_scene(&args.scene.hsi, &args.scene.lidar, &args.scene.labels)?;
    let classes = scene.num_classes();
    if classes < 2 {
        bail!("scene has {classes} labeled classes; need at least 2");
    }
    let model_cfg = rc.model_config(scene.bands, classes);
    model_cfg.validate()?;
    let split = split_spec(
        &scene,
        args.split.train_mask.as_deref(),
        rc.train_per_class,
        rc.seed,
    )?;
    let threads = threads()?;
    let train_cfg = rc.train_config(threads);

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), rc.to_kv())?;

    println!(
        "training variant={} P={} T={} D={} C={} ({} parameters)",
        model_cfg.variant,
        model_cfg.patch_side,
        model_cfg.bands,
        model_cfg.latent_dim,
        model_cfg.num_classes,
        ifgnet_core::IfgNet::new(model_cfg.clone())?.param_count(),
    );
    let (model, logs, _train_idx, test_idx) =
        train_model_with(&scene, &split, &model_cfg, &train_cfg, |log| {
            println!("{log}");
        })?;

    let mut log_text = String::new();
    for log in &logs {
        log_text.push_str(&format!("{log}\n"));
    }
    std::fs::write(args.out.join("train.log"), log_text)?;
    model.save_checkpoint(&args.out.join("model.ifgk"))?;

    let (cm, summary) = evaluate(&model, &scene, &test_idx, threads)?;
    let report = format!("{}{}", format_table(&cm, &summary), format_kv(&cm, &summary));
    std::fs::write(args.out.join("metrics.txt"), &report)?;
    print!("{report}");
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<i32> {
    let model = IfgNet::load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene.hsi, &args.scene.lidar, &args.scene.labels)?;
    if scene.num_classes() != model.config.num_classes {
        bail!(
            "scene has {} classes but the checkpoint was trained for {}",
            scene.num_classes(),
            model.config.num_classes
        );
    }
    let split = split_spec(
        &scene,
        args.split.train_mask.as_deref(),
        args.split.train_per_class.unwrap_or(150),
        args.seed,
    )?;
    let (_, test_idx) = ifgnet_core::data::split_balanced(&scene, &split)?;
    let (cm, summary) = evaluate(&model, &scene, &test_idx, threads()?)?;
    let report = format!("{}{}", format_table(&cm, &summary), format_kv(&cm, &summary));
    if let Some(out) = &args.out {
        std::fs::write(out, &report)?;
    }
    print!("{report}");
    Ok(0)
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<i32> {
    let model = IfgNet::load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.scene.hsi, &args.scene.lidar, &args.scene.labels)?;
    let map = predict_map(&model, &scene, args.labeled_only, threads()?)?;
    write_labels(&args.out, scene.height, scene.width, &map)?;
    println!(
        "wrote {} predictions to {}",
        map.iter().filter(|&&v| v > 0).count(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<i32> {
    let report = gradcheck::run(&GradcheckOptions {
        corrupt_backward: args.corrupt_backward,
    })?;
    print!("{}", report.render());
    Ok(if report.pass() { 0 } else { 2 })
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<i32> {
    let spec = SynthSpec {
        classes: args.classes,
        height: args.height,
        width: args.width,
        bands: args.bands,
        seed: args.seed,
        noise_sigma: args.noise,
        lidar_noise_sigma: args.lidar_noise,
        spectral_cue: !args.no_spectral,
        elevation_cue: !args.no_elevation,
        texture_cue: !args.no_texture,
        sites_per_class: args.sites_per_class,
        texture_amp: args.texture_amp,
        texture_period: args.texture_period,
    };
    let scene = synth_scene(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    scene.write(
        &args.out.join("hsi.ifgc"),
        &args.out.join("lidar.ifgc"),
        &args.out.join("labels.ifgl"),
    )?;
    let mut echo = String::new();
    echo.push_str(&format!("classes={}\n", spec.classes));
    echo.push_str(&format!("height={}\n", spec.height));
    echo.push_str(&format!("width={}\n", spec.width));
    echo.push_str(&format!("bands={}\n", spec.bands));
    echo.push_str(&format!("seed={}\n", spec.seed));
    echo.push_str(&format!("noise={:?}\n", spec.noise_sigma));
    echo.push_str(&format!("lidar_noise={:?}\n", spec.lidar_noise_sigma));
    echo.push_str(&format!("spectral={}\n", spec.spectral_cue));
    echo.push_str(&format!("elevation={}\n", spec.elevation_cue));
    echo.push_str(&format!("texture={}\n", spec.texture_cue));
    echo.push_str(&format!("sites_per_class={}\n", spec.sites_per_class));
    echo.push_str(&format!("texture_amp={:?}\n", spec.texture_amp));
    echo.push_str(&format!("texture_period={:?}\n", spec.texture_period));
    std::fs::write(args.out.join("synth.txt"), echo)?;
    println!(
        "wrote {}x{} scene with {} classes to {}",
        spec.height,
        spec.width,
        spec.classes,
        args.out.display()
    );
    Ok(0)
}
