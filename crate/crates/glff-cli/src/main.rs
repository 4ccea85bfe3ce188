//! Command-line interface: train / eval / process / visualize / ablate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. All options can also come from a flat `key=value` config file
//! (`--config`); explicit flags win.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use glff_core::checkpoint::Checkpoint;
use glff_core::config::{load_flat_config, ModelConfig};
use glff_core::df3::{self, Protocol, ProtocolConfig};
use glff_core::evaluation;
use glff_core::image::ImageTensor;
use glff_core::model::Detector;
use glff_core::training::{self, Dataset, TrainConfig};
use glff_core::Error;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "glff", version, about = "Two-branch synthetic-image detector")]
struct Cli {
    /// Flat key=value configuration file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a detector on two labeled directories.
    Train(TrainArgs),
    /// Score a manifest and write OA/AUC/ROC reports.
    Eval(EvalArgs),
    /// Apply a post-processing protocol to a directory of images.
    Process(ProcessArgs),
    /// Render the fused-map heatmap and the selected patches for one image.
    Visualize(VisualizeArgs),
    /// Train and evaluate an architecture variant.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    real_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    fake_dir: PathBuf,
    /// Checkpoint output path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Resume from an existing checkpoint (continues step numbering).
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Training log CSV (default: `<out>.train.csv`).
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    augment_prob: Option<f64>,
    /// Gate blur and JPEG together with one draw instead of independently.
    #[arg(long)]
    augment_joint: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Decision threshold for overall accuracy.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct ProcessArgs {
    /// One of: common, antiforensics, multicompress, mixed.
    #[arg(long)]
    protocol: String,
    #[arg(long, value_name = "DIR")]
    in_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Detector checkpoint; needed by the adversarial operations.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Label recorded in the manifest (1 = fake).
    #[arg(long, default_value_t = 1)]
    label: u8,
    /// Generator tag recorded in the manifest.
    #[arg(long, default_value = "unknown")]
    generator: String,
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Output directory for `activation.png` and `patches.png`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// global_only | local_only | no_psm | no_amsff | full |
    /// stage:<s>,<d> | windows:<HxW>:<count>[,..]
    #[arg(long)]
    variant: String,
    #[arg(long, value_name = "DIR")]
    real_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    fake_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let file_cfg = match &cli.config {
        Some(path) => match load_flat_config(path) {
            Ok(map) => map,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => BTreeMap::new(),
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args, &file_cfg),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Process(args) => cmd_process(args, &file_cfg),
        Cmd::Visualize(args) => cmd_visualize(args),
        Cmd::Ablate(args) => cmd_ablate(args, &file_cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(err) if err.is_config() => 2,
                Some(Error::Encoder(_)) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn lookup<T: std::str::FromStr>(
    cfg: &BTreeMap<String, String>,
    key: &str,
) -> anyhow::Result<Option<T>> {
    match cfg.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| anyhow::Error::new(Error::config(format!("bad value for {key}: {raw}")))),
    }
}

fn model_config(
    preset: Option<&str>,
    cfg: &BTreeMap<String, String>,
    seed: u64,
) -> anyhow::Result<ModelConfig> {
    let preset = match preset {
        Some(p) => p.to_string(),
        None => lookup::<String>(cfg, "preset")?.unwrap_or_else(|| "full".to_string()),
    };
    let mut mc = match preset.as_str() {
        "full" => ModelConfig::full(seed),
        "tiny" => ModelConfig::tiny(seed),
        other => {
            return Err(anyhow::Error::new(Error::config(format!(
                "unknown preset: {other} (expected full or tiny)"
            ))))
        }
    };
    if let Some(s) = lookup::<usize>(cfg, "shallow_stage")? {
        mc.backbone.shallow_stage = s;
        mc.amsff.model_dim = 0;
    }
    if let Some(d) = lookup::<usize>(cfg, "deep_stage")? {
        mc.backbone.deep_stage = d;
        mc.amsff.model_dim = 0;
    }
    Ok(mc)
}

fn train_config(
    cfg: &BTreeMap<String, String>,
    seed: u64,
    steps: Option<u64>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    augment_prob: Option<f64>,
    augment_joint: Option<bool>,
) -> anyhow::Result<TrainConfig> {
    let mut tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(v) = lookup::<usize>(cfg, "batch_size")? {
        tc.batch_size = v;
    }
    if let Some(v) = lookup::<f64>(cfg, "learning_rate")? {
        tc.learning_rate = v;
    }
    if let Some(v) = lookup::<u64>(cfg, "max_steps")? {
        tc.max_steps = v;
    }
    if let Some(v) = lookup::<f64>(cfg, "augment_prob")? {
        tc.augment_prob = v;
    }
    if let Some(v) = lookup::<bool>(cfg, "augment_joint")? {
        tc.joint_augment = v;
    }
    if let Some(v) = lookup::<f64>(cfg, "blur_sigma_min")? {
        tc.blur_sigma_range.0 = v;
    }
    if let Some(v) = lookup::<f64>(cfg, "blur_sigma_max")? {
        tc.blur_sigma_range.1 = v;
    }
    if let Some(v) = lookup::<u8>(cfg, "jpeg_quality_min")? {
        tc.jpeg_quality_range.0 = v;
    }
    if let Some(v) = lookup::<u8>(cfg, "jpeg_quality_max")? {
        tc.jpeg_quality_range.1 = v;
    }
    if let Some(v) = steps {
        tc.max_steps = v;
    }
    if let Some(v) = batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = augment_prob {
        tc.augment_prob = v;
    }
    if let Some(v) = augment_joint {
        tc.joint_augment = v;
    }
    Ok(tc)
}

fn require_dir(path: &Path, flag: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(anyhow::Error::new(Error::config(format!(
            "{flag}: {} is not a directory",
            path.display()
        ))));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, cfg: &BTreeMap<String, String>) -> anyhow::Result<()> {
    require_dir(&args.real_dir, "--real-dir")?;
    require_dir(&args.fake_dir, "--fake-dir")?;
    let seed = args.seed.or(lookup(cfg, "seed")?).unwrap_or(0);
    let mc = model_config(args.preset.as_deref(), cfg, seed)?;
    let tc = train_config(
        cfg,
        seed,
        args.steps,
        args.batch_size,
        args.learning_rate,
        args.augment_prob,
        args.augment_joint,
    )?;
    let data = Dataset::from_dirs(&args.real_dir, &args.fake_dir)?;
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("train.csv"));
    let mut log_file = std::fs::File::create(&log_path)
        .with_context(|| format!("cannot create {}", log_path.display()))?;
    writeln!(log_file, "step,loss,lr,seconds")?;
    let (_, report) = training::train_to_checkpoint(
        mc,
        &data,
        &tc,
        &args.out,
        args.resume.as_deref(),
        &mut log_file,
    )?;
    log::info!(
        "trained {} steps, final loss {:.4}, checkpoint at {} ({} unreadable samples skipped)",
        report.steps_run,
        report.final_loss,
        args.out.display(),
        report.skipped_images
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let model = Checkpoint::load(&args.ckpt)?.restore()?;
    let records = df3::read_manifest(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let entries = evaluation::score_manifest(&model, &records, &base, &args.manifest)?;
    let report = evaluation::protocol_report(&entries, args.threshold)?;
    let metrics_path = args.out_dir.join("metrics.csv");
    let mut f = std::fs::File::create(&metrics_path)?;
    evaluation::write_metrics_csv(&report, &mut f)?;
    for cell in &report.cells {
        let mut scored: Vec<(f64, u8)> = entries
            .iter()
            .filter(|e| {
                e.label == 1 && e.protocol == cell.protocol && e.generator == cell.generator
            })
            .map(|e| (e.fake_probability, 1u8))
            .collect();
        scored.extend(
            entries
                .iter()
                .filter(|e| e.label == 0)
                .map(|e| (e.fake_probability, 0u8)),
        );
        let curve = evaluation::roc(&scored)?;
        let name = format!(
            "roc_{}_{}.csv",
            sanitize(&cell.protocol),
            sanitize(&cell.generator)
        );
        let mut f = std::fs::File::create(args.out_dir.join(name))?;
        evaluation::write_roc_csv(&curve, &mut f)?;
    }
    log::info!(
        "evaluated {} samples, grand average AUC {:.4}, reports in {}",
        entries.len(),
        report.grand_average_auc,
        args.out_dir.display()
    );
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_process(args: ProcessArgs, cfg: &BTreeMap<String, String>) -> anyhow::Result<()> {
    require_dir(&args.in_dir, "--in-dir")?;
    let protocol: Protocol = args.protocol.parse()?;
    let seed = args.seed.or(lookup(cfg, "seed")?).unwrap_or(0);
    let mut pc = ProtocolConfig {
        seed,
        ..ProtocolConfig::default()
    };
    if let Some(v) = args.group_size.or(lookup(cfg, "group_size")?) {
        pc.group_size = v;
    }
    if let Some(v) = lookup::<u32>(cfg, "video_crf")? {
        pc.video_crf = v;
    }
    let model = match &args.ckpt {
        Some(path) => Some(Checkpoint::load(path)?.restore()?),
        None => None,
    };
    let detector = model.as_ref().map(|m| m as &dyn Detector);
    if matches!(protocol, Protocol::Antiforensics) && detector.is_none() {
        return Err(anyhow::Error::new(Error::config(
            "--ckpt is required for the adversarial protocol",
        )));
    }
    let records = df3::process_directory(
        protocol,
        &args.in_dir,
        &args.out_dir,
        &pc,
        args.label,
        &args.generator,
        detector,
        None,
    )?;
    df3::save_manifest(&records, &args.out_dir.join("manifest.jsonl"))?;
    log::info!(
        "processed {} images into {}",
        records.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_visualize(args: VisualizeArgs) -> anyhow::Result<()> {
    let model = Checkpoint::load(&args.ckpt)?.restore()?;
    let image = ImageTensor::load(&args.image)?;
    let (heat, proposals) = model.visualize(&image)?;
    std::fs::create_dir_all(&args.out)?;

    // (a) activation heatmap, min-max normalized, upscaled to the input size
    let size = model.cfg.input_size;
    let (hmin, hmax) = heat
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = (hmax - hmin).max(1e-12);
    let (mh, mw) = heat.dim();
    let mut heat_img = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let v = heat[[y * mh / size, x * mw / size]];
            let g = (((v - hmin) / range) * 255.0).round() as u8;
            heat_img.put_pixel(x as u32, y as u32, image::Rgb([g, g, g]));
        }
    }
    heat_img
        .save(args.out.join("activation.png"))
        .map_err(|e| Error::image(args.out.join("activation.png"), e))?;

    // (b) input with the selected rectangles outlined, color per scale
    let preprocessed = model.preprocess(&image);
    let mut overlay = preprocessed.to_rgb8();
    let palette = [[255u8, 64, 64], [64, 255, 64], [64, 64, 255], [255, 255, 64]];
    for p in &proposals {
        let (top, left, crop) = p.rect_image.expect("mapped proposal");
        let color = image::Rgb(palette[p.scale_tag % palette.len()]);
        for d in 0..crop {
            for (yy, xx) in [
                (top, left + d),
                (top + crop - 1, left + d),
                (top + d, left),
                (top + d, left + crop - 1),
            ] {
                if yy < size && xx < size {
                    overlay.put_pixel(xx as u32, yy as u32, color);
                }
            }
        }
    }
    overlay
        .save(args.out.join("patches.png"))
        .map_err(|e| Error::image(args.out.join("patches.png"), e))?;
    log::info!(
        "wrote activation.png and patches.png ({} patches) to {}",
        proposals.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs, cfg: &BTreeMap<String, String>) -> anyhow::Result<()> {
    require_dir(&args.real_dir, "--real-dir")?;
    require_dir(&args.fake_dir, "--fake-dir")?;
    let seed = args.seed.or(lookup(cfg, "seed")?).unwrap_or(0);
    let mc = model_config(args.preset.as_deref(), cfg, seed)?.apply_variant_spec(&args.variant)?;
    let tc = train_config(
        cfg,
        seed,
        args.steps,
        args.batch_size,
        args.learning_rate,
        None,
        None,
    )?;
    std::fs::create_dir_all(&args.out_dir)?;
    let data = Dataset::from_dirs(&args.real_dir, &args.fake_dir)?;
    let ckpt_path = args.out_dir.join(format!("{}.ckpt", sanitize(&args.variant)));
    let log_path = args
        .out_dir
        .join(format!("{}.train.csv", sanitize(&args.variant)));
    let mut log_file = std::fs::File::create(&log_path)?;
    writeln!(log_file, "step,loss,lr,seconds")?;
    let (model, report) =
        training::train_to_checkpoint(mc, &data, &tc, &ckpt_path, None, &mut log_file)?;
    log::info!(
        "variant {} trained {} steps, final loss {:.4}",
        args.variant,
        report.steps_run,
        report.final_loss
    );

    let records = df3::build_manifest(&[
        (args.real_dir.clone(), 0, "dataset".into(), "unprocessed".into()),
        (args.fake_dir.clone(), 1, "dataset".into(), "unprocessed".into()),
    ])?;
    let entries = evaluation::score_manifest(&model, &records, Path::new(""), Path::new("ablate"))?;
    let metrics = evaluation::protocol_report(&entries, args.threshold)?;
    let metrics_path = args
        .out_dir
        .join(format!("metrics_{}.csv", sanitize(&args.variant)));
    let mut f = std::fs::File::create(&metrics_path)?;
    evaluation::write_metrics_csv(&metrics, &mut f)?;
    log::info!(
        "variant {}: OA {:.4}, AUC {:.4} -> {}",
        args.variant,
        metrics.cells[0].oa,
        metrics.cells[0].auc,
        metrics_path.display()
    );
    Ok(())
}
