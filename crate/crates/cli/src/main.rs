use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use boldsynth_core::dataset::load_manifest;
use boldsynth_core::metrics::{evaluate_dataset, EvalOptions};
use boldsynth_core::model::Backbone;
use boldsynth_core::synth::{build_manifest, generate_cohort, Mapping, PhantomSpec};
use boldsynth_core::training::{train, Checkpoint, RunOptions};
use boldsynth_core::volume_io::{load_volume_3d, normalize_volume, save_volume};
use boldsynth_core::{Device, Encoder, TrainConfig, VolumePredictor};
use clap::{Args, Parser, Subcommand};

/// Mean-BOLD synthesis from T1-weighted volumes.
#[derive(Debug, Parser)]
#[command(name = "boldsynth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a phantom dataset and its manifest.
    Synth(SynthArgs),
    /// Train fusion and decoder on a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write a metrics CSV.
    Evaluate(EvaluateArgs),
    /// Predict a mean-BOLD volume for one T1 volume.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    /// Volume shape as H,W,Z.
    #[arg(long, default_value = "32,32,12", value_parser = parse_shape)]
    shape: (usize, usize, usize),
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelSource {
    /// Pretrained encoder weights for the vit_b16 backbone.
    #[arg(long, env = "DINOBOLD_WEIGHTS")]
    weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration when no file is given: `default` or `tiny`.
    #[arg(long, default_value = "default")]
    preset: String,
    /// `section.key=value`, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand switches: `sa=off`, `sc=off`, `loss=l1_msssim`.
    #[arg(long, value_name = "FLAG=VALUE")]
    ablation: Vec<String>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from `<out>/last.safetensors`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    source: ModelSource,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// CSV destination; printed to stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Score only voxels where the target is nonzero.
    #[arg(long)]
    masked: bool,
    #[command(flatten)]
    source: ModelSource,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    t1: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    source: ModelSource,
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| format!("`{p}` is not a size")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [h, w, z] if h >= 2 && w >= 2 && z >= 1 => Ok((h, w, z)),
        _ => Err(format!("expected H,W,Z with H,W >= 2 and Z >= 1, got `{s}`")),
    }
}

fn ablation_override(flag: &str) -> anyhow::Result<String> {
    let (k, v) = flag
        .split_once('=')
        .with_context(|| format!("ablation flag `{flag}` is not FLAG=VALUE"))?;
    let on = || match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" => Ok("true"),
        "off" | "false" | "0" => Ok("false"),
        other => bail!("`{other}` is not on/off"),
    };
    Ok(match k.to_ascii_lowercase().as_str() {
        "sa" | "slice_attention" => format!("ablation.slice_attention={}", on()?),
        "sc" | "skip_connections" => format!("ablation.skip_connections={}", on()?),
        "loss" | "loss_set" => format!("ablation.loss_set=\"{v}\""),
        other => bail!("unknown ablation flag `{other}`"),
    })
}

fn load_encoder(cfg: &TrainConfig, weights: &Option<PathBuf>) -> anyhow::Result<Encoder> {
    let mut model = cfg.model.clone();
    if model.backbone == Backbone::VitB16 && model.weights.is_none() {
        model.weights = weights.clone();
    }
    Ok(model.load_encoder(&Device::Cpu)?)
}

fn restore(checkpoint: &Path, weights: &Option<PathBuf>) -> anyhow::Result<boldsynth_core::BoldNet> {
    let ck = Checkpoint::load(checkpoint)?;
    let encoder = load_encoder(&ck.config, weights)?;
    Ok(ck.restore_model(encoder)?)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = PhantomSpec {
        shape: a.shape,
        frames: a.frames,
        n_blobs: a.blobs,
        noise_sigma: a.noise,
        seed: a.seed,
        mapping: Mapping::default(),
        ..PhantomSpec::default()
    };
    let pairs = generate_cohort(&spec, a.subjects)?;
    let manifest = build_manifest(&pairs, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::preset(&a.preset)?,
    };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    for f in &a.ablation {
        cfg.apply_override(&ablation_override(f)?)?;
    }
    let subjects = load_manifest(&a.manifest, cfg.training.discard)?;
    let encoder = load_encoder(&cfg, &a.source.weights)?;
    let resume = if a.resume {
        Some(Checkpoint::load(a.out.join("last.safetensors"))?)
    } else {
        None
    };
    let outcome = train(
        &cfg,
        &subjects,
        encoder,
        RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
        },
    )?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {} step {}: train loss {:.6}, val MS-SSIM {}",
            last.epoch,
            last.global_step,
            last.train_losses.total,
            last.val_msssim.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    println!("{}", a.out.join("last.safetensors").display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.restore_model(load_encoder(&ck.config, &a.source.weights)?)?;
    let subjects = load_manifest(&a.manifest, ck.config.training.discard)?;
    let opts = EvalOptions {
        mask_to_target: a.masked,
        ..EvalOptions::default()
    };
    let result = evaluate_dataset(&model, &subjects, &opts)?;
    match &a.out {
        Some(p) => result.save_csv(p)?,
        None => result.write_csv(std::io::stdout().lock())?,
    }
    eprintln!("{}", result.summary());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let model = restore(&a.checkpoint, &a.source.weights)?;
    let t1 = load_volume_3d(&a.t1)?;
    let pred = model.predict_volume(&normalize_volume(&t1))?;
    save_volume(&pred, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<boldsynth_core::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
