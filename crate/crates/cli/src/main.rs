use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sds3d::eval::{evaluate, ExtractorRegistry};
use sds3d::guidance::BackendRegistry;
use sds3d::io::{load_checkpoint, load_conditions, load_reference, RunConfig};
use sds3d::render::{export_turntable, turntable_poses};
use sds3d::tet::export_obj;
use sds3d::train::{build_backends, TrainedModel, Trainer, CHECKPOINT_FILE};
use sds3d::{Error, Result};

/// Single-image 3D generation by score distillation.
#[derive(Debug, Parser)]
#[command(name = "sds3d", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; every artifact is written below it.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Guidance backend name.
    #[arg(long, global = true)]
    backend: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train both stages and write checkpoints, the log and the mesh.
    Generate {
        /// Continue from the checkpoint in the output directory if present.
        #[arg(long)]
        resume: bool,
    },
    /// Render evenly spaced views of a checkpoint to PNG frames.
    RenderTurntable(ViewArgs),
    /// Compute turntable metrics and write metrics.json.
    Evaluate(ViewArgs),
    /// Extract the colored surface of a checkpoint as OBJ.
    ExportMesh {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ViewArgs {
    /// Defaults to the checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    /// Camera elevation in degrees.
    #[arg(long, allow_negative_numbers = true)]
    elevation: Option<f64>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_env(std::env::vars())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(output) = &common.output {
        config.output = output.clone();
    }
    if let Some(backend) = &common.backend {
        config.backend = backend.clone();
    }
    Ok(config)
}

fn checkpoint_path(config: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| config.output.join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path));
    }
    Ok(path)
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::from_checkpoint(&load_checkpoint(path)?)
}

fn generate(config: &RunConfig, resume: bool) -> Result<()> {
    let registry = BackendRegistry::default();
    if !registry.contains(&config.backend) {
        return Err(Error::UnknownBackend {
            name: config.backend.clone(),
            registered: registry.names(),
        });
    }
    config.validate()?;
    let reference = load_reference(config)?;
    let (g2, g3) = build_backends(
        &registry,
        &config.backend,
        &config.train,
        &reference,
        config.schedule.clone(),
        config.backend_options_value(),
    )?;
    let existing = config.output.join(CHECKPOINT_FILE);
    let mut trainer = if resume && existing.exists() {
        log::info!("resuming from {}", existing.display());
        Trainer::resume(config.train.clone(), reference, g2, g3, &load_checkpoint(&existing)?)?
    } else {
        Trainer::new(config.train.clone(), config.field.clone(), reference, g2, g3, config.seed)?
    };
    trainer.set_extra_conditions(load_conditions(config)?);
    std::fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let resolved = config.output.join("config.toml");
    std::fs::write(&resolved, config.to_toml_string()?).map_err(|e| Error::io(&resolved, e))?;
    let artifacts = trainer.run(&config.output)?;
    println!("checkpoint: {}", artifacts.checkpoint.display());
    if let Some(mesh) = artifacts.mesh {
        println!("mesh: {}", mesh.display());
    }
    println!("log: {}", artifacts.log.display());
    Ok(())
}

fn render_turntable(config: &RunConfig, args: &ViewArgs) -> Result<()> {
    let model = load_model(&checkpoint_path(config, &args.checkpoint)?)?;
    let eval = &config.eval;
    let frames = args.frames.unwrap_or(eval.frames);
    let poses = turntable_poses(
        frames,
        args.elevation.unwrap_or(eval.elevation_deg),
        eval.radius,
        eval.fov_y_deg,
    )?;
    let n = eval.resolution;
    let renders = poses
        .iter()
        .map(|p| model.render(p, n, n, &eval.render, &eval.raster))
        .collect::<Result<Vec<_>>>()?;
    let dir = config.output.join("turntable");
    export_turntable(&dir, &poses, &renders)?;
    println!("{} frames in {}", frames, dir.display());
    Ok(())
}

fn run_evaluate(config: &RunConfig, args: &ViewArgs) -> Result<()> {
    let checkpoint = checkpoint_path(config, &args.checkpoint)?;
    let mut eval = config.eval.clone();
    if let Some(k) = args.frames {
        eval.frames = k;
    }
    if let Some(e) = args.elevation {
        eval.elevation_deg = e;
    }
    let mut at_eval_size = config.clone();
    at_eval_size.train.resolution = eval.resolution;
    let reference = load_reference(&at_eval_size)?;
    let report = evaluate(&checkpoint, &reference.image, &eval, &ExtractorRegistry::default(), &config.output)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn export_mesh(config: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<()> {
    let model = load_model(&checkpoint_path(config, checkpoint)?)?;
    let path = config.output.join("mesh.obj");
    export_obj(&path, &model.surface(&config.train.tet)?)?;
    println!("mesh: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = load_config(&cli.common).and_then(|config| match &cli.command {
        Command::Generate { resume } => generate(&config, *resume),
        Command::RenderTurntable(args) => render_turntable(&config, args),
        Command::Evaluate(args) => run_evaluate(&config, args),
        Command::ExportMesh { checkpoint } => export_mesh(&config, checkpoint),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
