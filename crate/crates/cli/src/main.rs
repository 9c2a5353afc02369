//! `magicvid`: synthetic-data latent video diffusion, end to end.
//!
//! Pipeline order: gen-data, train-vae, train-keyframe, train-interp,
//! sample, interpolate, decode, eval. Every command reads `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use magicvid_core::data::ShapeKind;
use magicvid_core::pipeline::{self, CondRequest, RunConfig, SampleOptions};
use magicvid_core::train::TrainOutcome;
use magicvid_core::{Error, Sampler};

#[derive(Parser)]
#[command(name = "magicvid", version, about = "Latent video diffusion on synthetic moving-shape clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Random seed; overrides the seed in the config
    #[arg(long, value_name = "U64", env = "MAGICVID_SEED", hide_env_values = true)]
    seed: Option<u64>,

    /// Worker threads
    #[arg(long, value_name = "N", default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct Sampling {
    /// Reverse-process sampler [default: from config]
    #[arg(long, value_name = "ddpm|ddim")]
    sampler: Option<Sampler>,

    /// DDIM steps [default: from config]
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic moving-shape corpus
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output corpus directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the frame autoencoder (and optionally its temporal decoder layers)
    TrainVae {
        #[command(flatten)]
        common: Common,
        /// Output checkpoint directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training steps [default: from config]
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Train the keyframe (or image) denoiser on VAE latents
    TrainKeyframe {
        #[command(flatten)]
        common: Common,
        /// VAE checkpoint directory
        #[arg(long, value_name = "DIR")]
        vae: PathBuf,
        /// Checkpoint to continue from; image checkpoints are videofied
        #[arg(long, value_name = "DIR")]
        init: Option<PathBuf>,
        /// Output checkpoint directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training steps [default: from config]
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Train the frame interpolation denoiser from a keyframe checkpoint
    TrainInterp {
        #[command(flatten)]
        common: Common,
        /// VAE checkpoint directory
        #[arg(long, value_name = "DIR")]
        vae: PathBuf,
        /// Keyframe checkpoint directory
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Output checkpoint directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training steps [default: from config]
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Sample keyframe latents under a text-proxy condition
    Sample {
        #[command(flatten)]
        common: Common,
        /// Keyframe or image checkpoint directory
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Output latent directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        /// Clips to sample [default: from config]
        #[arg(long, value_name = "N")]
        num_samples: Option<usize>,
        /// Conditioned shape
        #[arg(long, value_name = "square|circle", default_value = "square")]
        cond_kind: ShapeKind,
        /// Conditioned RGB color in [0, 1]
        #[arg(long, value_name = "R,G,B", default_value = "1,1,1", value_parser = parse_triple)]
        cond_color: [f32; 3],
        /// Conditioned velocity in pixels per frame
        #[arg(long, value_name = "DX,DY", default_value = "1,0", allow_hyphen_values = true, value_parser = parse_pair)]
        cond_velocity: [f32; 2],
        /// Source frame rate
        #[arg(long, value_name = "F64", default_value_t = 24.0)]
        cond_fps: f64,
        /// Sampled window length; with --cond-fps it fixes the motion rate
        #[arg(long, value_name = "N", default_value_t = 16)]
        window_length: usize,
    },
    /// Fill each keyframe gap with three generated frames
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// Interpolation checkpoint directory
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Keyframe latent directory
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output latent directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Decode latents to PPM frames and a raw float video file
    Decode {
        #[command(flatten)]
        common: Common,
        /// VAE checkpoint directory
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Latent directory
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output video directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score decoded clips against the corpus
    Eval {
        #[command(flatten)]
        common: Common,
        /// Decoded video directory
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Output directory for metrics.json
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f32; N], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("`{p}` is not a number"))?;
    }
    Ok(out)
}

fn parse_pair(s: &str) -> Result<[f32; 2], String> {
    parse_floats(s)
}

fn parse_triple(s: &str) -> Result<[f32; 3], String> {
    parse_floats(s)
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainVae { common, .. }
            | Command::TrainKeyframe { common, .. }
            | Command::TrainInterp { common, .. }
            | Command::Sample { common, .. }
            | Command::Interpolate { common, .. }
            | Command::Decode { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

fn sample_options(cfg: &RunConfig, seed: Option<u64>, s: &Sampling) -> SampleOptions {
    let mut o = SampleOptions::from_config(cfg, seed.unwrap_or(0));
    if let Some(v) = s.sampler {
        o.sampler = v;
    }
    if let Some(v) = s.steps {
        o.ddim_steps = v;
    }
    o
}

fn report_training(what: &str, out: &Path, o: &TrainOutcome) {
    for (step, loss) in &o.trace.entries {
        println!("step {step} loss {loss:.6}");
    }
    println!(
        "{what}: probe loss {:.6} -> {:.6}; checkpoint written to {}",
        o.initial_probe,
        o.final_probe,
        out.display()
    );
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Io {
            path: p.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} directory not found")),
        }
        .into())
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    if common.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed;
    match &cli.command {
        Command::GenData { out, .. } => {
            let corpus = pipeline::run_gen_data(&cfg, out, seed)?;
            println!("wrote {} clips to {}", corpus.len(), out.display());
        }
        Command::TrainVae { out, steps, .. } => {
            let o = pipeline::run_train_vae(&cfg, out, seed, *steps)?;
            report_training("train-vae", out, &o);
        }
        Command::TrainKeyframe { vae, init, out, steps, .. } => {
            require_dir(vae, "VAE checkpoint")?;
            if let Some(i) = init {
                require_dir(i, "init checkpoint")?;
            }
            let o = pipeline::run_train_keyframe(&cfg, vae, init.as_deref(), out, seed, *steps)?;
            report_training("train-keyframe", out, &o);
        }
        Command::TrainInterp { vae, ckpt, out, steps, .. } => {
            require_dir(vae, "VAE checkpoint")?;
            require_dir(ckpt, "keyframe checkpoint")?;
            let o = pipeline::run_train_interp(&cfg, vae, ckpt, out, seed, *steps)?;
            report_training("train-interp", out, &o);
        }
        Command::Sample { ckpt, out, sampling, num_samples, cond_kind, cond_color, cond_velocity, cond_fps, window_length, .. } => {
            require_dir(ckpt, "checkpoint")?;
            let mut opts = sample_options(&cfg, seed, sampling);
            if let Some(n) = num_samples {
                opts.num_samples = *n;
            }
            let cond = CondRequest {
                kind: *cond_kind,
                color: *cond_color,
                velocity: *cond_velocity,
                fps: *cond_fps,
                window_length: *window_length,
            };
            let set = pipeline::run_sample(&cfg, ckpt, &cond, &opts, out)?;
            println!("sampled {} clip(s) of shape {:?} into {}", set.clips.len(), set.clips[0].shape(), out.display());
        }
        Command::Interpolate { ckpt, input, out, sampling, .. } => {
            require_dir(ckpt, "checkpoint")?;
            require_dir(input, "input")?;
            let set = pipeline::run_interpolate(ckpt, input, &sample_options(&cfg, seed, sampling), out)?;
            println!("interpolated {} clip(s) to {} frames into {}", set.clips.len(), set.clips[0].dim(0), out.display());
        }
        Command::Decode { ckpt, input, out, .. } => {
            require_dir(ckpt, "checkpoint")?;
            require_dir(input, "input")?;
            let set = pipeline::run_decode(ckpt, input, out)?;
            println!("decoded {} clip(s) of {} frames into {}", set.clips.len(), set.clips[0].dim(0), out.display());
        }
        Command::Eval { input, out, .. } => {
            require_dir(input, "input")?;
            let m = pipeline::run_eval(&cfg, input, out)?;
            println!("per_frame_mse {:.6}", m.per_frame_mse);
            println!("temporal_flicker {:.6}", m.temporal_flicker);
            match m.condition_agreement {
                Some(a) => println!("condition_agreement {a:.4}"),
                None => println!("condition_agreement n/a"),
            }
        }
    }
    Ok(())
}

/// 2: bad arguments or config, 3: file-system problems or unreadable
/// checkpoints, 4: numeric divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Divergence(_)) => 4,
        Some(Error::Io { .. } | Error::Checkpoint { .. }) => 3,
        _ => 2,
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn diagnostic(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for e in err.chain() {
        let s = e.to_string();
        if !msg.contains(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.render().to_string();
            let lines: Vec<&str> =
                text.lines().take_while(|l| !l.starts_with("Usage:")).map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("{}", lines.join(" "));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", diagnostic(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
