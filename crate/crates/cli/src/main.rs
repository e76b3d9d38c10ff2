use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use facemtl::data::Split;
use facemtl::model::{Sharing, Task};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "facemtl", version, about = "Age, gender and ethnicity prediction on masked faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset root holding part1, part2 and part3.
    #[arg(long, value_name = "DIR")]
    root: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a mask-occluded copy of a dataset tree plus manifest.csv.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Train on part1, validating on part3 after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sharing: Option<Sharing>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Report metrics of a checkpoint on a split (part2 by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1, 2 or 3.
        #[arg(long, default_value_t = 2)]
        part: u8,
    },
    /// Grad-CAM heatmap and overlay for one image.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// age, gender or ethnicity.
        #[arg(long)]
        head: Task,
        /// Class index or name; defaults to the predicted class.
        #[arg(long = "class")]
        class: Option<String>,
    },
    /// Write a synthetic labelled face tree for demos and smoke tests.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Images in part1, part2, part3.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 16, 16])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(r) = &common.root {
        cfg.dataset_root = r.clone();
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FACEMTL_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("FACEMTL_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Augment { common } => commands::augment(resolve(&common)?),
        Command::Train {
            common,
            sharing,
            epochs,
            batch_size,
            lr,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = sharing {
                cfg.model.sharing = s;
                cfg.model_explicit = true;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.train.adam.lr = l;
            }
            commands::train(cfg)
        }
        Command::Eval {
            common,
            checkpoint,
            part,
        } => {
            let split = Split::from_part(part).with_context(|| format!("--part must be 1, 2 or 3, got {part}"))?;
            let line = commands::eval(resolve(&common)?, &checkpoint, split)?;
            println!("{line}");
            Ok(())
        }
        Command::Cam {
            common,
            checkpoint,
            image,
            head,
            class,
        } => {
            let (pgm, ppm) = commands::cam(resolve(&common)?, &checkpoint, &image, head, class.as_deref())?;
            println!("{}\n{}", pgm.display(), ppm.display());
            Ok(())
        }
        Command::Synth { common, counts, size } => {
            let counts: [usize; 3] = counts
                .try_into()
                .map_err(|c: Vec<usize>| anyhow::anyhow!("--counts needs three values, got {}", c.len()))?;
            let out = commands::synth(resolve(&common)?, counts, size)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
