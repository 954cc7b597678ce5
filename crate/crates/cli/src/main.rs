mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffmae::model::DecoderVariant;
use diffmae::numerics::OpKind;
use diffmae::patching::MaskKind;
use diffmae::training::Target;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "diffmae", version, about = "Masked-patch diffusion autoencoder: pre-train, inpaint, fine-tune, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_mask(s: &str) -> Result<MaskKind, String> {
    match s {
        "random" => Ok(MaskKind::Random),
        "center" => Ok(MaskKind::Center),
        _ => Err(format!("unknown mask `{s}` (random, center)")),
    }
}

fn parse_fault(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op `{s}`"))
}

/// Flags that override values from the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mask)]
    pub mask: Option<MaskKind>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub decoder: Option<DecoderVariant>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub t_min: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub fixed_t: Option<usize>,
    #[arg(long)]
    pub target: Option<Target>,
    /// Training, fine-tuning or sampling steps, depending on the command.
    #[arg(long)]
    pub steps: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.sampler.seed = s;
            cfg.finetune.seed = s;
        }
        if let Some(m) = self.mask {
            cfg.train.mask.kind = m;
        }
        if let Some(r) = self.mask_ratio {
            cfg.train.mask.ratio = r;
        }
        if let Some(d) = self.decoder {
            cfg.model.decoder = d;
        }
        if let Some(r) = self.rho {
            cfg.train.schedule.rho = r;
        }
        if let Some(t) = self.t_min {
            cfg.train.schedule.t_min = t;
        }
        if let Some(t) = self.t_max {
            cfg.train.schedule.t_max = t;
        }
        if let Some(t) = self.fixed_t {
            cfg.train.schedule.fixed_t = Some(t);
        }
        if let Some(t) = self.target {
            cfg.train.target = t;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train on the configured images; writes checkpoint, loss log and resolved config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
        /// Exit after this step as if interrupted (no final checkpoint).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Inpaint one PNG; writes the masked input, snapshots and the final image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampler settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fine-tune a classifier on the labeled synthetic set, from scratch or a checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Masked-region reconstruction metrics of a checkpoint on the configured images.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference gradient suite at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, hide = true, value_parser = parse_fault)]
        inject_fault: Option<OpKind>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out, resume, stop_after, overrides } => {
            commands::pretrain(&config, &out, resume, stop_after, &overrides)
        }
        Command::Inpaint { checkpoint, image, out, config, overrides } => {
            commands::inpaint(&checkpoint, &image, &out, config.as_deref(), &overrides)
        }
        Command::Finetune { config, checkpoint, out, overrides } => {
            commands::finetune(&config, checkpoint.as_deref(), &out, &overrides)
        }
        Command::Eval { config, checkpoint, out, overrides } => commands::eval(&config, &checkpoint, &out, &overrides),
        Command::Gradcheck { seed, max_coords, inject_fault } => commands::gradcheck(seed, max_coords, inject_fault),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
