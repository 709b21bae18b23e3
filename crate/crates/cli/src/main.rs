use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gbh::config::RunConfig;
use gbh::Error;

mod commands;
mod draw;

#[derive(Parser, Debug)]
#[command(name = "gbh", version, about = "PV defect detector: data preparation, training, evaluation and inference")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: an optional `key = value` file, then per-key flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long = "input_size", visible_alias = "input-size")]
    input_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "batch_size", visible_alias = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    mosaic: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    resume: Option<String>,
    #[arg(long = "out_dir", visible_alias = "out-dir")]
    out_dir: Option<String>,
    #[arg(long = "save_every", visible_alias = "save-every")]
    save_every: Option<String>,
    #[arg(long = "eval_every", visible_alias = "eval-every")]
    eval_every: Option<String>,
    #[arg(long = "auto_anchors", visible_alias = "auto-anchors")]
    auto_anchors: Option<String>,
    #[arg(long)]
    conf: Option<String>,
    #[arg(long = "nms_iou", visible_alias = "nms-iou")]
    nms_iou: Option<String>,
    #[arg(long = "match_iou", visible_alias = "match-iou")]
    match_iou: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> gbh::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("variant", &self.variant),
            ("profile", &self.profile),
            ("input_size", &self.input_size),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("mosaic", &self.mosaic),
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("resume", &self.resume),
            ("out_dir", &self.out_dir),
            ("save_every", &self.save_every),
            ("eval_every", &self.eval_every),
            ("auto_anchors", &self.auto_anchors),
            ("conf", &self.conf),
            ("nms_iou", &self.nms_iou),
            ("match_iou", &self.match_iou),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                c.set(k, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crop raw panel images (standard layout) into a square-crop corpus.
    Preprocess {
        raw: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        crop: u32,
        /// Seed of the train/val shuffle.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "train_fraction", visible_alias = "train-fraction", default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Compute anchors from the training split.
    Anchors {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic corpus in the standard layout.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        val: usize,
        #[arg(long, default_value_t = 192)]
        size: u32,
        /// Defect size multiplier relative to 600-pixel crops.
        #[arg(long, default_value_t = 0.32)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defect mix: `mixed` or `scratch-heavy`.
        #[arg(long, default_value = "mixed")]
        mix: String,
    },
    /// Train a model on the training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Run a checkpoint on image files.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write `<stem>.det.png` with drawn boxes into this directory.
        #[arg(long)]
        annotate: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Parameters, modules, FLOPs and forward latency per variant.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "yolov5s,yolov5-1,yolov5-2,gbh")]
        variants: Vec<String>,
        #[arg(long, default_value = "full")]
        profile: String,
        #[arg(long = "input_size", visible_alias = "input-size")]
        input_size: Option<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parameter / module / FLOP counts of one variant.
    ParamCount {
        #[arg(long, default_value = "gbh")]
        variant: String,
        #[arg(long, default_value = "full")]
        profile: String,
        #[arg(long = "input_size", visible_alias = "input-size")]
        input_size: Option<usize>,
    },
}

/// 1 for I/O-type failures, 2 for configuration and contract errors.
fn error_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Image { .. } | Error::Voc(_) => 1,
        Error::Checkpoint(gbh::error::CheckpointError::Io(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Preprocess {
            raw,
            out,
            crop,
            seed,
            train_fraction,
        } => commands::preprocess(&raw, &out, crop, seed, train_fraction),
        Command::Anchors { cfg } => cfg.resolve().and_then(|c| commands::anchors(&c)),
        Command::Synth {
            out,
            train,
            val,
            size,
            scale,
            seed,
            mix,
        } => commands::synth(&out, train, val, size, scale, seed, &mix),
        Command::Train { cfg } => cfg.resolve().and_then(|c| commands::train(&c)),
        Command::Eval { cfg, split } => cfg.resolve().and_then(|c| commands::eval(&c, &split)),
        Command::Detect { cfg, annotate, images } => {
            cfg.resolve().and_then(|c| commands::detect(&c, &images, annotate.as_deref()))
        }
        Command::Bench {
            variants,
            profile,
            input_size,
            reps,
            csv,
        } => commands::bench(&variants, &profile, input_size, reps, csv.as_deref()),
        Command::ParamCount {
            variant,
            profile,
            input_size,
        } => commands::param_count(&variant, &profile, input_size),
    };
    match result {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Partial(n)) => {
            eprintln!("{n} item(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
