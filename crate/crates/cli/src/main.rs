use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use lingseg::ablate::{ablate, parse_variants};
use lingseg::data::{generate_dataset, save_dataset, SynthConfig};
use lingseg::predict::predict_file;
use lingseg::train::{evaluate_checkpoint, train, SplitName};
use lingseg::{Checkpoint, Error, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "lingseg",
    version,
    about = "Segment images from referring expressions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the checkpoint with the best validation IoU.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of its configured data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Write a binary mask and a probability heatmap for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expr: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Directory for the output PNGs (defaults to the current one).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train several architecture variants on shared data and tabulate them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated keys: lingunet-1x1, lingunet-3x3, text-kernels-1x1, full, no-multiscale.
        #[arg(
            long,
            default_value = "lingunet-1x1,lingunet-3x3,text-kernels-1x1,full"
        )]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset on disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings as JSON (defaults to the 64×64 generator).
        #[arg(long)]
        generator: Option<PathBuf>,
    },
}

fn read_generator(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let gen: SynthConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(e.to_string()).context(path.display().to_string()))?;
    gen.validate()?;
    Ok(gen)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = train(&cfg, Some(&dir))?;
            for e in &outcome.epochs {
                println!("{}", serde_json::to_string(e)?);
            }
            let summary = json!({
                "checkpoint": outcome.checkpoint_path,
                "log": outcome.log_path,
                "best_epoch": outcome.best.epoch,
                "best_val_iou": outcome.best.best_val,
                "steps": outcome.losses.len(),
            });
            println!("{summary}");
        }
        Command::Eval { ckpt, split } => {
            let split: SplitName = split.parse()?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let eval = evaluate_checkpoint(&ckpt, split)?;
            let mut out = serde_json::to_value(&eval.report)?;
            out["split"] = json!(split);
            out["relational_iou"] = json!(eval.relational_iou);
            println!("{out}");
        }
        Command::Predict {
            ckpt,
            image,
            expr,
            threshold,
            out,
        } => {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::Parameter(format!(
                    "threshold {threshold} not in (0, 1)"
                )));
            }
            let ckpt = Checkpoint::load(&ckpt)?;
            let files = predict_file(&ckpt, &image, &expr, threshold, &out)?;
            let mask = files.prediction.mask.data();
            let summary = json!({
                "mask": files.mask_path,
                "prob": files.prob_path,
                "size": [files.prediction.mask.shape()[0], files.prediction.mask.shape()[1]],
                "foreground": mask.iter().filter(|&&v| v > 0.5).count(),
            });
            println!("{summary}");
        }
        Command::Ablate {
            config,
            variants,
            out,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let variants = parse_variants(&variants)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let table = ablate(&cfg, &variants, Some(&dir))?;
            let path = dir.join("ablation.json");
            std::fs::write(&path, serde_json::to_string_pretty(&table)?)
                .map_err(|e| Error::Io { path, source: e })?;
            print!("{}", table.render());
        }
        Command::Synth {
            out,
            n,
            seed,
            generator,
        } => {
            let gen = match generator {
                Some(p) => read_generator(&p)?,
                None => SynthConfig::default(),
            };
            let samples = generate_dataset(&gen, n, seed)?;
            save_dataset(&out, &samples)?;
            println!(
                "{}",
                json!({ "out": out, "n": samples.len(), "seed": seed })
            );
        }
    }
    Ok(())
}

fn error_line(kind: &str, msg: &str) -> String {
    format!("error kind={kind} msg={}", json!(msg))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
