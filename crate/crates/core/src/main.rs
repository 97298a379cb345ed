use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dff::eval::{self, EvalOptions};
use dff::harness::{self, Dataset, SynthConfig, TrainConfig};
use dff::model::DffModel;
use dff::{io, par, Error, Result};

#[derive(Parser)]
#[command(name = "dff", version, about = "Dynamic feature fusion for semantic edge detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        /// `key = value` generator settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// MF at optimal dataset scale on the validation split.
    Eval {
        /// Checkpoint directory; omit when scoring stored predictions with --pred.
        #[arg(long, required_unless_present = "pred")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<image>.dft` or `<image>_<class>.pgm` predictions.
        #[arg(long, conflicts_with = "ckpt")]
        pred: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skeletonize binarized predictions before matching.
        #[arg(long)]
        thin: bool,
        /// Write fused probabilities here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Per-class probability maps for a single image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// 8-bit P5 or P6 image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the six comparison rows.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base training settings shared by every row.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::read)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => SynthConfig::from_map(&io::read_kv(&p)?)?,
                None => SynthConfig::default(),
            };
            harness::gen_dataset(&cfg, &out)?;
            println!("wrote {} images to {}", cfg.num_images, out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = train_config(config.as_deref())?;
            let data = Dataset::load(&data)?;
            let rec = harness::train(&cfg, &data, &out)?;
            println!(
                "loss {:.4} -> {:.4} over {} epochs in {:.1}s; checkpoint {}",
                rec.loss_trace[0],
                rec.loss_trace.last().unwrap(),
                rec.loss_trace.len(),
                rec.wall_clock.as_secs_f64(),
                rec.checkpoint.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            pred,
            tolerance,
            report,
            thin,
            dump,
        } => {
            let opts = EvalOptions {
                tolerance,
                thin,
                ..Default::default()
            };
            let fuse = if let Some(pred) = pred {
                let data = Dataset::load(&data)?;
                harness::evaluate_predictions(&pred, &data, &opts, true)?
            } else {
                let ckpt = ckpt.expect("clap requires --ckpt without --pred");
                let ev = harness::evaluate(&ckpt, &data, &opts, dump.as_deref())?;
                println!("side5 only:\n{}", ev.side5.to_table());
                ev.fuse
            };
            println!("fused:\n{}", fuse.to_table());
            if let Some(path) = report {
                fuse.write_csv(&path)?;
            }
        }
        Command::Infer { ckpt, image, out } => {
            let model = DffModel::load(&ckpt)?;
            let img = harness::read_image(&image)?;
            let name = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let preds = harness::predict(&model, &[&img])?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            eval::write_prediction_pgms(&out, name, &preds[0].0)?;
            println!("wrote {} class maps to {}", model.config.num_classes, out.display());
        }
        Command::Ablation {
            data,
            out,
            config,
            seeds,
            tolerance,
        } => {
            let base = train_config(config.as_deref())?;
            let data = Dataset::load(&data)?;
            let opts = EvalOptions {
                tolerance,
                ..Default::default()
            };
            let report = harness::ablation(&data, &out, &base, &harness::ablation_rows(), &seeds, &opts)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match par::with_threads(par::env_threads(), || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
