use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use mutomo::config::RunConfig;
use mutomo::data::{build_split, phantoms, simulate, Conditions, Split};
use mutomo::methods::{reconstruct, score, Method};
use mutomo::model::Model;
use mutomo::render::{render_slice, SliceAxis};
use mutomo::sweep::{run_sweep, write_csv, Axis, Row, SweepPlan};
use mutomo_core::dataset::{read_dataset, write_dataset, Sample};

#[derive(Parser)]
#[command(name = "mutomo", version, about = "Muon scattering tomography: simulate, reconstruct, train and evaluate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file. Tables go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground-truth phantoms (a dataset file with no events).
    Phantom {
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Number of phantoms; defaults to the split size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Generate phantoms and simulate detected muons through them.
    Simulate {
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        count: Option<usize>,
        /// Muons per sample; defaults to the configured dosage.
        #[arg(long)]
        dosage: Option<usize>,
    },
    /// Reconstruct every sample of a dataset; writes predicted grids.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train μ-Net on the configured train/val splits and write a checkpoint.
    Train {
        /// Continue from this checkpoint (fine-tuning).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score methods on a dataset (the test split when no input is given).
    Eval {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "poca")]
        methods: Vec<Method>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score methods across dosage, momentum error or detector resolution.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "poca")]
        methods: Vec<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fine-tune μ-Net on each condition before scoring it.
        #[arg(long)]
        finetune: bool,
    },
    /// Write one slice of a grid as a binary PGM image.
    Render {
        #[arg(long)]
        input: PathBuf,
        /// Which sample of the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_enum, default_value = "z")]
        axis: SliceAxis,
        #[arg(long)]
        index: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    info!("resolved configuration:\n{}", config.to_toml());
    Ok(config)
}

fn required_out(common: &Common) -> Result<&Path> {
    match &common.out {
        Some(p) => Ok(p),
        None => bail!("this command writes a binary file; pass --out"),
    }
}

fn count_for(config: &RunConfig, split: Split, count: Option<usize>) -> usize {
    count.unwrap_or_else(|| split.size(config))
}

fn load_model(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Option<Model>> {
    checkpoint.map(|p| Model::load(config, p)).transpose()
}

fn emit_rows(common: &Common, rows: &[Row]) -> Result<()> {
    match &common.out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(io::BufWriter::new(file), rows)
        }
        None => write_csv(io::stdout().lock(), rows),
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let config = resolve(common)?;
    let extent = config.extent();
    match cli.command {
        Command::Phantom { split, count } => {
            let out = required_out(common)?;
            let grids = phantoms(&config, split, count_for(&config, split, count))?;
            let samples: Vec<Sample> = grids.into_iter().map(|grid| Sample { grid, events: Vec::new() }).collect();
            write_dataset(out, &samples)?;
            info!("wrote {} phantoms to {}", samples.len(), out.display());
        }
        Command::Simulate { split, count, dosage } => {
            let out = required_out(common)?;
            let mut cond = Conditions::of(&config);
            if let Some(d) = dosage {
                if d == 0 {
                    bail!("--dosage must be at least 1");
                }
                cond.dosage = d;
            }
            let grids = phantoms(&config, split, count_for(&config, split, count))?;
            let samples = simulate(&config, split, grids, &cond)?;
            write_dataset(out, &samples)?;
            info!("wrote {} samples of {} muons to {}", samples.len(), cond.dosage, out.display());
        }
        Command::Reconstruct { method, input, checkpoint } => {
            let out = required_out(common)?;
            let samples = read_dataset(&input, extent)?;
            let model = load_model(&config, checkpoint.as_deref())?;
            let (grids, seconds) = reconstruct(method, &samples, &config, model.as_ref())?;
            let report = score(&grids, &samples, config.metrics.peak, seconds)?;
            info!("{}: mse {:.6} mae {:.6} psnr {:.4} in {:.2}s", method.name(), report.mse, report.mae, report.psnr_mean, seconds);
            let recon: Vec<Sample> = grids.into_iter().map(|grid| Sample { grid, events: Vec::new() }).collect();
            write_dataset(out, &recon)?;
        }
        Command::Train { init, epochs } => {
            let out = required_out(common)?;
            let mut model = match &init {
                Some(p) => Model::load(&config, p)?,
                None => Model::fresh(&config)?,
            };
            let cond = Conditions::of(&config);
            info!("simulating training and validation splits");
            let train = build_split(&config, Split::Train, &cond)?;
            let val = build_split(&config, Split::Val, &cond)?;
            let epochs = epochs.unwrap_or(config.train.epochs);
            let logs = model.fit(&config, &train, &val, epochs, Some(out))?;
            model.save(out)?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "epoch,train_mse,val_mse")?;
            for l in &logs {
                writeln!(stdout, "{},{},{}", l.epoch, l.train_mse, l.val_mse)?;
            }
            info!("wrote checkpoint {}", out.display());
        }
        Command::Eval { methods, input, checkpoint } => {
            let samples = match &input {
                Some(p) => read_dataset(p, extent)?,
                None => build_split(&config, Split::Test, &Conditions::of(&config))?,
            };
            let model = load_model(&config, checkpoint.as_deref())?;
            let dosage = samples.first().map_or(config.dataset.dosage, |s| s.events.len());
            let mut rows = Vec::new();
            for method in methods {
                let (grids, seconds) = reconstruct(method, &samples, &config, model.as_ref())?;
                let report = score(&grids, &samples, config.metrics.peak, seconds)?;
                rows.push(Row::new(method, "dosage", &dosage.to_string(), dosage, &report));
            }
            emit_rows(common, &rows)?;
        }
        Command::Sweep { axis, values, methods, checkpoint, finetune } => {
            let model = load_model(&config, checkpoint.as_deref())?;
            let plan = SweepPlan { axis, values, methods, finetune };
            let rows = run_sweep(&config, &plan, model.as_ref())?;
            emit_rows(common, &rows)?;
        }
        Command::Render { input, sample, axis, index } => {
            let out = required_out(common)?;
            let samples = read_dataset(&input, extent)?;
            let Some(s) = samples.get(sample) else {
                bail!("sample {sample} outside 0..{}", samples.len());
            };
            let image = render_slice(&s.grid, axis, index, config.metrics.peak)?;
            fs::write(out, image).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}
