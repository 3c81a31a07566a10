mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtl_fer::checkpoint;
use mtl_fer::data::{self, DatasetManifest};
use mtl_fer::ensemble::{self, DescriptorMember, EnsembleDescriptor};
use mtl_fer::train::train_single;
use mtl_fer::Exec;

use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "training_log.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";
pub const ENSEMBLE_DIR: &str = "ensemble";
pub const DESCRIPTOR_FILE: &str = "ensemble.toml";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Parser)]
#[command(name = "mtl-fer", version, about = "Multi-task facial expression recognition")]
struct Cli {
    /// Run every data-parallel stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and report on the validation split.
    Train(RunArgs),
    /// Re-evaluate the checkpoint written by `train`.
    Eval(RunArgs),
    /// Bagged ensembles.
    Ensemble {
        #[command(subcommand)]
        action: EnsembleAction,
    },
}

#[derive(Subcommand)]
enum EnsembleAction {
    /// Train every member on its own bag and write a descriptor.
    Train(RunArgs),
    /// Soft-vote the members listed in the descriptor.
    Eval(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()
            .with_context(|| format!("invalid config {}", self.config.display()))?;
        cfg.validate_paths()?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn validation_split(cfg: &RunConfig, exec: Exec) -> Result<(DatasetManifest, DatasetManifest)> {
    let manifest = data::load_manifest(&cfg.data.root, exec)?;
    Ok(data::split_train_val(&manifest, cfg.data.val_fraction, cfg.split_seed())?)
}

fn gen_data(n: usize, seed: u64, out: &Path, exec: Exec) -> Result<()> {
    let manifest = data::generate_synthetic_dataset(n, seed, out, exec)?;
    print!("{}", manifest.summary());
    Ok(())
}

fn train(args: &RunArgs, exec: Exec) -> Result<()> {
    let cfg = args.load()?;
    let (train_set, val_set) = validation_split(&cfg, exec)?;
    let (member, log) = train_single(&train_set, &val_set, &cfg.single_train_config(), exec)?;
    create_dir(&cfg.out_dir)?;
    checkpoint::save(&member.network, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    write(&cfg.out_dir.join(LOG_FILE), log.to_csv())?;
    let report = member.metrics.report.to_string();
    write(&cfg.out_dir.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}

fn eval(args: &RunArgs, exec: Exec) -> Result<()> {
    let cfg = args.load()?;
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    let net = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let (_, val_set) = validation_split(&cfg, exec)?;
    let (report, _) = ensemble::evaluate(&[&net], &val_set, exec)?;
    let report = report.to_string();
    write(&cfg.out_dir.join(EVAL_REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}

fn ensemble_train(args: &RunArgs, exec: Exec) -> Result<()> {
    let cfg = args.load()?;
    let (train_set, val_set) = validation_split(&cfg, exec)?;
    let ecfg = cfg.ensemble_config();
    let members = ensemble::train_ensemble(&train_set, &val_set, &cfg.train, &ecfg, exec)?;
    let dir = cfg.out_dir.join(ENSEMBLE_DIR);
    create_dir(&dir)?;
    let mut entries = Vec::new();
    for (i, m) in members.iter().enumerate() {
        let file = PathBuf::from(format!("member_{i}.ckpt"));
        checkpoint::save(&m.network, &dir.join(&file))?;
        println!(
            "member {i}: {} seed {} bag {} val_macro_f1={:.4}",
            m.config.backbone.variant,
            m.config.seed,
            m.bag.len(),
            m.metrics.report.macro_f1
        );
        entries.push(DescriptorMember {
            checkpoint: file,
            variant: m.config.backbone.variant,
            seed: m.config.seed,
            bag_size: m.bag.len(),
        });
    }
    let descriptor = EnsembleDescriptor {
        subsample_fraction: ecfg.subsample_fraction,
        bag_seed: ecfg.bag_seed,
        members: entries,
    };
    descriptor.save(&dir.join(DESCRIPTOR_FILE))?;
    Ok(())
}

fn ensemble_eval(args: &RunArgs, exec: Exec) -> Result<()> {
    let cfg = args.load()?;
    let dir = cfg.out_dir.join(ENSEMBLE_DIR);
    let descriptor_path = dir.join(DESCRIPTOR_FILE);
    if !descriptor_path.is_file() {
        bail!("ensemble descriptor {} not found; run `ensemble train` first", descriptor_path.display());
    }
    let descriptor = EnsembleDescriptor::load(&descriptor_path)?;
    let networks = descriptor
        .checkpoint_paths(&descriptor_path)?
        .iter()
        .map(|p| checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let (_, val_set) = validation_split(&cfg, exec)?;
    let refs: Vec<_> = networks.iter().collect();
    let (report, preds) = ensemble::evaluate(&refs, &val_set, exec)?;
    let report = report.to_string();
    write(&dir.join(REPORT_FILE), &report)?;
    write(&dir.join(PREDICTIONS_FILE), ensemble::predictions_csv(&preds))?;
    print!("{report}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::GenData { n, seed, out } => gen_data(*n, *seed, out, exec),
        Command::Train(args) => train(args, exec),
        Command::Eval(args) => eval(args, exec),
        Command::Ensemble { action } => match action {
            EnsembleAction::Train(args) => ensemble_train(args, exec),
            EnsembleAction::Eval(args) => ensemble_eval(args, exec),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
