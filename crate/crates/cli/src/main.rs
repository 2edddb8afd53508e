use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mugennet::data::{self, DatasetManifest, Resolution, Split};
use mugennet::gradcheck;
use mugennet::metrics::CSV_HEADER;
use mugennet::model::Ablation;
use mugennet::train::{self, CostRow, RunConfig, TrainLog};
use mugennet::Error;

#[derive(Parser)]
#[command(name = "mugennet", version, about = "Train, evaluate and benchmark the MugenNet polyp segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Tb,
    Cb,
    Mm,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::Tb => Ablation::Tb,
            AblateArg::Cb => Ablation::Cb,
            AblateArg::Mm => Ablation::Mm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Switch off one component (repeatable).
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        /// Overrides the checkpoint path of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory and write a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Segment one PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the mask binarized at 0.5.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Generate a synthetic polyp dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "64x48")]
        res: Resolution,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single-frame inference.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// A module name or a single case name.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 64)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Files written next to a checkpoint: `.log.json` holds the training
/// history, `.run.json` the run config.
fn sidecar(checkpoint: &Path, suffix: &str) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn run_train(config: &Path, ablate: &[AblateArg], checkpoint: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    for &a in ablate {
        cfg = cfg.with_ablation(a.into());
    }
    cfg.validate()?;
    let ckpt = checkpoint.or(cfg.checkpoint.clone()).unwrap_or_else(|| PathBuf::from("mugennet.ckpt"));
    cfg.checkpoint = Some(ckpt.clone());
    let data = cfg.datasets()?;
    info!("data: {} train / {} val / {} test", data.train.len(), data.val.len(), data.test.len());
    let mut out = train::train(&cfg, &data.train, &data.val)?;
    fs::write(sidecar(&ckpt, ".log.json"), serde_json::to_string_pretty(&out.log)?)?;
    fs::write(sidecar(&ckpt, ".run.json"), serde_json::to_string_pretty(&cfg)?)?;
    if let Some(best) = out.log.best() {
        println!("best epoch {} val mDice {:.4} mIoU {:.4}", best.epoch, best.val_mdice, best.val_miou);
    }
    if !data.test.is_empty() {
        let r = train::evaluate(&out.net, &mut out.store, &data.test, cfg.batch_size)?;
        println!("test  mDice {:.4} mIoU {:.4} MAE {:.4}", r.mdice, r.miou, r.mae);
    }
    println!("checkpoint {} ({:.1} min)", ckpt.display(), out.log.seconds / 60.0);
    Ok(())
}

fn run_eval(checkpoint: &Path, dir: &Path, out: &Path, split: SplitArg) -> anyhow::Result<()> {
    let (net, mut store) = train::load_model(checkpoint)?;
    let res = Resolution { width: net.cfg.width, height: net.cfg.height };
    let mut manifest = DatasetManifest::open(dir, res)?;
    let name = manifest.name.clone();
    manifest = match split {
        SplitArg::All => manifest,
        SplitArg::Train => manifest.subset(Split::Train),
        SplitArg::Val => manifest.subset(Split::Val),
        SplitArg::Test => manifest.subset(Split::Test),
    };
    let samples = manifest.load()?;
    let report = train::evaluate(&net, &mut store, &samples, 16)?;
    let model = checkpoint.file_stem().map_or("mugennet".into(), |s| s.to_string_lossy().into_owned());
    let row = report.csv_row(&name, &model);
    fs::write(out, format!("{CSV_HEADER}\n{row}\n")).with_context(|| out.display().to_string())?;
    println!("{CSV_HEADER}\n{row}");
    Ok(())
}

fn run_bench(checkpoint: &Path, frames: usize) -> anyhow::Result<()> {
    let (net, mut store) = train::load_model(checkpoint)?;
    let model = checkpoint.file_stem().map_or("mugennet".into(), |s| s.to_string_lossy().into_owned());
    let report = train::bench_fps(&net, &mut store, frames, &model)?;
    println!("{report}");
    let log_file = sidecar(checkpoint, ".log.json");
    if let Ok(text) = fs::read_to_string(&log_file) {
        let log: TrainLog = serde_json::from_str(&text).with_context(|| log_file.display().to_string())?;
        let Some(best) = log.best() else { return Ok(()) };
        let cfg_text = fs::read_to_string(sidecar(checkpoint, ".run.json")).ok();
        let lr = cfg_text
            .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
            .map_or(RunConfig::default().lr, |c| c.lr);
        let row = CostRow {
            model,
            epochs: log.epochs.len(),
            lr,
            minutes: log.seconds / 60.0,
            fps: report.p50_fps,
            mdice: best.val_mdice,
        };
        println!("{}\n{}", CostRow::HEADER, row.to_csv());
    }
    Ok(())
}

fn run_gradcheck(module: Option<&str>, coords: usize, seed: u64) -> anyhow::Result<ExitCode> {
    let cases = gradcheck::cases_for(module, seed)?;
    let mut failed = 0;
    for case in &cases {
        let r = gradcheck::check(case, coords, seed)?;
        println!(
            "{} {:<24} {:?} max rel err {:.3e} (tol {:.0e}, {} coords)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.kind,
            r.max_rel_err,
            r.tolerance,
            r.coords
        );
        failed += usize::from(!r.passed());
    }
    println!("{} of {} cases passed", cases.len() - failed, cases.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config, ablate, checkpoint } => run_train(&config, &ablate, checkpoint)?,
        Command::Eval { checkpoint, data, out, split } => run_eval(&checkpoint, &data, &out, split)?,
        Command::Predict { checkpoint, image, out, mask } => {
            let (net, mut store) = train::load_model(&checkpoint)?;
            train::predict_file(&net, &mut store, &image, &out, mask.as_deref())?;
            println!("wrote {}", out.display());
        }
        Command::Synth { n, res, seed, out } => {
            if n == 0 {
                bail!(Error::Config("--n must be at least 1".into()));
            }
            let m = data::synth_generate(n, res, seed, &out)?;
            println!("wrote {} samples at {res} to {}", m.entries.len(), out.display());
        }
        Command::Bench { checkpoint, frames } => run_bench(&checkpoint, frames)?,
        Command::Gradcheck { module, coords, seed } => return run_gradcheck(module.as_deref(), coords, seed),
    }
    Ok(ExitCode::SUCCESS)
}

/// 2 config, 3 data, 4 numerical abort, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Contract(_) | Error::Json(_)) => 2,
        Some(
            Error::Data(_) | Error::EmptyInput(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) | Error::Shape(_),
        ) => 3,
        Some(Error::NonFinite { .. } | Error::DegenerateVariance(_)) => 4,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
