use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use musse::fieldops::StrainMap;
use musse::harness::{self, StrainWindow, TrainConfig, TrainOptions};
use musse::metrics::{cnr, snr_background, snr_e, snr_target, MetricsConfig, NrmseNorm, DEFAULT_MASK_EPS};
use musse::phantom::{simulate_sequence, PhantomSpec};
use musse::rfdata::{read_grid_blob, save_sequence, DatasetManifest, RoiKind, RoiPair, RoiSpec};
use musse::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "musse", version, about = "Unsupervised displacement and strain estimation for ultrasound RF sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom sequence with ground truth.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every stage of a new run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run in `--out` from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train one stage of an existing run.
    TrainStage {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        stage: usize,
        /// Allow retraining a stage that is already frozen.
        #[arg(long)]
        unfreeze: bool,
    },
    /// Stagewise metrics for every split of a manifest.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// ROIs for entries that do not carry their own.
        #[arg(long)]
        rois: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Norm::Literal)]
        norm: Norm,
    },
    /// Write displacement and strain blobs and strain images for a sequence.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Strain window `LOW,HIGH` for the images.
        #[arg(long, value_parser = parse_window)]
        window: Option<StrainWindow>,
    },
    /// Strain image metrics for one strain blob.
    Metrics {
        #[arg(long)]
        strain: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        /// Frame shape `HxW`; read from the neighbouring `infer.json` when
        /// omitted.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<(usize, usize)>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Literal,
    GtRms,
}

fn parse_window(s: &str) -> Result<StrainWindow, String> {
    let (a, b) = s.split_once(',').ok_or("expected LOW,HIGH")?;
    let w = StrainWindow {
        low: a.trim().parse().map_err(|e| format!("{e}"))?,
        high: b.trim().parse().map_err(|e| format!("{e}"))?,
    };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    Ok((
        h.parse().map_err(|e| format!("{e}"))?,
        w.parse().map_err(|e| format!("{e}"))?,
    ))
}

/// Target over the inclusion and a same-depth background beside it.
fn inclusion_rois(spec: &PhantomSpec) -> Option<RoiPair> {
    let inc = spec.inclusion.as_ref()?;
    let (r, c) = inc.center;
    let a = 0.7 * inc.radius;
    let right = (spec.width - 1) as f64 - c - inc.radius;
    let left = c - inc.radius;
    let room = left.max(right);
    let b = ((room - 2.0) / 2.0).clamp(2.0, a);
    let offset = inc.radius + 1.0 + b;
    let bc = if right >= left { c + offset } else { c - offset };
    let rois = RoiPair {
        target: RoiSpec::new((r, c), (a, a), RoiKind::Target),
        background: RoiSpec::new((r, bc), (a, b), RoiKind::Background),
    };
    rois.validate(spec.height, spec.width).ok()?;
    Some(rois)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { spec, out } => {
            let spec = PhantomSpec::load(&spec)?;
            let (seq, _) = simulate_sequence(&spec)?;
            save_sequence(&seq, &out)?;
            if let Some(rois) = inclusion_rois(&spec) {
                write_json(&out.join("rois.json"), &rois)?;
            }
            print_json(&serde_json::json!({ "out": out, "T": seq.len(), "H": spec.height, "W": spec.width }))
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let outcome = if resume {
                harness::resume(&out, None, TrainOptions::default())?
            } else {
                let cfg = TrainConfig::load(&config)?;
                harness::train(&cfg, &data, &out)?
            };
            for s in &outcome.stages {
                print_json(&serde_json::json!({
                    "stage": s.stage,
                    "epochs": s.epochs,
                    "iterations": s.iterations,
                    "initial_loss": s.initial_loss,
                    "final_loss": s.final_loss,
                }))?;
            }
            Ok(())
        }
        Command::TrainStage { run, stage, unfreeze } => {
            let s = harness::train_run_stage(&run, stage, unfreeze, None)?;
            print_json(&serde_json::json!({
                "stage": s.stage,
                "epochs": s.epochs,
                "iterations": s.iterations,
                "initial_loss": s.initial_loss,
                "final_loss": s.final_loss,
            }))
        }
        Command::Eval {
            run,
            data,
            rois,
            report,
            norm,
        } => {
            let stack = harness::load_stack(&run)?;
            let manifest = DatasetManifest::load(&data)?;
            let rois = rois.map(RoiPair::load).transpose()?;
            let cfg = MetricsConfig {
                mask_eps: DEFAULT_MASK_EPS,
                norm: match norm {
                    Norm::Literal => NrmseNorm::Literal,
                    Norm::GtRms => NrmseNorm::GtRms,
                },
            };
            let reports = harness::evaluate(&stack, &manifest, rois.as_ref(), &cfg)?;
            write_json(&report, &reports)?;
            for r in &reports {
                eprintln!("{}", r.split.as_str());
                eprintln!("{}", musse::metrics::format_table(&r.reports));
            }
            Ok(())
        }
        Command::Infer { run, seq, out, window } => {
            let s = harness::infer_run(&run, &seq, &out, window)?;
            print_json(&s)
        }
        Command::Metrics { strain, rois, shape } => {
            let rois = RoiPair::load(&rois)?;
            let (h, w) = match shape {
                Some(s) => s,
                None => {
                    let index = strain.parent().unwrap_or(Path::new(".")).join(harness::INFER_INDEX);
                    let text = std::fs::read_to_string(&index).map_err(|_| {
                        Error::Configuration(format!("no --shape given and {} is missing", index.display()))
                    })?;
                    let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::Json)?;
                    let dim = |k: &str| {
                        v[k].as_u64()
                            .map(|x| x as usize)
                            .ok_or_else(|| Error::Format(format!("{} lacks {k}", index.display())))
                    };
                    (dim("H")?, dim("W")?)
                }
            };
            let z = StrainMap {
                z: read_grid_blob(&strain, h, w, 1)?.remove(0),
            };
            print_json(&serde_json::json!({
                "snr_t": snr_target(&z, &rois.target)?,
                "snr_bg": snr_background(&z, &rois.background)?,
                "cnr": cnr(&z, &rois.target, &rois.background)?,
                "snr_e": snr_e(&z)?,
            }))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Divergence) => 4,
        Some(ErrorKind::Data) => 3,
        None => 3,
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            log::error!("{err:#}");
            ExitCode::from(code)
        }
    }
}
