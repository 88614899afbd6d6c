use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevalign::config::{twin_manifest, RunConfig};
use bevalign::data::{generate_all, load_dataset, read_sample, Manifest};
use bevalign::gradsuite::{run_suite, SuiteConfig};
use bevalign::heatmap::image_heatmap;
use bevalign::pipeline::{run_pretrain, stored_run_config};
use bevalign::prompt::{PromptContext, PromptStrategy};
use bevalign::tensor::OpKind;
use bevalign::training::{linear_probe, Checkpoint};
use bevalign::{Error, Exec};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Self-supervised BEV pre-training on synthetic camera + LiDAR data.
///
/// Exit codes: 0 success, 1 verification failure, 2 usage or
/// configuration error, 3 non-finite loss.
#[derive(Parser)]
#[command(name = "bevalign", version)]
struct Cli {
    /// Run every data-parallel map on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every dataset of a manifest into a directory.
    GenData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train from a run configuration (JSON; see `print-config`).
    ///
    /// Writes checkpoint.bvck, metrics.csv and summary.json into
    /// `paths.out_dir`.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the training and initialization seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Train with plain LayerNorm and no prompt or adapter groups.
        #[arg(long)]
        no_prompt: bool,
        /// Overrides `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear occupancy probe on a frozen checkpoint; prints a JSON report.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Dataset whose frames are probed.
        #[arg(long)]
        dataset: u32,
        /// Dataset whose prompt the `wrong` strategy installs; defaults to
        /// the first other registered dataset.
        #[arg(long)]
        prompt_from: Option<u32>,
        /// Generated data directory; defaults to the one the checkpoint
        /// was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seeds the frame split, the head init and the random prompt.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the image-branch BEV heatmap of one sample as PGM + CSV.
    InspectBev {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A generated `.bvs` frame.
        #[arg(long)]
        sample: PathBuf,
        /// Dataset id whose prompt to use, or `none`.
        #[arg(long)]
        prompt: String,
        /// PGM path; the CSV goes next to it with a `.csv` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration.
    PrintConfig,
    /// Print the standard two-dataset manifest.
    PrintManifest {
        /// Frames per dataset.
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Opposite capture-rig yaw of the two datasets, radians.
        #[arg(long, default_value_t = 0.3)]
        bias: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Correspond,
    Wrong,
    Random,
    None,
}

enum Failure {
    Usage(String),
    Verification(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

/// Prefixes file errors with the offending path.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| match e {
        Error::Io(_) | Error::Format(_) => Failure::Usage(format!("{}: {e}", path.display())),
        e => e.into(),
    }
}

fn print_json(v: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json value serializes")
    );
}

fn gen_data(manifest: &Path, out: &Path, exec: Exec) -> Result<(), Failure> {
    let m = Manifest::load(manifest).map_err(at(manifest))?;
    let counts = generate_all(&m, out, exec)?;
    let datasets: Vec<_> = counts
        .iter()
        .map(|(id, n)| json!({"dataset_id": id, "frames": n}))
        .collect();
    print_json(&json!({"out": out, "datasets": datasets}));
    Ok(())
}

fn pretrain_cmd(
    config: &Path,
    seed: Option<u64>,
    no_prompt: bool,
    out: Option<PathBuf>,
    exec: Exec,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    if no_prompt {
        cfg.model.prompt.enabled = false;
    }
    if let Some(o) = out {
        cfg.paths.out_dir = o;
    }
    cfg.exec = exec;
    let summary = run_pretrain(&cfg)?;
    print_json(&serde_json::to_value(&summary).map_err(Error::from)?);
    Ok(())
}

fn probe_cmd(
    checkpoint: &Path,
    strategy: Strategy,
    dataset: u32,
    prompt_from: Option<u32>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    exec: Exec,
) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint).map_err(at(checkpoint))?;
    let cfg = stored_run_config(&ck)?;
    let model = ck.model()?;
    let mut probe = cfg.probe.clone();
    if let Some(s) = seed {
        probe.seed = s;
    }
    let strategy = match strategy {
        Strategy::Correspond => PromptStrategy::Correspond(dataset),
        Strategy::Wrong => {
            let other = match prompt_from {
                Some(id) => id,
                None => *model
                    .registry
                    .dataset_ids()
                    .iter()
                    .find(|&&id| id != dataset)
                    .ok_or_else(|| {
                        Failure::Usage("no other dataset prompt to use as the wrong one".into())
                    })?,
            };
            PromptStrategy::Wrong(other)
        }
        Strategy::Random => PromptStrategy::Random(probe.seed),
        Strategy::None => PromptStrategy::None,
    };
    let root = data.unwrap_or(cfg.paths.data_dir.clone());
    let mpath = root.join("manifest.json");
    let manifest = Manifest::load(&mpath).map_err(at(&mpath))?;
    let desc = manifest.dataset(dataset)?;
    let samples = load_dataset(&root, desc, exec)?;
    let report = linear_probe(&model, &samples, dataset, strategy, &probe, exec)?;
    print_json(&serde_json::to_value(&report).map_err(Error::from)?);
    Ok(())
}

fn gradcheck_cmd(seeds: u64, fault: Option<String>, exec: Exec) -> Result<(), Failure> {
    let fault = match fault {
        Some(name) => Some(
            name.parse::<OpKind>()
                .map_err(|e| Failure::Usage(e.to_string()))?,
        ),
        None => None,
    };
    let cfg = SuiteConfig {
        seeds,
        fault,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg, exec)?;
    print_json(&serde_json::to_value(&report).map_err(Error::from)?);
    let worst = report.worst_offender();
    if let Some(w) = worst {
        eprintln!(
            "worst offender: {} ({:.3e}, tolerance {:.0e})",
            w.name, w.max_error, w.tolerance
        );
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(Failure::Verification(format!(
            "gradient check failed in {}; first suspect: {}",
            names.join(", "),
            worst.map(|w| w.name.as_str()).unwrap_or("?")
        )))
    }
}

fn inspect_bev(checkpoint: &Path, sample: &Path, prompt: &str, out: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint).map_err(at(checkpoint))?;
    let model = ck.model()?;
    let sample = read_sample(sample).map_err(at(sample))?;
    let ctx = if prompt == "none" {
        PromptContext::Disabled
    } else {
        let id: u32 = prompt.parse().map_err(|_| {
            Failure::Usage(format!(
                "--prompt expects a dataset id or `none`, got `{prompt}`"
            ))
        })?;
        model.registry.prompt(id)?;
        PromptContext::Dataset(id)
    };
    let (model, ctx) = match ctx {
        PromptContext::Disabled => (model.plain_twin(), ctx),
        _ => (model, ctx),
    };
    let heat = image_heatmap(&model, &sample, ctx)?;
    let csv = out.with_extension("csv");
    heat.write(out, &csv)?;
    print_json(&json!({
        "pgm": out,
        "csv": csv,
        "resolution": heat.resolution,
        "max": heat.max(),
    }));
    Ok(())
}

fn print_manifest(frames: usize, bias: f64, seed: u64) -> Result<(), Failure> {
    let m = twin_manifest(frames, bias, seed);
    m.validate()?;
    print_json(&serde_json::to_value(&m).map_err(Error::from)?);
    Ok(())
}

fn parse_cli() -> Cli {
    let defaults = format!(
        "Defaults (any key may be omitted):\n{}",
        RunConfig::default().to_json()
    );
    let cmd = Cli::command().mut_subcommand("pretrain", |c| c.after_long_help(defaults));
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse_cli();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let result = match cli.command {
        Command::GenData { manifest, out } => gen_data(&manifest, &out, exec),
        Command::Pretrain {
            config,
            seed,
            no_prompt,
            out,
        } => pretrain_cmd(&config, seed, no_prompt, out, exec),
        Command::Probe {
            checkpoint,
            strategy,
            dataset,
            prompt_from,
            data,
            seed,
        } => probe_cmd(
            &checkpoint,
            strategy,
            dataset,
            prompt_from,
            data,
            seed,
            exec,
        ),
        Command::Gradcheck {
            seeds,
            inject_fault,
        } => gradcheck_cmd(seeds, inject_fault, exec),
        Command::InspectBev {
            checkpoint,
            sample,
            prompt,
            out,
        } => inspect_bev(&checkpoint, &sample, &prompt, &out),
        Command::PrintConfig => {
            println!("{}", RunConfig::default().to_json());
            Ok(())
        }
        Command::PrintManifest { frames, bias, seed } => print_manifest(frames, bias, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
