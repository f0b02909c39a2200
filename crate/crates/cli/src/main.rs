use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use forgeseg_core::cam;
use forgeseg_core::checkpoint::Checkpoint;
use forgeseg_core::config::{load_config, parse_config_with_env, RunConfig};
use forgeseg_core::forge::{io, Split};
use forgeseg_core::metrics::{compare_runs, MetricsReport};
use forgeseg_core::pipeline::{self, SplitOptions, Stage};
use forgeseg_core::train::BranchMode;

#[derive(Parser)]
#[command(name = "forgeseg", version, about = "Forgery detection and manipulated-region segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural corpus and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-split a manifest by rank, optionally after per-group quota sampling.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_test: usize,
        #[arg(long, requires = "fake_quota")]
        real_quota: Option<usize>,
        #[arg(long, requires = "real_quota")]
        fake_quota: Option<usize>,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// joint, no-seg or no-det; single-branch modes build only that branch.
        #[arg(long)]
        branch: Option<BranchMode>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write report.json and report.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val or test (default from the config).
        #[arg(long)]
        split: Option<String>,
    },
    /// Render a Grad-CAM++ heat map and overlay for one image.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Heat-map PNG; the overlay goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side table of several evaluation reports.
    Compare {
        #[command(flatten)]
        common: Common,
        /// report.json files, at least two.
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        /// Row labels in report order; defaults to the parent directory names.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pipeline stages into one run directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of synth,train,eval,cam.
        #[arg(long, value_delimiter = ',', default_value = "synth,train,eval,cam")]
        stages: Vec<Stage>,
    },
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => parse_config_with_env("", std::env::vars())?,
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
        config.validate()?;
    }
    Ok(config)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let config = config(&common)?;
            let m = pipeline::synth(&config, &out)?;
            println!("wrote {} samples to {}", m.records.len(), out.display());
        }
        Command::Split { common, manifest, out, n_train, n_test, real_quota, fake_quota } => {
            let config = config(&common)?;
            let options = SplitOptions {
                quotas: real_quota.zip(fake_quota),
                n_train,
                n_test,
                seed: config.seed,
            };
            let m = pipeline::split(&manifest, &out, &options)?;
            println!("wrote {} records to {}", m.records.len(), out.display());
        }
        Command::Train { common, manifest, out, branch, resume } => {
            let mut config = config(&common)?;
            if let Some(b) = branch {
                config.train.branch = b;
                config.model.branches = b.branches();
            }
            config.validate()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.toml"), config.to_toml()?)?;
            let summary = pipeline::train(&config, &manifest, &out, resume.as_deref())?;
            if let Some(last) = summary.records.last() {
                println!("step {} l_total {:.6}", last.step, last.l_total);
            }
            println!("final checkpoint {}", summary.final_checkpoint.display());
        }
        Command::Eval { common, manifest, checkpoint, out, split } => {
            let mut config = config(&common)?;
            config.model = Checkpoint::load(&checkpoint)?.config;
            config.data.image_size = config.model.height();
            if let Some(s) = split {
                config.eval.split = parse_split(&s)?;
            }
            let report = pipeline::eval(&config, &manifest, &checkpoint, &out)?;
            print!("{}", report.to_text());
        }
        Command::Cam { common, checkpoint, image, out } => {
            let _ = config(&common)?;
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let img = io::load_image(&image, model.config.channels())?;
            if (img.height, img.width) != (model.config.height(), model.config.width()) {
                bail!(
                    "{} is {}x{} but the model expects {}x{}",
                    image.display(),
                    img.height,
                    img.width,
                    model.config.height(),
                    model.config.width()
                );
            }
            let map = cam::grad_cam_pp(&model, &img.to_tensor())?;
            let overlay = cam::save_cam(&map, Some(&img), &out)?;
            println!("wrote {}", out.display());
            if let Some(p) = overlay {
                println!("wrote {}", p.display());
            }
        }
        Command::Compare { common: _, reports, labels, out } => {
            let parsed = reports
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<MetricsReport>(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = if labels.is_empty() { default_labels(&reports) } else { labels };
            let table = compare_runs(&parsed, &labels)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("comparison.txt"), table.to_text())?;
            fs::write(out.join("comparison.json"), table.to_json()? + "\n")?;
            print!("{}", table.to_text());
        }
        Command::Run { common, out, stages } => {
            let config = config(&common)?;
            let outcome = pipeline::run_pipeline(&config, &stages, &out)?;
            if let Some(r) = outcome.report {
                print!("{}", r.to_text());
            }
            if let Some(c) = outcome.cam {
                println!("cam: inside > outside on {:.1}% of fake samples", 100.0 * c.inside_higher_fraction);
            }
        }
    }
    Ok(())
}

fn default_labels(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| {
            p.parent()
                .and_then(Path::parent)
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect()
}
