//! `findnet`: generate synthetic CT data, train, evaluate, run inference and
//! verify gradients.
//!
//! Exit codes: 0 success, 1 verification or quality failure, 2 usage or
//! configuration error.

mod preview;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use findnet::config::{load_json, save_json};
use findnet::ctsim::dataset::{generate_dataset, load_split, read_manifest, DatasetConfig};
use findnet::ctsim::{CtSample, SizeClass};
use findnet::metrics::{evaluate, read_rows_csv, MetricsReport};
use findnet::model::{DataShape, FindNet};
use findnet::numerics::tape::{set_broken_adjoint, OPERATORS};
use findnet::training::{train_from_config, TrainConfig};
use findnet::{fnt, verify, Error, Tensor};

#[derive(Parser)]
#[command(
    name = "findnet",
    version,
    about = "Metal artifact reduction on synthetic CT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of corrupted / LI / ground-truth image triples.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a network; writes best/last checkpoints and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `paths.dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train without the Gaussian spectral gain.
        #[arg(long)]
        no_gaussian: bool,
        /// Plain convolutions everywhere (α = 0 in every stage).
        #[arg(long)]
        alpha_zero: bool,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a split; writes report.csv and summary.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = Predictor::Checkpoint)]
        model: Predictor,
        /// Checkpoint stem (path without `.fnt` / `.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-sample report of a baseline; adds improvement columns.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one sample directory holding Y.fnt, I.fnt and X0.fnt.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stage indices; all stages when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1.0)]
        window: f64,
        #[arg(long, default_value_t = 0.5)]
        level: f64,
    },
    /// Finite-difference check of every operator, module and a small network.
    Gradcheck {
        /// Debug aid: corrupt one operator's adjoint.
        #[arg(long = "break", value_name = "OPERATOR")]
        broken: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Predictor {
    Checkpoint,
    Li,
    Oracle,
}

/// A failure with its exit code.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_usage(&e) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Check(e.to_string())
        }
    }
}

fn is_usage(e: &Error) -> bool {
    match e {
        Error::Sample { source, .. } => is_usage(source),
        Error::Config { .. }
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Dimension(_)
        | Error::UnsupportedSize(_) => true,
        _ => false,
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate { config, out, seed } => generate(&config, &out, seed),
        Command::Train {
            config,
            out,
            data,
            seed,
            no_gaussian,
            alpha_zero,
            resume,
        } => train(
            &config,
            TrainOverrides {
                out,
                data,
                seed,
                no_gaussian,
                alpha_zero,
            },
            resume,
        ),
        Command::Eval {
            data,
            split,
            model,
            checkpoint,
            baseline,
            out,
        } => eval(
            &data,
            &split,
            model,
            checkpoint.as_deref(),
            baseline.as_deref(),
            &out,
        ),
        Command::Infer {
            checkpoint,
            input,
            out,
            stages,
            window,
            level,
        } => infer(&checkpoint, &input, &out, stages, window, level),
        Command::Gradcheck { broken } => gradcheck(broken.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn generate(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg: DatasetConfig = load_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = generate_dataset(out, &cfg)?;
    for f in &report.failures {
        eprintln!(
            "failed sample in {} (seed {}): {}",
            f.split, f.seed, f.reason
        );
    }
    for (split, n) in &report.manifest.counts {
        println!("{split}: {n} samples");
    }
    if !report.short.is_empty() {
        return Err(Failure::Check(format!(
            "splits short of their requested count: {}",
            report.short.join(", ")
        )));
    }
    Ok(())
}

struct TrainOverrides {
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    no_gaussian: bool,
    alpha_zero: bool,
}

fn train(config: &Path, o: TrainOverrides, resume: bool) -> CmdResult {
    let mut cfg: TrainConfig = load_json(config)?;
    if let Some(p) = o.out {
        cfg.paths.out = p;
    }
    if let Some(p) = o.data {
        cfg.paths.dataset = p;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if o.no_gaussian {
        cfg.model.spectral.gaussian = false;
        cfg.model.spectral.gaussian_in_lfu = false;
    }
    if o.alpha_zero {
        cfg.model.alpha_zero = true;
    }
    fs::create_dir_all(&cfg.paths.out).map_err(|e| Error::Io {
        path: cfg.paths.out.clone(),
        source: e,
    })?;
    save_json(&cfg.paths.out.join("config.json"), &cfg)?;
    let (_, outcome) = train_from_config(&cfg, resume)?;
    println!(
        "best val loss {:.6e} at epoch {} ({} epochs{})",
        outcome.best_val,
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    if outcome.rejected_steps > 0 {
        eprintln!(
            "{} steps rejected for non-finite gradients",
            outcome.rejected_steps
        );
    }
    Ok(())
}

fn data_shape(root: &Path) -> Result<DataShape, Error> {
    let manifest = read_manifest(root)?;
    Ok(DataShape {
        size: manifest.config.sample.size(),
        geometry: manifest.config.sample.geometry,
    })
}

fn eval(
    data: &Path,
    split: &str,
    model: Predictor,
    checkpoint: Option<&Path>,
    baseline: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let net = match (model, checkpoint) {
        (Predictor::Checkpoint, None) => {
            return Err(Failure::Usage(
                "--model checkpoint needs --checkpoint".into(),
            ));
        }
        (Predictor::Checkpoint, Some(stem)) => {
            let (net, _) = FindNet::load_checkpoint(stem)?;
            net.check_data(&data_shape(data)?)?;
            Some(net)
        }
        _ => None,
    };
    let samples = load_split(data, split)?;
    let base_rows = baseline.map(read_rows_csv).transpose()?;
    let report = evaluate(
        &samples,
        |s| match (model, &net) {
            (Predictor::Li, _) => Ok(s.x0.clone()),
            (Predictor::Oracle, _) => Ok(s.x_gt.clone()),
            (Predictor::Checkpoint, Some(net)) => Ok(net.infer(s)?.final_x().clone()),
            (Predictor::Checkpoint, None) => unreachable!("checked above"),
        },
        base_rows.as_deref(),
    )?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    report.write(&out.join("report.csv"), &out.join("summary.csv"))?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    println!("peak {:.6}", report.peak);
    for g in &report.summary {
        let pct = |v: Option<f64>| v.map_or(String::new(), |p| format!(" ({p:+.2}%)"));
        println!(
            "{:<8} mae {:.6}{}  ssim {:.4}{}  psnr {:.2}{}",
            g.group,
            g.mae,
            pct(g.mae_impr_pct),
            g.ssim,
            pct(g.ssim_impr_pct),
            g.psnr,
            pct(g.psnr_impr_pct)
        );
    }
}

fn infer(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    stages: Option<Vec<usize>>,
    window: f64,
    level: f64,
) -> CmdResult {
    if !(window > 0.0 && window.is_finite()) {
        return Err(Failure::Usage(format!(
            "--window must be positive, got {window}"
        )));
    }
    let (net, _) = FindNet::load_checkpoint(checkpoint)?;
    let read = |name: &str| fnt::load(&input.join(format!("{name}.fnt")));
    let (y, mask, x0) = (read("Y")?, read("I")?, read("X0")?);
    if let Some(shape) = &net.data {
        let (_, h, w) = y.chw()?;
        if h != shape.size || w != shape.size {
            return Err(Failure::Usage(format!(
                "input is {h}x{w} but the checkpoint was trained on {0}x{0}",
                shape.size
            )));
        }
    }
    let sample = CtSample {
        id: input.display().to_string(),
        y,
        x_gt: x0.clone(),
        mask,
        x0,
        size_class: SizeClass::Small,
        no_metal: false,
    };
    sample.check()?;
    let trace = net.infer(&sample)?;
    let last = trace.stages();
    let wanted = stages.unwrap_or_else(|| (0..=last).collect());
    if let Some(&bad) = wanted.iter().find(|&&s| s > last) {
        return Err(Failure::Usage(format!(
            "stage {bad} requested but the model has {last} stages"
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let write = |name: String, t: &Tensor| -> Result<(), Error> {
        fnt::save(&out.join(format!("{name}.fnt")), t)?;
        preview::write_pgm(&out.join(format!("{name}.pgm")), t, window, level)
    };
    for s in wanted {
        write(format!("X{s}"), &trace.x[s])?;
        // no artifact estimate exists before the first stage
        if s > 0 {
            write(format!("A{s}"), &trace.a[s - 1])?;
        }
    }
    Ok(())
}

fn gradcheck(broken: Option<&str>) -> CmdResult {
    if let Some(name) = broken {
        let op = OPERATORS
            .iter()
            .copied()
            .find(|o| *o == name)
            .ok_or_else(|| {
                Failure::Usage(format!(
                    "--break: unknown operator `{name}` (one of {})",
                    OPERATORS.join(", ")
                ))
            })?;
        set_broken_adjoint(Some(op));
    }
    let rows = verify::run_all()?;
    println!("{:<24} {:>14}  result", "check", "max rel error");
    for r in &rows {
        println!(
            "{:<24} {:>14.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            verify::TOLERANCE
        )))
    }
}
