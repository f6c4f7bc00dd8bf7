//! `smokedet`: synthetic data, training, evaluation, gradient checks and
//! cross-run reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use smokedet::autodiff::Fault;
use smokedet::config::RunConfig;
use smokedet::data::{generate_synthetic_dataset, load_jsonl_dataset, SceneSpec};
use smokedet::eval::{comparison_csv, comparison_svg, evaluate_checkpoint, read_runs, EvalRequest};
use smokedet::gradsuite::{run_suite, SuiteOptions};
use smokedet::metrics::EvalLevel;
use smokedet::train::{train, Start};

const THREADS_ENV: &str = "CCPE_THREADS";

#[derive(Parser)]
#[command(name = "smokedet", version, about = "Wildfire smoke detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic smoke dataset.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, value_parser = parse_fraction)]
        positive_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train a detector.
    Train {
        /// Flat `key = value` config; desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint, using its stored config.
        #[arg(long, conflicts_with_all = ["config", "set"])]
        resume: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint and write a report directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        level: Option<LevelArg>,
        /// Score threshold for classification metrics and time to detection.
        #[arg(long, value_parser = parse_fraction)]
        threshold: Option<f64>,
        /// Also write SVG curves.
        #[arg(long)]
        svg: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Merge report directories into one comparison table.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Bbox,
    Image,
    Video,
    All,
}

impl From<LevelArg> for EvalLevel {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Bbox => EvalLevel::Bbox,
            LevelArg::Image => EvalLevel::Image,
            LevelArg::Video => EvalLevel::Video,
            LevelArg::All => EvalLevel::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ConvBackward,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

/// Bad flags, config files or environment: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides).map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_gendata(out: &Path, num: usize, fraction: f64, seed: u64, size: usize) -> Result<()> {
    if num == 0 {
        return Err(usage("--num must be at least 1"));
    }
    let spec = SceneSpec {
        image_size: size,
        seed,
        ..SceneSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let g = generate_synthetic_dataset(&spec, num, fraction, out)?;
    println!("records {} positives {}", g.records, g.positives);
    println!("annotations {}", g.annotations.display());
    println!("digest {}", g.digest);
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: Option<&Path>, out: Option<&Path>, resume: Option<&Path>, set: &[String]) -> Result<()> {
    let (start, data_dir, out_dir) = match resume {
        Some(ckpt) => {
            let manifest = smokedet::checkpoint::read_manifest(ckpt)?;
            let cfg = RunConfig::parse(&manifest.config)?;
            let data = data.map(Path::to_path_buf).or(cfg.data_dir.clone());
            let out = out.map(Path::to_path_buf).or(cfg.out_dir.clone());
            (Start::Resume(ckpt), data, out)
        }
        None => {
            let mut cfg = load_config(config, set)?;
            if let Some(d) = data {
                cfg.data_dir = Some(d.to_path_buf());
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o.to_path_buf());
            }
            let (d, o) = (cfg.data_dir.clone(), cfg.out_dir.clone());
            (Start::Fresh(cfg), d, o)
        }
    };
    let data_dir = data_dir.ok_or_else(|| usage("no dataset: pass --data or set data_dir"))?;
    let out_dir = out_dir.ok_or_else(|| usage("no output directory: pass --out or set out_dir"))?;
    let dataset = load_jsonl_dataset(&data_dir)?;
    let summary = train(start, &dataset, &out_dir, &mut |r| {
        if r.step == 1 || r.step % 10 == 0 {
            eprintln!(
                "step {:>5}  total {:.5}  conf {:.5}  cls {:.5}  box {:.5}  P {}  neg1 {}  neg2 {}",
                r.step, r.total, r.conf, r.cls, r.bbox, r.p_batch, r.neg1, r.neg2
            );
        }
    })?;
    if let (Some(first), Some(last)) = (summary.log.first(), summary.log.last()) {
        println!("steps {} loss {} -> {}", summary.total_steps, first.total, last.total);
    }
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, report: &Path, level: Option<LevelArg>, threshold: Option<f64>, svg: bool) -> Result<()> {
    let dataset = load_jsonl_dataset(data)?;
    let req = EvalRequest {
        level: level.map(Into::into),
        score_threshold: threshold,
        threads: threads()?,
        svg,
    };
    let out = evaluate_checkpoint(checkpoint, &dataset, report, &req)?;
    for (k, v) in out.report.values() {
        println!("{k:<15} {v}");
    }
    println!("detections {}", out.detections.len());
    Ok(())
}

fn cmd_gradcheck(seed: u64, tolerance: f64, fault: Option<FaultArg>) -> Result<()> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(usage("--tolerance must be positive"));
    }
    let opts = SuiteOptions {
        seed,
        tolerance,
        fault: match fault {
            Some(FaultArg::ConvBackward) => Fault::ConvBackward,
            None => Fault::None,
        },
    };
    let results = run_suite(&opts)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.report.passed { "PASS" } else { "FAIL" };
        println!(
            "{:<24} max_rel_err {:.3e}  coords {:>4}  {verdict}",
            r.target, r.report.max_rel_err, r.report.checked
        );
        if !r.report.passed {
            failed.push(r.target);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed at tolerance {tolerance:e} for: {}", failed.join(", "));
    }
    println!("all {} targets within {tolerance:e}", results.len());
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], format: Format, out: Option<&Path>) -> Result<()> {
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    let rows = read_runs(&refs)?;
    let text = match format {
        Format::Csv => comparison_csv(&rows),
        Format::Svg => comparison_svg(&rows),
    };
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata {
            out,
            num,
            positive_fraction,
            seed,
            size,
        } => cmd_gendata(&out, num, positive_fraction, seed, size),
        Command::Train {
            config,
            data,
            out,
            resume,
            set,
        } => cmd_train(config.as_deref(), data.as_deref(), out.as_deref(), resume.as_deref(), &set),
        Command::Eval {
            checkpoint,
            data,
            report,
            level,
            threshold,
            svg,
        } => cmd_eval(&checkpoint, &data, &report, level, threshold, svg),
        Command::Gradcheck {
            seed,
            tolerance,
            inject_fault,
        } => cmd_gradcheck(seed, tolerance, inject_fault),
        Command::Report { dirs, format, out } => cmd_report(&dirs, format, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
