//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria 7 to 9 drive the `smokedet` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use smokedet::ccpe::{vanilla_patch_embed_params, Ccpe, ContrastConfig};
use smokedet::gradsuite::{run_suite, SuiteOptions};
use smokedet::metrics::{ap_at_iou, mann_whitney_auc, roc_pr_curves, trapezoid_area, SUMMARY_KEYS};
use smokedet::sampling::{build_masks, SamplingConfig, SamplingMode};
use smokedet::train::{read_train_log, TRAIN_LOG_FILE};
use smokedet::{Graph64, ParamStore64, Rng, Tensor64};

#[path = "../../core/tests/common/mod.rs"]
mod common;

use common::ccpe_oracle::{self, small_cfg};
use common::metrics_oracle::{ap_oracle, pairwise_auc, random_instance, tied_scores};
use common::snsm_oracle::{check_ohem, check_snsm, image_flags, random_batch};

/// Accepted range for CCPE minus vanilla patch-embed parameters.
const PARAM_DELTA_RANGE: (usize, usize) = (48_000, 58_000);
const CCPE_ORACLE_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const AUC_TOL: f64 = 1e-9;
const AP_TOL: f64 = 1e-12;
/// Final over initial total loss must fall below this.
const OVERFIT_RATIO: f64 = 0.1;
const OVERFIT_IMAGES: usize = 16;
const OVERFIT_STEPS: usize = 300;
const ABLATION_IMAGES: usize = 200;
const ABLATION_STEPS: usize = 100;
const SEED: u64 = 8;
const MODES: [&str; 4] = ["none", "random", "ohem", "snsm"];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_smokedet"));
    c.env_remove("CCPE_THREADS");
    c
}

fn cli(args: &[&str]) -> Result<String> {
    let out = bin().args(args).output().context("spawning smokedet")?;
    if !out.status.success() {
        bail!(
            "smokedet {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        );
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn param_delta() -> Result<String> {
    let mut store = ParamStore64::new();
    let m = Ccpe::new(&mut store, ContrastConfig::default(), (640, 640), &mut Rng::new(0, 0))?;
    let counted: usize = store.iter().map(|p| p.value.len()).sum();
    ensure!(
        counted == m.param_count(),
        "analytic count {} disagrees with allocated {counted}",
        m.param_count()
    );
    // 4×4 conv from 3 to 96 channels with bias, then a 96-wide layer norm
    let vanilla = 4 * 4 * 3 * 96 + 96 + 2 * 96;
    ensure!(vanilla == vanilla_patch_embed_params(3, 96, 4), "vanilla count mismatch");
    let delta = counted - vanilla;
    let (lo, hi) = PARAM_DELTA_RANGE;
    ensure!((lo..=hi).contains(&delta), "delta {delta} outside [{lo}, {hi}]");
    Ok(format!("ccpe {counted} - vanilla {vanilla} = {delta}"))
}

fn ccpe_oracle() -> Result<String> {
    let mut rng = Rng::new(100, 0);
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let b = 1 + (trial as usize % 2);
        let side = [16, 24, 32][trial as usize % 3];
        let cfg = small_cfg(&ContrastConfig::fitted_strides(side), 3);
        let (store, m) = ccpe_oracle::build(cfg.clone(), side, trial);
        let img = Tensor64::randn(&[b, side, side, 3], &mut rng);
        let mut g = Graph64::new();
        g.bind(&store)?;
        let x = g.input(img.clone())?;
        let y = m.forward(&mut g, x)?;
        let expect = ccpe_oracle::embed(&store, &cfg, &img);
        let diff = g.value(y).data().iter().zip(&expect).fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
        worst = worst.max(diff);
    }
    ensure!(worst <= CCPE_ORACLE_TOL, "max abs diff {worst:e}");
    Ok(format!("10 inputs, max abs diff {worst:.1e}"))
}

fn gradient_suite() -> Result<String> {
    let results = run_suite(&SuiteOptions {
        tolerance: GRAD_TOL,
        ..SuiteOptions::default()
    })?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.report.passed).map(|r| r.target).collect();
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    ensure!(failed.is_empty(), "failed: {}", failed.join(", "));
    Ok(format!("{} targets, max rel err {worst:.1e}", results.len()))
}

fn snsm_invariants() -> Result<String> {
    let mut rng = Rng::new(2024, 0);
    let snsm = SamplingConfig {
        alpha1: 3.0,
        alpha2: 5.0,
        ..SamplingConfig::default()
    };
    let ohem = SamplingConfig {
        mode: SamplingMode::Ohem,
        baseline_ratio: 7.0,
        ..SamplingConfig::default()
    };
    for trial in 0..100 {
        let (a, scores) = random_batch(&mut rng);
        let f = image_flags(&a);
        let m = build_masks(&a, &f, &scores, &snsm, &mut Rng::new(trial, 1))?;
        m.check()?;
        check_snsm(&a, &scores, &snsm, &m)
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("batch {trial}"))?;
        ensure!(
            build_masks(&a, &f, &scores, &snsm, &mut Rng::new(trial, 1))? == m,
            "batch {trial}: not deterministic"
        );
        let o = build_masks(&a, &f, &scores, &ohem, &mut Rng::new(trial, 1))?;
        check_ohem(&a, &scores, &ohem, &o)
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("batch {trial}"))?;
    }
    Ok("100 batches".into())
}

fn auc_duality() -> Result<String> {
    let mut rng = Rng::new(11, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let np = 1 + rng.below(1000);
        let nn = 1 + rng.below(1000);
        let levels = 2 + rng.below(50);
        let pos = tied_scores(&mut rng, np, levels);
        let neg = tied_scores(&mut rng, nn, levels);
        let ranked = mann_whitney_auc(&pos, &neg)?;
        let trap = trapezoid_area(&roc_pr_curves(&pos, &neg)?.roc);
        worst = worst.max((ranked - pairwise_auc(&pos, &neg)).abs()).max((ranked - trap).abs());
    }
    ensure!(worst <= AUC_TOL, "max diff {worst:e}");
    Ok(format!("200 sets, max diff {worst:.1e}"))
}

fn ap_exhaustive() -> Result<String> {
    let mut rng = Rng::new(5, 0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let set = random_instance(&mut rng, if trial % 2 == 0 { 1_000_000 } else { 3 });
        let (ap, _) = ap_at_iou(&set, 0.1);
        let (canon, lo, hi) = ap_oracle(&set, 0.1);
        worst = worst.max((ap - canon).abs());
        ensure!(
            ap >= lo - AP_TOL && ap <= hi + AP_TOL,
            "instance {trial}: {ap} outside tie range [{lo}, {hi}]"
        );
    }
    ensure!(worst <= AP_TOL, "max diff {worst:e}");
    Ok(format!("100 instances, max diff {worst:.1e}"))
}

fn summary_value(report: &Path, key: &str) -> Result<f64> {
    let text = fs::read_to_string(report.join("summary.csv"))?;
    let v = text
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .with_context(|| format!("{key} missing from summary"))?;
    Ok(v.parse()?)
}

struct Overfit {
    report: PathBuf,
    initial: f64,
    last: f64,
    image_auc: f64,
}

/// Trains and evaluates the 16-image overfit run under `root`.
fn overfit_run(root: &Path) -> Result<Overfit> {
    let data = root.join("data");
    cli(&[
        "gendata",
        "--out",
        p(&data),
        "--num",
        &OVERFIT_IMAGES.to_string(),
        "--positive-fraction",
        "0.5",
        "--seed",
        &SEED.to_string(),
    ])?;
    let run = root.join("run");
    let steps = format!("steps={OVERFIT_STEPS}");
    let seed = format!("seed={SEED}");
    cli(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--set",
        "sampling_mode=snsm",
        "--set",
        &steps,
        "--set",
        &seed,
    ])?;
    let log = read_train_log(&run.join(TRAIN_LOG_FILE))?;
    let (first, last) = (log.first().context("empty log")?, log.last().context("empty log")?);
    ensure!(last.step == OVERFIT_STEPS, "log ends at step {}", last.step);
    let report = root.join("report");
    cli(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint")),
        "--data",
        p(&data),
        "--report",
        p(&report),
    ])?;
    Ok(Overfit {
        image_auc: summary_value(&report, "image_auc")?,
        report,
        initial: first.total,
        last: last.total,
    })
}

fn check_overfit(o: &Overfit) -> Result<String> {
    let ratio = o.last / o.initial;
    let detail = format!(
        "loss {:.4} -> {:.4} (ratio {ratio:.4}), image AUC {}",
        o.initial, o.last, o.image_auc
    );
    ensure!(ratio < OVERFIT_RATIO && o.image_auc == 1.0, "{detail}");
    Ok(detail)
}

/// Trains, evaluates and merges the four sampling modes under `root`;
/// returns the report directories and the merged CSV table.
fn ablation_run(root: &Path) -> Result<(Vec<PathBuf>, String)> {
    let data = root.join("data");
    cli(&[
        "gendata",
        "--out",
        p(&data),
        "--num",
        &ABLATION_IMAGES.to_string(),
        "--positive-fraction",
        "0.5",
        "--seed",
        &SEED.to_string(),
    ])?;
    let mut reports = Vec::new();
    for mode in MODES {
        let run = root.join(format!("run_{mode}"));
        let sampling = format!("sampling_mode={mode}");
        let steps = format!("steps={ABLATION_STEPS}");
        let seed = format!("seed={SEED}");
        cli(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&run),
            "--set",
            &sampling,
            "--set",
            &steps,
            "--set",
            &seed,
        ])?;
        let report = root.join(format!("report_{mode}"));
        cli(&[
            "eval",
            "--checkpoint",
            p(&run.join("checkpoint")),
            "--data",
            p(&data),
            "--report",
            p(&report),
        ])?;
        reports.push(report);
    }
    let table = root.join("ablation.csv");
    let mut args = vec!["report", "--out", p(&table), "--in"];
    args.extend(reports.iter().map(|r| p(r)));
    cli(&args)?;
    Ok((reports, fs::read_to_string(&table)?))
}

fn check_table(text: &str) -> Result<String> {
    println!(
        "{}",
        text.trim_end().lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
    );
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.len() == 1 + MODES.len(), "{} table lines", lines.len());
    let header: Vec<&str> = lines[0].split(',').collect();
    ensure!(
        header.len() == 4 + SUMMARY_KEYS.len() && header[4..] == SUMMARY_KEYS,
        "unexpected columns"
    );
    let mut missing = Vec::new();
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        ensure!(cells.len() == header.len(), "ragged row `{line}`");
        for (h, c) in header.iter().zip(&cells) {
            if c.is_empty() || c.eq_ignore_ascii_case("nan") {
                missing.push(format!("{}:{h}", cells[1]));
            }
        }
    }
    ensure!(missing.is_empty(), "missing cells {}", missing.join(" "));
    Ok(format!("{}x{} table complete", MODES.len(), SUMMARY_KEYS.len()))
}

fn summaries(dirs: &[PathBuf]) -> Result<Vec<Vec<u8>>> {
    dirs.iter()
        .map(|d| fs::read(d.join("summary.csv")).with_context(|| format!("reading {}", d.display())))
        .collect()
}

fn report(n: usize, name: &str, started: Instant, r: &Result<String>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match r {
        Ok(detail) => println!("[PASS] {n}. {name}: {detail} ({secs:.1}s)"),
        Err(e) => println!("[FAIL] {n}. {name}: {e:#} ({secs:.1}s)"),
    }
    r.is_ok()
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut passed = Vec::new();
    let mut time = |n: usize, name: &str, f: &mut dyn FnMut() -> Result<String>| {
        let t = Instant::now();
        let r = f();
        passed.push(report(n, name, t, &r));
    };

    time(1, "CCPE parameter delta", &mut param_delta);
    time(2, "CCPE loop oracle", &mut ccpe_oracle);
    time(3, "gradient suite", &mut gradient_suite);
    time(4, "SNSM invariants", &mut snsm_invariants);
    time(5, "AUC duality", &mut auc_duality);
    time(6, "AP exhaustive oracle", &mut ap_exhaustive);

    let mut first = Vec::new();
    time(7, "overfit smoke test", &mut || {
        let o = overfit_run(&root.join("overfit_a"))?;
        first.push(o.report.clone());
        check_overfit(&o)
    });
    time(8, "sampling ablation table", &mut || {
        let (dirs, table) = ablation_run(&root.join("ablation_a"))?;
        first.extend(dirs);
        check_table(&table)
    });
    time(9, "determinism", &mut || {
        ensure!(first.len() == 1 + MODES.len(), "criteria 7 and 8 did not both produce reports");
        let mut second = vec![overfit_run(&root.join("overfit_b"))?.report];
        second.extend(ablation_run(&root.join("ablation_b"))?.0);
        ensure!(summaries(&first)? == summaries(&second)?, "summary.csv bytes differ between runs");
        Ok(format!("{} summary.csv files byte-identical", first.len()))
    });

    let ok = passed.iter().filter(|&&b| b).count();
    println!("{ok}/{} criteria passed", passed.len());
    if ok == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
