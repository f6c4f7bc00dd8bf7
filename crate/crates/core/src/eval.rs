//! Checkpoint inference and report writing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use crate::autodiff::Graph;
use crate::boxes::{clip, LevelValues};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{BatchOptions, Dataset, FrameCache};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_detections, write_report, Detection, EvalLevel, EvalOptions, EvalReport, EvalSet, ImageMeta};
use crate::model::Detector;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::{DType, Scalar};
use crate::train::build_model;

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const RUN_INFO_FILE: &str = "run_info.csv";

/// Rebuilds the model described by a checkpoint's embedded config and loads
/// its weights.
pub fn load_detector<T: Scalar>(path: &Path) -> Result<(RunConfig, ParamStore<T>, Detector, u64)> {
    let manifest = checkpoint::read_manifest(path)?;
    let cfg = RunConfig::parse(&manifest.config)?;
    let (mut store, det) = build_model::<T>(&cfg)?;
    let m = checkpoint::load_into(path, &mut store)?;
    Ok((cfg, store, det, m.step))
}

fn predict_chunk<T: Scalar>(
    store: &ParamStore<T>,
    det: &Detector,
    dataset: &Dataset,
    cfg: &RunConfig,
    chunks: &[&[usize]],
) -> Result<Vec<Vec<Detection>>> {
    let s = cfg.train.input_size;
    let opts = BatchOptions {
        input_size: s,
        flip: false,
        temporal_mode: cfg.model.temporal_mode,
    };
    let mut cache = FrameCache::new(dataset, s);
    let mut out = Vec::new();
    for idx in chunks {
        // Flip is off, so the generator is never drawn from.
        let batch = cache.make_batch::<T>(idx, &opts, &mut Rng::new(0, 0))?;
        let mut g = Graph::new();
        g.bind(store)?;
        let x = g.input(batch.images)?;
        let head = det.forward(&mut g, x)?;
        let levels: Vec<LevelValues<'_, T>> = head
            .iter()
            .map(|l| LevelValues {
                conf: g.value(l.conf),
                cls: g.value(l.cls),
                box_raw: g.value(l.box_raw),
                stride: l.stride,
            })
            .collect();
        let decoded = crate::boxes::decode_detections(&levels, s, s, &cfg.eval.decode)?;
        for ((&i, lb), boxes) in idx.iter().zip(&batch.letterboxes).zip(decoded) {
            let r = &dataset.records[i];
            let id = r.id();
            out.push(
                boxes
                    .into_iter()
                    .filter_map(|b| {
                        let bbox = clip(&lb.inverse(&b.bbox), r.width as f64, r.height as f64);
                        (bbox[2] > bbox[0] && bbox[3] > bbox[1]).then(|| Detection {
                            image_id: id.clone(),
                            bbox,
                            score: b.score,
                        })
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Detections for every record, in record order. Batches are dealt to up
/// to `threads` workers in contiguous runs; the result does not depend on
/// the worker count.
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    det: &Detector,
    dataset: &Dataset,
    cfg: &RunConfig,
    threads: usize,
) -> Result<Vec<Detection>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<&[usize]> = all.chunks(cfg.eval.batch_size.max(1)).collect();
    let workers = threads.clamp(1, chunks.len().max(1));
    let per = chunks.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Vec<Detection>>>> = if workers == 1 {
        vec![predict_chunk(store, det, dataset, cfg, &chunks)]
    } else {
        thread::scope(|sc| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|part| sc.spawn(move || predict_chunk(store, det, dataset, cfg, part)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
        })
    };
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?.into_iter().flatten());
    }
    Ok(out)
}

/// Pairs detections with the dataset's ground truth and video metadata.
pub fn eval_set(dataset: &Dataset, detections: Vec<Detection>) -> EvalSet {
    let mut ground_truth = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for r in &dataset.records {
        ground_truth.insert(r.id(), r.boxes.clone());
        meta.insert(
            r.id(),
            ImageMeta {
                video_id: r.video_id.clone(),
                frame_index: r.frame_index,
                is_positive: r.is_positive,
                fire_start_index: r.fire_start_index,
            },
        );
    }
    EvalSet {
        detections,
        ground_truth,
        meta,
    }
}

/// Overrides applied on top of the checkpoint's eval settings.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalRequest {
    pub level: Option<EvalLevel>,
    pub score_threshold: Option<f64>,
    pub threads: usize,
    pub svg: bool,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
    /// `(key, value)` rows of `run_info.csv`.
    pub run_info: Vec<(String, String)>,
}

/// Runs inference with a checkpoint and writes `summary.csv`, curves,
/// `detections.jsonl` and `run_info.csv` into `report_dir`.
pub fn evaluate_checkpoint(checkpoint: &Path, dataset: &Dataset, report_dir: &Path, req: &EvalRequest) -> Result<EvalOutcome> {
    let cfg = RunConfig::parse(&checkpoint::read_manifest(checkpoint)?.config)?;
    match cfg.train.dtype {
        DType::F32 => evaluate_typed::<f32>(checkpoint, dataset, report_dir, req),
        DType::F64 => evaluate_typed::<f64>(checkpoint, dataset, report_dir, req),
    }
}

fn evaluate_typed<T: Scalar>(path: &Path, dataset: &Dataset, report_dir: &Path, req: &EvalRequest) -> Result<EvalOutcome> {
    let (cfg, store, det, step) = load_detector::<T>(path)?;
    let detections = predict(&store, &det, dataset, &cfg, req.threads)?;
    let opts = EvalOptions {
        level: req.level.unwrap_or(cfg.eval.level),
        iou_thresh: cfg.eval.iou_thresh,
        score_threshold: req.score_threshold.unwrap_or(cfg.eval.score_threshold),
        ..EvalOptions::default()
    };
    let set = eval_set(dataset, detections);
    let report = evaluate(&set, &opts)?;
    write_report(report_dir, &report, req.svg)?;
    write_detections(&report_dir.join(DETECTIONS_FILE), &set.detections)?;
    let run_info = vec![
        ("sampling_mode".to_string(), cfg.sampling.mode.name().to_string()),
        ("ccpe_params".to_string(), det.embed.param_count().to_string()),
        ("total_params".to_string(), store.count("").to_string()),
        ("checkpoint_step".to_string(), step.to_string()),
        ("seed".to_string(), cfg.train.seed.to_string()),
        ("dtype".to_string(), cfg.train.dtype.name().to_string()),
        ("images".to_string(), dataset.len().to_string()),
    ];
    let mut text = String::from("key,value\n");
    for (k, v) in &run_info {
        writeln!(text, "{k},{v}").expect("string write");
    }
    let p = report_dir.join(RUN_INFO_FILE);
    fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    Ok(EvalOutcome {
        report,
        detections: set.detections,
        run_info,
    })
}

/// Parses a `run_info.csv` into ordered `(key, value)` rows.
pub fn read_run_info(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    if lines.next() != Some("key,value") {
        return Err(Error::Config(format!("{} lacks the `key,value` header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(',')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("malformed row `{l}` in {}", path.display())))
        })
        .collect()
}

/// Identifying columns of a merged report, ahead of the metric keys.
pub const REPORT_INFO_KEYS: [&str; 3] = ["sampling_mode", "ccpe_params", "total_params"];

/// One evaluated run, as read back from its report directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub run: String,
    pub info: Vec<String>,
    pub metrics: Vec<(String, f64)>,
}

pub fn read_run(dir: &Path) -> Result<RunRow> {
    let summary = dir.join("summary.csv");
    if !summary.is_file() {
        return Err(Error::Config(format!("missing summary.csv in {}", dir.display())));
    }
    let text = fs::read_to_string(&summary).map_err(|e| Error::io(format!("reading {}", summary.display()), e))?;
    let metrics = crate::metrics::parse_summary_csv(&text).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let info_path = dir.join(RUN_INFO_FILE);
    if !info_path.is_file() {
        return Err(Error::Config(format!("missing {RUN_INFO_FILE} in {}", dir.display())));
    }
    let rows = read_run_info(&info_path)?;
    let info = REPORT_INFO_KEYS
        .iter()
        .map(|k| {
            rows.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Config(format!("{} lacks `{k}`", info_path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let run = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunRow { run, info, metrics })
}

/// Reads every run before producing anything, so a bad directory yields an
/// error and no partial table.
pub fn read_runs(dirs: &[&Path]) -> Result<Vec<RunRow>> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    dirs.iter().map(|d| read_run(d)).collect()
}

/// One row per run: `run`, the info columns, then the metric keys.
pub fn comparison_csv(rows: &[RunRow]) -> String {
    let mut s = String::from("run");
    for k in REPORT_INFO_KEYS {
        write!(s, ",{k}").expect("string write");
    }
    for k in crate::metrics::SUMMARY_KEYS {
        write!(s, ",{k}").expect("string write");
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.run);
        for v in &r.info {
            write!(s, ",{v}").expect("string write");
        }
        for (_, v) in &r.metrics {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// The comparison table drawn as an SVG grid.
pub fn comparison_svg(rows: &[RunRow]) -> String {
    let header: Vec<String> = std::iter::once("run")
        .chain(REPORT_INFO_KEYS)
        .chain(crate::metrics::SUMMARY_KEYS)
        .map(String::from)
        .collect();
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![r.run.clone()];
        line.extend(r.info.iter().cloned());
        line.extend(r.metrics.iter().map(|(_, v)| format!("{v:.4}")));
        table.push(line);
    }
    let (cw, rh) = (110.0, 24.0);
    let width = cw * table[0].len() as f64 + 20.0;
    let height = rh * table.len() as f64 + 20.0;
    let mut s =
        format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#);
    s.push('\n');
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).expect("string write");
    for (i, line) in table.iter().enumerate() {
        let y = 10.0 + rh * (i as f64 + 0.7);
        let weight = if i == 0 { "bold" } else { "normal" };
        for (j, cell) in line.iter().enumerate() {
            let x = 10.0 + cw * j as f64;
            let text = cell.replace('&', "&amp;").replace('<', "&lt;");
            writeln!(s, r#"<text x="{x}" y="{y}" font-weight="{weight}">{text}</text>"#).expect("string write");
        }
    }
    s.push_str("</svg>\n");
    s
}
