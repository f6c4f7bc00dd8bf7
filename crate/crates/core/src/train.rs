//! SGD training loop with resume-exact randomness.
//!
//! Every random draw of step `k` comes from a stream derived from
//! `(seed, k)`, so a run resumed from a checkpoint after `k` steps repeats
//! the uninterrupted run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::assign::{assign_positives, CellLayout};
use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{BatchOptions, Dataset, FrameCache};
use crate::error::{Error, Result};
use crate::loss::{compute_losses, flatten_conf};
use crate::model::Detector;
use crate::param::{ParamStore, SgdConfig};
use crate::rng::Rng;
use crate::sampling::build_masks;
use crate::scalar::{DType, Scalar};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG_HEADER: &str = "step,total,conf,cls,box,p_batch,neg1,neg2";

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_FLIP: u64 = 3;
const STREAM_SAMPLING: u64 = 4;

/// Losses and mask sizes of one optimizer step (1-based `step`).
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub conf: f64,
    pub cls: f64,
    pub bbox: f64,
    pub p_batch: usize,
    pub neg1: usize,
    pub neg2: usize,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.total, self.conf, self.cls, self.bbox, self.p_batch, self.neg1, self.neg2
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed train log row `{line}`"));
        if f.len() != 8 {
            return Err(bad());
        }
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let x = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(StepLog {
            step: u(f[0])?,
            total: x(f[1])?,
            conf: x(f[2])?,
            cls: x(f[3])?,
            bbox: x(f[4])?,
            p_batch: u(f[5])?,
            neg1: u(f[6])?,
            neg2: u(f[7])?,
        })
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRAIN_LOG_HEADER) {
        return Err(Error::Config(format!(
            "{} does not start with `{TRAIN_LOG_HEADER}`",
            path.display()
        )));
    }
    lines.filter(|l| !l.trim().is_empty()).map(StepLog::parse_row).collect()
}

/// Record indices of 0-based step `step`: the sample stream walks a fresh
/// permutation of the dataset each epoch.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let order = Rng::new(seed, STREAM_ORDER);
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let pos = step * batch + k;
            let epoch = pos / n;
            if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                order.child(epoch as u64).shuffle(&mut perm);
                epoch_cache = Some((epoch, perm));
            }
            epoch_cache.as_ref().expect("filled above").1[pos % n]
        })
        .collect()
}

/// Builds the detector with its seed-derived initialization.
pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<(ParamStore<T>, Detector)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.train.seed, STREAM_INIT);
    let det = Detector::new(&mut store, &cfg.model, cfg.train.input_size, &mut rng)?;
    Ok((store, det))
}

/// Model, optimizer state and step counter.
pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub model: Detector,
    /// Steps completed.
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (store, model) = build_model(&cfg)?;
        Ok(Trainer {
            cfg,
            store,
            model,
            step: 0,
        })
    }

    /// Restores parameters, momentum and step count; the configuration is
    /// taken from the checkpoint.
    pub fn resume(path: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(path)?;
        let cfg = RunConfig::parse(&manifest.config)?;
        let mut t = Trainer::new(cfg)?;
        let m = checkpoint::load_into(path, &mut t.store)?;
        t.step = m.step as usize;
        Ok(t)
    }

    /// `ceil(epochs · n / batch)` when epochs are set, otherwise `steps`.
    pub fn total_steps(&self, n: usize) -> usize {
        let t = &self.cfg.train;
        if t.epochs > 0 {
            (t.epochs * n).div_ceil(t.batch_size)
        } else {
            t.steps
        }
    }

    pub fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            input_size: self.cfg.train.input_size,
            flip: self.cfg.train.flip,
            temporal_mode: self.cfg.model.temporal_mode,
        }
    }

    /// One forward/backward/update. Aborts without touching parameters if
    /// the loss or any gradient is non-finite.
    pub fn train_step(&mut self, cache: &mut FrameCache<'_>) -> Result<StepLog> {
        let n = cache.dataset.len();
        if n == 0 {
            return Err(Error::invalid("train_step", "dataset is empty"));
        }
        let k = self.step;
        let seed = self.cfg.train.seed;
        let idx = batch_indices(n, self.cfg.train.batch_size, seed, k);
        let opts = self.batch_options();
        let batch = cache.make_batch::<T>(&idx, &opts, &mut Rng::new(seed, STREAM_FLIP).child(k as u64))?;
        let s = opts.input_size;
        let layout = CellLayout::for_input(s, s, &self.model.cfg.strides);
        let assign = assign_positives(&batch.gts, &layout, s, s)?;

        let mut g = Graph::new();
        g.bind(&self.store)?;
        let x = g.input(batch.images)?;
        let head = self.model.forward(&mut g, x)?;
        let scores = flatten_conf(&g, &head)?;
        let masks = build_masks(
            &assign,
            &batch.positive,
            &scores,
            &self.cfg.sampling,
            &mut Rng::new(seed, STREAM_SAMPLING).child(k as u64),
        )?;
        let terms = compute_losses(&mut g, &head, &assign, &masks, self.cfg.train.box_weight)?;
        let total = g.value(terms.total).data()[0].to_f64c();
        let step = k + 1;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let grads = g.backward(terms.total)?;
        self.store.accumulate_grads(&g, &grads);
        if self.cfg.train.grad_clip > 0.0 {
            self.store.clip_grad_norm(self.cfg.train.grad_clip);
        }
        let sgd = SgdConfig {
            lr: self.cfg.train.lr_at(k, self.total_steps(n)),
            ..self.cfg.train.sgd
        };
        self.store.sgd_step(&sgd).map_err(|e| match e {
            Error::NonFiniteGradient(p) => Error::NonFinite(format!("gradient of `{p}` at step {step}")),
            other => other,
        })?;
        self.step = step;
        Ok(StepLog {
            step,
            total,
            conf: terms.conf,
            cls: terms.cls,
            bbox: terms.bbox,
            p_batch: masks.num_pos(),
            neg1: masks.num_neg1(),
            neg2: masks.num_neg2(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        checkpoint::save(dir, &self.store, self.step as u64, &self.cfg.to_text())
    }
}

/// What a finished run left on disk.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<StepLog>,
    pub total_steps: usize,
}

/// Where a run starts from.
#[allow(clippy::large_enum_variant)]
pub enum Start<'a> {
    Fresh(RunConfig),
    Resume(&'a Path),
}

/// Trains to completion, writing `config.txt`, `train_log.csv` and
/// `checkpoint/` under `out_dir`. On resume, log rows past the checkpoint
/// step are dropped before appending. `on_step` sees every new row.
pub fn train(start: Start<'_>, dataset: &Dataset, out_dir: &Path, on_step: &mut dyn FnMut(&StepLog)) -> Result<TrainSummary> {
    let dtype = match &start {
        Start::Fresh(cfg) => cfg.train.dtype,
        Start::Resume(p) => RunConfig::parse(&checkpoint::read_manifest(p)?.config)?.train.dtype,
    };
    match dtype {
        DType::F32 => train_typed::<f32>(start, dataset, out_dir, on_step),
        DType::F64 => train_typed::<f64>(start, dataset, out_dir, on_step),
    }
}

fn train_typed<T: Scalar>(start: Start<'_>, dataset: &Dataset, out_dir: &Path, on_step: &mut dyn FnMut(&StepLog)) -> Result<TrainSummary> {
    let mut trainer = match start {
        Start::Fresh(cfg) => Trainer::<T>::new(cfg)?,
        Start::Resume(p) => Trainer::<T>::resume(p)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let write = |path: &Path, text: &str| fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e));
    write(&out_dir.join(CONFIG_FILE), &trainer.cfg.to_text())?;

    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log: Vec<StepLog> = if trainer.step > 0 && log_path.exists() {
        read_train_log(&log_path)?.into_iter().filter(|r| r.step <= trainer.step).collect()
    } else {
        Vec::new()
    };
    let render = |log: &[StepLog]| {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in log {
            writeln!(s, "{}", r.csv_row()).expect("string write");
        }
        s
    };

    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let total_steps = trainer.total_steps(dataset.len());
    let every = trainer.cfg.train.checkpoint_every;
    let mut cache = FrameCache::new(dataset, trainer.cfg.train.input_size);
    while trainer.step < total_steps {
        let row = match trainer.train_step(&mut cache) {
            Ok(r) => r,
            Err(e) => {
                write(&log_path, &render(&log))?;
                return Err(e);
            }
        };
        on_step(&row);
        log.push(row);
        if every > 0 && trainer.step % every == 0 && trainer.step < total_steps {
            trainer.save(&ckpt_dir)?;
            write(&log_path, &render(&log))?;
        }
    }
    let checkpoint = trainer.save(&ckpt_dir)?;
    write(&log_path, &render(&log))?;
    Ok(TrainSummary {
        checkpoint,
        log,
        total_steps,
    })
}
