//! Training runs on disk: `config.json`, `log.csv`, `checkpoint.bin` (latest)
//! and `checkpoints/iter_{n}.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use diffseg_core::nn::UNet;
use diffseg_core::trainer::{batch_indices, evaluate, AdamW, Example, Trainer};
use diffseg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{self, Split};
use crate::error::{Error, Result};

pub const LOG_HEADER: [&str; 5] = ["iter", "loss", "ari", "iou", "lr"];
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub ari: f64,
    pub iou: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub rows: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bin")
}

pub fn log_path(out: &Path) -> PathBuf {
    out.join("log.csv")
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        w.write_record(LOG_HEADER).map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Trains `cfg` into `out`, resuming from `out/checkpoint.bin` when `resume`
/// is set and the file exists.
pub fn fit(cfg: &ExperimentConfig, out: &Path, resume: bool, verbose: bool) -> Result<FitSummary> {
    cfg.validate()?;
    let meta = dataset::load_meta(&cfg.dataset)?;
    let spec = cfg.model_spec()?;
    meta.scene.check_capacity(spec.palette.capacity()).map_err(|e| Error::Config(format!("dataset scene: {e}")))?;
    spec.net.check_input_size(meta.scene.size, meta.scene.size).map_err(|e| Error::Config(format!("net.levels: {e}")))?;
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("config.json"))?;
    let experiment = serde_json::to_value(cfg).expect("config serialises");

    let train = dataset::load_split(&cfg.dataset, &meta, Split::Train, None)?;
    if train.is_empty() {
        return Err(Error::Config("dataset has no training scenes".into()));
    }
    let encoding = spec.encoding;
    let examples = train
        .into_iter()
        .map(|(_, s)| Example::new(s.image, &s.entities, &spec.palette, &encoding))
        .collect::<diffseg_core::Result<Vec<_>>>()?;
    let val = dataset::load_split(&cfg.dataset, &meta, Split::Val, Some(cfg.eval_images))?;
    let val_images: Vec<Tensor<f32>> = val.iter().map(|(_, s)| s.image.clone()).collect();
    let val_maps: Vec<_> = val.iter().map(|(_, s)| s.entities.clone()).collect();

    let ckpt_path = checkpoint_path(out);
    let (mut net, mut opt, start, mut rows) = if resume && ckpt_path.exists() {
        let ckpt = checkpoint::load(&ckpt_path)?;
        if ckpt.header.model != spec {
            return Err(Error::Config(format!("{} was trained with a different model", ckpt_path.display())));
        }
        let start = ckpt.header.iteration;
        let opt = ckpt.optimizer.clone().ok_or_else(|| Error::format(&ckpt_path, "no optimizer state to resume from"))?;
        let (_, net) = ckpt.into_net()?;
        let rows = match read_log(&log_path(out)) {
            Ok(rows) => rows.into_iter().filter(|r| r.iter <= start).collect(),
            Err(Error::Missing(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        (net, opt, start, rows)
    } else {
        let net: UNet<f32> = spec.build(cfg.train.seed)?;
        let opt = AdamW::new(net.parameter_count());
        (net, opt, 0, Vec::new())
    };
    write_log(&log_path(out), &rows)?;

    let tc = cfg.train;
    let sched = cfg.noise_schedule();
    let mut interval_loss = 0.0;
    let mut interval_steps = 0u64;
    for iter in start..tc.iterations {
        let idx = batch_indices(tc.seed, iter, tc.batch_size, examples.len());
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let stats = {
            let mut trainer = Trainer { cfg: tc, sched, weighting: cfg.weighting(), net: &mut net, opt: &mut opt };
            trainer.step(&batch, iter)?
        };
        interval_loss += stats.loss;
        interval_steps += 1;
        let done = iter + 1;
        if done.is_multiple_of(tc.eval_every) {
            let scores = evaluate(&net, &val_images, &val_maps, &cfg.sampler, &sched, &encoding, EVAL_CHUNK)?;
            let row = LogRow {
                iter: done,
                loss: interval_loss / interval_steps as f64,
                ari: scores.mean_ari(),
                iou: scores.mean_iou(),
                lr: stats.lr,
            };
            if verbose {
                eprintln!("iter {:>7}  loss {:.5}  ari {:.4}  iou {:.4}  lr {:.2e}", row.iter, row.loss, row.ari, row.iou, row.lr);
            }
            rows.push(row);
            (interval_loss, interval_steps) = (0.0, 0);
            let ckpt = Checkpoint::new(spec.clone(), net.params().to_vec(), done, Some(opt.clone()), Some(experiment.clone()));
            checkpoint::save(&out.join("checkpoints").join(format!("iter_{done:07}.bin")), &ckpt)?;
            write_log(&log_path(out), &rows)?;
            checkpoint::save(&ckpt_path, &ckpt)?;
        }
    }
    if !tc.iterations.is_multiple_of(tc.eval_every) {
        let ckpt = Checkpoint::new(spec, net.params().to_vec(), tc.iterations, Some(opt), Some(experiment));
        checkpoint::save(&ckpt_path, &ckpt)?;
    }
    Ok(FitSummary { rows, checkpoint: ckpt_path })
}
