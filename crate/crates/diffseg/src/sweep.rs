//! Grid experiments written as CSV tables, one row per grid value with the
//! median over training seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use diffseg_core::bitcodec::{Encoding, EncodingKind};
use diffseg_core::diffusion::{sample, PredictionType, SamplerConfig};
use diffseg_core::metrics::{ari, best_of_n, hungarian_iou};
use diffseg_core::nn::UNet;
use diffseg_core::palette::LapMode;
use diffseg_core::schedule::{NoiseSchedule, WeightingKind};
use diffseg_core::{LabelMap, Tensor};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{encoding_name, weighting_name, ExperimentConfig};
use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::fit;

const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepKind {
    Timesteps,
    Guidance,
    InputScale,
    LapMode,
    Encoding,
    PredLoss,
    BestOfN,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Timesteps => "timesteps",
            SweepKind::Guidance => "guidance",
            SweepKind::InputScale => "input_scale",
            SweepKind::LapMode => "lap_mode",
            SweepKind::Encoding => "encoding",
            SweepKind::PredLoss => "pred_loss",
            SweepKind::BestOfN => "best_of_n",
        }
    }

    /// Name of the swept column.
    pub fn column(self) -> &'static str {
        match self {
            SweepKind::Timesteps => "steps",
            SweepKind::Guidance => "gw",
            SweepKind::InputScale => "b",
            SweepKind::LapMode => "lap_mode",
            SweepKind::Encoding => "encoding",
            SweepKind::PredLoss => "pred_loss",
            SweepKind::BestOfN => "n",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepKind::Timesteps => &["1", "2", "4", "8", "16", "32"],
            SweepKind::Guidance => &["0", "0.5", "1", "1.5", "2", "2.5", "3"],
            SweepKind::InputScale => &["0.02", "0.05", "0.1", "0.2", "0.5", "1"],
            SweepKind::LapMode => &["none", "different", "random", "similar"],
            SweepKind::Encoding => &["onehot", "rgb", "bits"],
            SweepKind::PredLoss => &[
                "x:sigmoid", "x:constant", "x:snr_eps", "eps:sigmoid", "eps:constant", "eps:snr_eps", "v:sigmoid",
                "v:constant", "v:snr_eps",
            ],
            SweepKind::BestOfN => &["1", "2", "4", "8"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Whether each grid value needs its own trained network.
    pub fn trains(self) -> bool {
        matches!(self, SweepKind::InputScale | SweepKind::LapMode | SweepKind::Encoding | SweepKind::PredLoss)
    }
}

fn parse<T: FromStr>(kind: SweepKind, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad {} value {v:?}", kind.name())))
}

fn parse_enum<T: for<'de> serde::Deserialize<'de>>(kind: SweepKind, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("bad {} value {v:?}", kind.name())))
}

/// Applies one grid value of a training sweep to `base`.
pub fn variant(kind: SweepKind, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match kind {
        SweepKind::InputScale => cfg.schedule.input_scale = parse(kind, value)?,
        SweepKind::LapMode => cfg.lap_mode = parse_enum::<LapMode>(kind, value)?,
        SweepKind::Encoding => cfg.encoding = parse_enum::<EncodingKind>(kind, value)?,
        SweepKind::PredLoss => {
            let (p, w) = value.split_once(':').ok_or_else(|| Error::Config(format!("pred_loss value {value:?} is not pred:weighting")))?;
            cfg.prediction = parse_enum::<PredictionType>(kind, p)?;
            cfg.schedule.weighting = match w {
                "sigmoid" => WeightingKind::SigmoidBias,
                other => parse_enum::<WeightingKind>(kind, other)?,
            };
        }
        SweepKind::Timesteps => cfg.sampler.steps = parse(kind, value)?,
        SweepKind::Guidance => cfg.sampler.guidance_weight = parse(kind, value)?,
        SweepKind::BestOfN => {
            let n: usize = parse(kind, value)?;
            if n == 0 {
                return Err(Error::Config("best_of_n value must be positive".into()));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Run directory name: the knobs the sweeps vary plus a digest of every
/// setting that affects training.
pub fn run_key(cfg: &ExperimentConfig) -> String {
    let mut training = cfg.clone();
    training.sampler = SamplerConfig::default();
    training.out_dir = PathBuf::new();
    let digest = fnv1a(training.to_json().as_bytes());
    format!(
        "{}_{}_b{}_{}_{}_s{}_{:08x}",
        cfg.lap_mode.name(),
        encoding_name(cfg.encoding),
        cfg.schedule.input_scale,
        cfg.prediction.name(),
        weighting_name(cfg.schedule.weighting),
        cfg.train.seed,
        digest as u32
    )
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub kind: SweepKind,
    pub base: ExperimentConfig,
    pub out: PathBuf,
    /// Network for sampling sweeps; otherwise runs are looked up in `runs/`.
    pub checkpoint: Option<PathBuf>,
    pub train: bool,
    pub seeds: Vec<u64>,
    pub values: Option<Vec<String>>,
    pub split: Split,
    pub limit: Option<usize>,
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub ari: f64,
    pub iou: f64,
    pub ari_runs: Vec<f64>,
    pub iou_runs: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn csv_path(out: &Path, kind: SweepKind) -> PathBuf {
    out.join(format!("{}.csv", kind.name()))
}

/// The trained network for `cfg`, training it when allowed and missing.
fn trained(cfg: &ExperimentConfig, out: &Path, train: bool, verbose: bool) -> Result<UNet<f32>> {
    let dir = runs_dir(out).join(run_key(cfg));
    let path = fit::checkpoint_path(&dir);
    let complete = match checkpoint::load(&path) {
        Ok(c) if c.header.iteration == cfg.train.iterations => Some(c),
        Ok(_) | Err(Error::Missing(_)) => None,
        Err(e) => return Err(e),
    };
    let ckpt = match complete {
        Some(c) => c,
        None if train => {
            if verbose {
                eprintln!("training {}", dir.display());
            }
            let mut run = cfg.clone();
            run.out_dir = dir.clone();
            fit::fit(&run, &dir, true, verbose)?;
            checkpoint::load(&path)?
        }
        None => return Err(Error::Missing(path)),
    };
    Ok(ckpt.into_net()?.1)
}

struct EvalSet {
    images: Vec<Tensor<f32>>,
    maps: Vec<LabelMap>,
}

fn eval_set(cfg: &ExperimentConfig, split: Split, limit: Option<usize>) -> Result<EvalSet> {
    let meta = dataset::load_meta(&cfg.dataset)?;
    let samples = dataset::load_split(&cfg.dataset, &meta, split, limit)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("dataset split {split:?} is empty")));
    }
    Ok(EvalSet {
        images: samples.iter().map(|(_, s)| s.image.clone()).collect(),
        maps: samples.into_iter().map(|(_, s)| s.entities).collect(),
    })
}

/// Draws `per_image` samples for every image; sample `k` of image `i` uses
/// id `i * per_image + k`.
pub fn sample_many(
    net: &UNet<f32>,
    images: &[Tensor<f32>],
    per_image: usize,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    encoding: &Encoding,
) -> Result<Vec<Vec<LabelMap>>> {
    let jobs: Vec<(usize, usize)> = (0..images.len()).flat_map(|i| (0..per_image).map(move |k| (i, k))).collect();
    let mut out: Vec<Vec<LabelMap>> = vec![Vec::with_capacity(per_image); images.len()];
    for chunk in jobs.chunks(CHUNK) {
        let batch = Tensor::stack(&chunk.iter().map(|&(i, _)| images[i].clone()).collect::<Vec<_>>())?;
        let ids: Vec<u64> = chunk.iter().map(|&(i, k)| (i * per_image + k) as u64).collect();
        let res = sample(net, &batch, &ids, sampler, sched, encoding)?;
        for (&(i, _), labels) in chunk.iter().zip(res.labels) {
            out[i].push(labels);
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn score(set: &EvalSet, preds: &[LabelMap]) -> Result<(f64, f64)> {
    let mut a = Vec::with_capacity(preds.len());
    let mut u = Vec::with_capacity(preds.len());
    for (gt, p) in set.maps.iter().zip(preds) {
        a.push(ari(gt, p)?);
        u.push(hungarian_iou(gt, p)?.mean_iou);
    }
    Ok((mean(&a), mean(&u)))
}

/// Runs a sweep and writes `{out}/{kind}.csv` plus the base config beside it.
pub fn run(opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    let kind = opts.kind;
    opts.base.validate()?;
    if kind.trains() && opts.checkpoint.is_some() {
        return Err(Error::Config(format!("{} sweeps train one network per grid value; --checkpoint does not apply", kind.name())));
    }
    if opts.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let values = opts.values.clone().unwrap_or_else(|| kind.default_values());
    if values.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    opts.base.save(&opts.out.join(format!("{}.config.json", kind.name())))?;
    let set = eval_set(&opts.base, opts.split, opts.limit)?;
    let variants = values.iter().map(|v| variant(kind, &opts.base, v)).collect::<Result<Vec<_>>>()?;

    let mut per_value: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); values.len()];
    for &seed in &opts.seeds {
        if kind.trains() {
            for (k, v) in variants.iter().enumerate() {
                let mut cfg = v.clone();
                cfg.train.seed = seed;
                let net = trained(&cfg, &opts.out, opts.train, opts.verbose)?;
                let preds = sample_many(&net, &set.images, 1, &cfg.sampler, &cfg.noise_schedule(), &cfg.encoding()?)?;
                let (a, u) = score(&set, &preds.into_iter().map(|mut p| p.remove(0)).collect::<Vec<_>>())?;
                per_value[k].0.push(a);
                per_value[k].1.push(u);
            }
            continue;
        }
        let mut base = opts.base.clone();
        base.train.seed = seed;
        let net = match &opts.checkpoint {
            Some(path) => checkpoint::load(path)?.into_net()?.1,
            None => trained(&base, &opts.out, opts.train, opts.verbose)?,
        };
        let (sched, enc) = (base.noise_schedule(), base.encoding()?);
        if kind == SweepKind::BestOfN {
            let ns: Vec<usize> = values.iter().map(|v| parse(kind, v)).collect::<Result<_>>()?;
            let max_n = *ns.iter().max().expect("nonempty grid");
            let draws = sample_many(&net, &set.images, max_n, &base.sampler, &sched, &enc)?;
            for (k, &n) in ns.iter().enumerate() {
                let mut best_ari = Vec::with_capacity(draws.len());
                let mut best_iou = Vec::with_capacity(draws.len());
                for (gt, d) in set.maps.iter().zip(&draws) {
                    let (a, idx) = best_of_n(gt, &d[..n])?;
                    best_ari.push(a);
                    best_iou.push(hungarian_iou(gt, &d[idx])?.mean_iou);
                }
                per_value[k].0.push(mean(&best_ari));
                per_value[k].1.push(mean(&best_iou));
            }
        } else {
            for (k, v) in variants.iter().enumerate() {
                let preds = sample_many(&net, &set.images, 1, &v.sampler, &sched, &enc)?;
                let (a, u) = score(&set, &preds.into_iter().map(|mut p| p.remove(0)).collect::<Vec<_>>())?;
                per_value[k].0.push(a);
                per_value[k].1.push(u);
            }
        }
        if opts.checkpoint.is_some() {
            break;
        }
    }
    let rows: Vec<SweepRow> = values
        .into_iter()
        .zip(per_value)
        .map(|(value, (a, u))| SweepRow { value, ari: median(&a), iou: median(&u), ari_runs: a, iou_runs: u })
        .collect();
    write_rows(&csv_path(&opts.out, kind), kind, &rows)?;
    Ok(rows)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

pub fn write_rows(path: &Path, kind: SweepKind, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| fit::csv_error(path, e))?;
    w.write_record([kind.column(), "ari", "iou", "ari_runs", "iou_runs"]).map_err(|e| fit::csv_error(path, e))?;
    for r in rows {
        w.write_record([r.value.clone(), r.ari.to_string(), r.iou.to_string(), join(&r.ari_runs), join(&r.iou_runs)])
            .map_err(|e| fit::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => fit::csv_error(path, e),
    })?;
    let split = |s: &str| -> Result<Vec<f64>> {
        s.split(';').filter(|p| !p.is_empty()).map(|p| p.parse().map_err(|_| Error::format(path, format!("bad number {p:?}")))).collect()
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| fit::csv_error(path, e))?;
        if rec.len() != 5 {
            return Err(Error::format(path, format!("row has {} fields, expected 5", rec.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
        rows.push(SweepRow { value: rec[0].to_string(), ari: num(&rec[1])?, iou: num(&rec[2])?, ari_runs: split(&rec[3])?, iou_runs: split(&rec[4])? });
    }
    Ok(rows)
}
