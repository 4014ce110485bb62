//! Binary checkpoints: magic, version, a JSON header and little-endian f32
//! payloads (parameters, then optional optimizer moments).

use std::fs;
use std::path::Path;

use diffseg_core::bitcodec::Encoding;
use diffseg_core::diffusion::PredictionType;
use diffseg_core::nn::{NetConfig, UNet};
use diffseg_core::palette::Palette;
use diffseg_core::rng;
use diffseg_core::schedule::{LossWeighting, NoiseSchedule};
use diffseg_core::trainer::AdamW;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DIFFSEG\0";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild and run a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub net: NetConfig,
    pub prediction: PredictionType,
    pub encoding: Encoding,
    pub n_bits: u32,
    pub schedule: NoiseSchedule,
    pub weighting: LossWeighting,
    pub palette: Palette,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<UNet<f32>> {
        let mut r = rng::keyed(seed, 1, 0);
        Ok(UNet::new(self.net, self.encoding.channels(), self.prediction, self.encoding.value_range(), &mut r)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelSpec,
    pub param_count: usize,
    /// Completed training iterations.
    pub iteration: u64,
    pub optimizer: Option<OptimizerHeader>,
    /// The experiment config that produced this file.
    pub experiment: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn new(model: ModelSpec, params: Vec<f32>, iteration: u64, optimizer: Option<AdamW>, experiment: Option<serde_json::Value>) -> Self {
        let header = Header {
            model,
            param_count: params.len(),
            iteration,
            optimizer: optimizer.as_ref().map(|o| OptimizerHeader { step: o.step, beta1: o.beta1, beta2: o.beta2, eps: o.eps }),
            experiment,
        };
        Self { header, params, optimizer }
    }

    pub fn into_net(self) -> Result<(ModelSpec, UNet<f32>)> {
        let mut net = self.header.model.build(0)?;
        net.set_params(&self.params)?;
        Ok((self.header.model, net))
    }
}

fn push_floats(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| Error::format(path, e.to_string()))?;
    let n = ckpt.params.len();
    let mut out = Vec::with_capacity(16 + header.len() + 12 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    push_floats(&mut out, &ckpt.params);
    if let Some(opt) = &ckpt.optimizer {
        push_floats(&mut out, &opt.m);
        push_floats(&mut out, &opt.v);
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("checkpoint version {version}, expected {VERSION}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let n = header.param_count;
    let floats: Vec<f32> = bytes[16 + len..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let expected = if header.optimizer.is_some() { 3 * n } else { n };
    if !(bytes.len() - 16 - len).is_multiple_of(4) || floats.len() != expected {
        return Err(Error::format(path, format!("payload holds {} floats, expected {expected}", floats.len())));
    }
    let optimizer = header.optimizer.as_ref().map(|o| AdamW {
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        step: o.step,
        m: floats[n..2 * n].to_vec(),
        v: floats[2 * n..].to_vec(),
    });
    let params = floats[..n].to_vec();
    Ok(Checkpoint { header, params, optimizer })
}
