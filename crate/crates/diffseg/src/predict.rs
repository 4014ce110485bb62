//! Segments a directory of images with a trained checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use diffseg_core::diffusion::SamplerConfig;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::png_files;
use crate::io::{load_image, save_labelmap};
use crate::sweep::sample_many;

/// Writes `{stem}.png`, or `{stem}_{k}.png` for several samples per image.
/// Sample `k` of the `i`-th image (sorted by name) uses id
/// `i * num_samples + k`.
pub fn sample_dir(ckpt: &Path, images: &Path, out: &Path, sampler: &SamplerConfig, num_samples: usize) -> Result<Vec<PathBuf>> {
    sampler.validate().map_err(|e| Error::Config(format!("sampler: {e}")))?;
    if num_samples == 0 {
        return Err(Error::Config("num_samples must be positive".into()));
    }
    let (spec, net) = checkpoint::load(ckpt)?.into_net()?;
    let files = png_files(images)?;
    let loaded = files.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let draws = sample_many(&net, &loaded, num_samples, sampler, &spec.schedule, &spec.encoding)?;
    let mut written = Vec::new();
    for (file, maps) in files.iter().zip(draws) {
        let stem = file.file_stem().expect("listed file").to_string_lossy().into_owned();
        for (k, map) in maps.iter().enumerate() {
            let name = if num_samples == 1 { format!("{stem}.png") } else { format!("{stem}_{k}.png") };
            let path = out.join(name);
            save_labelmap(&path, map)?;
            written.push(path);
        }
    }
    let meta = serde_json::json!({ "checkpoint": ckpt, "sampler": sampler, "num_samples": num_samples, "model": spec });
    let path = out.join("sampling.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("serialises")).map_err(|e| Error::io(&path, e))?;
    Ok(written)
}
