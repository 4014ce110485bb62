//! On-disk dataset: `images/{seed}.png`, `entities/{seed}.png`, `meta.json`.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use diffseg_core::datagen::{synth_scene, Sample, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Disjoint half-open seed ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<u64>,
    pub val: Range<u64>,
    pub test: Range<u64>,
}

impl Splits {
    /// `train` seeds from 0, validation from 1e6, test from 2e6.
    pub fn with_counts(train: u64, val: u64, test: u64) -> Self {
        Self { train: 0..train, val: 1_000_000..1_000_000 + val, test: 2_000_000..2_000_000 + test }
    }

    pub fn range(&self, split: Split) -> Range<u64> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [&self.train, &self.val, &self.test];
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Config(format!("seed ranges {a:?} and {b:?} overlap")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub scene: SceneConfig,
    pub splits: Splits,
}

pub fn image_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("images").join(format!("{seed}.png"))
}

pub fn entities_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("entities").join(format!("{seed}.png"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn generate(dir: &Path, scene: &SceneConfig, splits: &Splits) -> Result<DatasetMeta> {
    scene.validate().map_err(|e| Error::Config(format!("scene: {e}")))?;
    splits.validate()?;
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("entities"))?;
    for range in [&splits.train, &splits.val, &splits.test] {
        for seed in range.clone() {
            let s = synth_scene(seed, scene)?;
            io::save_image(&image_path(dir, seed), &s.image)?;
            io::save_labelmap(&entities_path(dir, seed), &s.entities)?;
        }
    }
    let meta = DatasetMeta { format_version: FORMAT_VERSION, scene: *scene, splits: splits.clone() };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.clone()),
        _ => Error::io(&path, e),
    })?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("dataset version {}, expected {FORMAT_VERSION}", meta.format_version)));
    }
    Ok(meta)
}

/// Loads up to `limit` samples of a split, in seed order.
pub fn load_split(dir: &Path, meta: &DatasetMeta, split: Split, limit: Option<usize>) -> Result<Vec<(u64, Sample)>> {
    let range = meta.splits.range(split);
    let take = limit.unwrap_or(usize::MAX);
    range
        .take(take)
        .map(|seed| {
            let image = io::load_image(&image_path(dir, seed))?;
            let entities = io::load_labelmap(&entities_path(dir, seed))?;
            Ok((seed, Sample { image, entities }))
        })
        .collect()
}
