#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    /// A tiny config and a 6/3/3 scene dataset in a fresh directory.
    pub fn new() -> Self {
        Self::with_overrides(serde_json::json!({}))
    }

    pub fn with_overrides(extra: serde_json::Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = serde_json::json!({
            "net": {"base_width": 8, "depth_per_level": 1, "levels": 2, "attention_at_lowest": true, "time_embed_dim": 8},
            "train": {"iterations": 6, "batch_size": 2, "warmup_iters": 1, "decay_tail_iters": 2, "eval_every": 3, "lr_peak": 0.001},
            "scene": {"size": 8, "min_entities": 2, "max_entities": 4},
            "sampler": {"steps": 2},
            "eval_images": 3,
            "dataset": dir.path().join("data"),
        });
        merge(&mut cfg, extra);
        fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
        let fx = Self { dir };
        ok(&fx.run(&["datagen", "--train", "6", "--val", "3", "--test", "3"]));
        fx
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        bin().args(args).arg("--config").arg(self.path("config.json")).output().unwrap()
    }

    /// Trains into `rel` and returns the run directory.
    pub fn train(&self, rel: &str) -> PathBuf {
        let out = self.path(rel);
        ok(&self.run(&["train", "--out", out.to_str().unwrap()]));
        out
    }

    /// A directory holding only the test-split images.
    pub fn test_images(&self) -> PathBuf {
        let dst = self.path("test_images");
        fs::create_dir_all(&dst).unwrap();
        for seed in 2_000_000..2_000_003u64 {
            let name = format!("{seed}.png");
            fs::copy(self.path("data/images").join(&name), dst.join(&name)).unwrap();
        }
        dst
    }
}

fn merge(base: &mut serde_json::Value, extra: serde_json::Value) {
    match (base, extra) {
        (serde_json::Value::Object(b), serde_json::Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffseg"))
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn pngs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}
