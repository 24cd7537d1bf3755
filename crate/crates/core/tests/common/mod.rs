#![allow(dead_code)]

use std::path::PathBuf;

use tempfile::TempDir;
use tta_core::engine::{run_stream, EngineConfig, RunReport};
use tta_core::features::{generate_synthetic_stream, Dataset, FeatureMatrix, SyntheticSpec, SyntheticStream};

/// The shifted fixture stream: 8 classes, 50 per class, 8 views.
pub fn fixture_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn noiseless_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        dim: 16,
        per_class: 10,
        views: 4,
        modality_gap: 0.0,
        image_contrast: 0.0,
        intra_noise: 0.0,
        view_noise: 0.0,
        prompt_noise: 0.0,
        shift: 0.0,
        ..SyntheticSpec::default()
    }
}

/// A written stream; the directory lives as long as the value.
pub struct OnDisk {
    pub dir: TempDir,
    pub manifest: PathBuf,
}

impl OnDisk {
    pub fn open(&self) -> Dataset {
        Dataset::open(&self.manifest).unwrap()
    }
}

pub fn write(stream: &SyntheticStream) -> OnDisk {
    let dir = tempfile::tempdir().unwrap();
    let manifest = stream.write_to(dir.path()).unwrap();
    OnDisk { dir, manifest }
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticStream {
    generate_synthetic_stream(spec).unwrap()
}

pub fn dataset(spec: &SyntheticSpec) -> (OnDisk, Dataset) {
    let disk = write(&generate(spec));
    let ds = disk.open();
    (disk, ds)
}

/// The first `n` samples of a stream, as their own stream.
pub fn prefix(stream: &SyntheticStream, n: usize) -> SyntheticStream {
    let mut out = stream.clone();
    let v = stream.manifest.views_per_sample;
    let dim = stream.manifest.dim;
    out.views = FeatureMatrix::new(dim, stream.views.as_slice()[..n * v * dim].to_vec()).unwrap();
    out.labels.truncate(n);
    out.manifest.sample_count = n;
    out
}

pub fn run_bytes(ds: &Dataset, cfg: &EngineConfig) -> (Vec<u8>, RunReport) {
    let mut out = Vec::new();
    let report = run_stream(ds, cfg, &mut out).unwrap();
    (out, report)
}

pub fn lines(bytes: &[u8]) -> Vec<serde_json::Value> {
    std::str::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn predictions(bytes: &[u8]) -> Vec<serde_json::Value> {
    lines(bytes)
        .into_iter()
        .filter(|v| v["kind"] == "prediction")
        .collect()
}
