//! Seeded generator for shifted embedding streams.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` with standard
//! normal draws from `rand_distr::StandardNormal`. Draw order is fixed:
//!
//! 1. a shared unit direction, then one unit direction per class;
//! 2. an image-only unit direction, then one image-only unit direction per
//!    class;
//! 3. per class, Gaussian weights over the class directions for its shift;
//! 4. prompt noise, class-major;
//! 5. a Fisher-Yates shuffle of the balanced label sequence;
//! 6. per sample: base noise, then view noise for views `1..V`.
//!
//! Every noise vector is `scale · g / √d` with `g ~ N(0, I_d)`, so its norm
//! is close to `scale`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::acef::{write_feature_file, FeatureMatrix};
use super::manifest::{write_labels, DatasetManifest};
use crate::error::{Error, Result};
use crate::numerics::l2_normalize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub views: usize,
    pub prompts_per_class: usize,
    /// Spread of class centers around the shared direction; larger is easier.
    pub separation: f64,
    /// Weight of a direction shared by all images and absent from the text
    /// side. Shrinks image-text similarities relative to image-image ones.
    #[serde(default)]
    pub modality_gap: f64,
    /// Weight of an image-only direction per class, so images of one class
    /// resemble each other more than the text prompts alone explain.
    #[serde(default)]
    pub image_contrast: f64,
    /// Per-sample deviation from the (shifted) class center.
    pub intra_noise: f64,
    /// Per-view deviation from the sample's base vector (view 0 excluded).
    pub view_noise: f64,
    /// Per-prompt deviation from the class center.
    pub prompt_noise: f64,
    /// Norm of each class's image-domain shift away from its text center,
    /// drawn inside the span of the class directions.
    pub shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 32,
            per_class: 50,
            views: 8,
            prompts_per_class: 4,
            separation: 1.0,
            modality_gap: 2.0,
            image_contrast: 1.5,
            intra_noise: 0.7,
            view_noise: 0.5,
            prompt_noise: 0.1,
            shift: 0.4,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.classes < 2 {
            return bad("classes must be >= 2");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.views == 0 || self.prompts_per_class == 0 {
            return bad("views and prompts_per_class must be positive");
        }
        if u32::try_from(self.classes).is_err() {
            return bad("too many classes");
        }
        for (name, v) in [
            ("separation", self.separation),
            ("modality_gap", self.modality_gap),
            ("image_contrast", self.image_contrast),
            ("intra_noise", self.intra_noise),
            ("view_noise", self.view_noise),
            ("prompt_noise", self.prompt_noise),
            ("shift", self.shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Generated stream, held in memory until written.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStream {
    pub manifest: DatasetManifest,
    /// `classes × prompts_per_class` rows, class-major.
    pub text: FeatureMatrix,
    /// `samples × views` rows, sample-major.
    pub views: FeatureMatrix,
    pub labels: Vec<u32>,
}

pub const TEXT_FILE: &str = "text.acef";
pub const VIEWS_FILE: &str = "views.acef";
pub const LABELS_FILE: &str = "labels.bin";
pub const MANIFEST_FILE: &str = "manifest.toml";

impl SyntheticStream {
    /// Writes the three binaries plus `manifest.toml` into `dir` and returns
    /// the manifest path.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_feature_file(dir.join(TEXT_FILE), &self.text)?;
        write_feature_file(dir.join(VIEWS_FILE), &self.views)?;
        write_labels(dir.join(LABELS_FILE), &self.labels)?;
        let path = dir.join(MANIFEST_FILE);
        self.manifest.save(&path)?;
        Ok(path)
    }
}

struct Gauss<'a> {
    rng: &'a mut ChaCha8Rng,
    dim: usize,
}

impl Gauss<'_> {
    fn vector(&mut self, scale: f64) -> Vec<f64> {
        let k = scale / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| k * self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `a·x + y`
fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn generate_synthetic_stream(spec: &SyntheticSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let (c, d) = (spec.classes, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut g = Gauss { rng: &mut rng, dim: d };

    let common = l2_normalize(&g.vector(1.0))?;
    let mut directions = Vec::with_capacity(c);
    for _ in 0..c {
        directions.push(l2_normalize(&g.vector(1.0))?);
    }
    let centers = directions
        .iter()
        .map(|u| l2_normalize(&axpy(spec.separation, u, &common)))
        .collect::<Result<Vec<_>>>()?;
    let gap = l2_normalize(&g.vector(1.0))?;
    let mut image_directions = Vec::with_capacity(c);
    for _ in 0..c {
        image_directions.push(l2_normalize(&g.vector(1.0))?);
    }
    let mut shifts = Vec::with_capacity(c);
    for _ in 0..c {
        let mut dir = vec![0.0; d];
        for u in &directions {
            let w: f64 = g.rng.sample(StandardNormal);
            dir = axpy(w, u, &dir);
        }
        let dir = l2_normalize(&dir)?;
        shifts.push(dir.iter().map(|x| x * spec.shift).collect::<Vec<_>>());
    }

    let mut text_rows = Vec::with_capacity(c * spec.prompts_per_class);
    for center in &centers {
        for _ in 0..spec.prompts_per_class {
            text_rows.push(l2_normalize(&add(center, &g.vector(spec.prompt_noise)))?);
        }
    }

    let mut labels: Vec<u32> = (0..c as u32)
        .flat_map(|k| std::iter::repeat_n(k, spec.per_class))
        .collect();
    labels.shuffle(g.rng);

    let mut view_rows = Vec::with_capacity(labels.len() * spec.views);
    for &label in &labels {
        let k = label as usize;
        let anchor = axpy(
            spec.image_contrast,
            &image_directions[k],
            &axpy(spec.modality_gap, &gap, &centers[k]),
        );
        let shifted = add(&anchor, &shifts[k]);
        let base = add(&shifted, &g.vector(spec.intra_noise));
        view_rows.push(l2_normalize(&base)?);
        for _ in 1..spec.views {
            view_rows.push(l2_normalize(&add(&base, &g.vector(spec.view_noise)))?);
        }
    }

    let text = if text_rows.is_empty() {
        FeatureMatrix::empty(d)?
    } else {
        FeatureMatrix::from_f64_rows(&text_rows)?
    };
    let views = if view_rows.is_empty() {
        FeatureMatrix::empty(d)?
    } else {
        FeatureMatrix::from_f64_rows(&view_rows)?
    };
    let manifest = DatasetManifest {
        class_names: (0..c).map(|k| format!("class_{k:03}")).collect(),
        dim: d,
        prompts_per_class: spec.prompts_per_class,
        views_per_sample: spec.views,
        sample_count: labels.len(),
        text_embeddings: TEXT_FILE.into(),
        image_views: VIEWS_FILE.into(),
        labels: Some(LABELS_FILE.into()),
        normalized: true,
    };
    Ok(SyntheticStream {
        manifest,
        text,
        views,
        labels,
    })
}
