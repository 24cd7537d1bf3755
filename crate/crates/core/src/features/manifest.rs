use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::acef::{read_feature_file, FeatureMatrix, RowGroupReader};
use crate::error::{Error, Result};
use crate::numerics::Embedding;

/// Rows of a normalized file must have unit norm within this tolerance.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Describes one embedded test stream on disk.
///
/// File references are resolved relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub dim: usize,
    pub prompts_per_class: usize,
    pub views_per_sample: usize,
    pub sample_count: usize,
    pub text_embeddings: PathBuf,
    pub image_views: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Rows were L2-normalized before storage.
    pub normalized: bool,
}

impl DatasetManifest {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Manifest(format!(
                "need at least 2 classes, got {}",
                self.class_names.len()
            )));
        }
        if self.dim < 2 {
            return Err(Error::Manifest(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.prompts_per_class == 0 {
            return Err(Error::Manifest("prompts_per_class must be positive".into()));
        }
        if self.views_per_sample == 0 {
            return Err(Error::Manifest("views_per_sample must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Labels(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// A manifest with its text prototypes and labels loaded. Image views stay on
/// disk and are streamed one sample at a time via [`Dataset::views`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    base_dir: PathBuf,
    /// `classes × prompts_per_class` prompt embeddings, unit norm.
    pub prompts: Vec<Vec<Embedding>>,
    /// `None` when no label file is referenced or the file is empty.
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, base_dir) = DatasetManifest::load(manifest_path)?;
        Self::from_manifest(manifest, base_dir)
    }

    pub fn from_manifest(manifest: DatasetManifest, base_dir: PathBuf) -> Result<Self> {
        manifest.validate()?;
        let text = read_feature_file(base_dir.join(&manifest.text_embeddings))?;
        let expected_rows = manifest.classes() * manifest.prompts_per_class;
        check_shape("text embeddings", &text, manifest.dim, expected_rows)?;
        let mut prompts = Vec::with_capacity(manifest.classes());
        for c in 0..manifest.classes() {
            let mut group = Vec::with_capacity(manifest.prompts_per_class);
            for s in 0..manifest.prompts_per_class {
                let row = text.embedding(c * manifest.prompts_per_class + s)?;
                group.push(normalize_row(row, manifest.normalized)?);
            }
            prompts.push(group);
        }

        let views = RowGroupReader::open(
            base_dir.join(&manifest.image_views),
            manifest.views_per_sample,
        )?;
        let header = views.header();
        if header.dim as usize != manifest.dim {
            return Err(Error::DimMismatch {
                expected: manifest.dim,
                got: header.dim as usize,
            });
        }
        if views.group_count() != manifest.sample_count as u64 {
            return Err(Error::Manifest(format!(
                "image views hold {} samples, manifest says {}",
                views.group_count(),
                manifest.sample_count
            )));
        }

        let labels = match &manifest.labels {
            None => None,
            Some(p) => {
                let labels = read_labels(base_dir.join(p))?;
                if labels.is_empty() {
                    None
                } else if labels.len() != manifest.sample_count {
                    return Err(Error::Labels(format!(
                        "{} labels for {} samples",
                        labels.len(),
                        manifest.sample_count
                    )));
                } else if let Some(&bad) =
                    labels.iter().find(|&&l| l as usize >= manifest.classes())
                {
                    return Err(Error::Labels(format!("label {bad} out of range")));
                } else {
                    Some(labels)
                }
            }
        };

        Ok(Self {
            manifest,
            base_dir,
            prompts,
            labels,
        })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes()
    }

    pub fn sample_count(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn views_per_sample(&self) -> usize {
        self.manifest.views_per_sample
    }

    pub fn label(&self, sample: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[sample])
    }

    /// Opens a fresh sequential pass over the image views.
    pub fn views(&self) -> Result<ViewStream> {
        let reader = RowGroupReader::open(
            self.base_dir.join(&self.manifest.image_views),
            self.manifest.views_per_sample,
        )?;
        Ok(ViewStream {
            reader,
            normalized: self.manifest.normalized,
        })
    }
}

/// Iterates samples in file order, yielding each sample's views as unit
/// embeddings (view 0 first).
pub struct ViewStream {
    reader: RowGroupReader,
    normalized: bool,
}

impl Iterator for ViewStream {
    type Item = Result<Vec<Embedding>>;

    fn next(&mut self) -> Option<Self::Item> {
        let group = match self.reader.next_group() {
            Ok(Some(g)) => g,
            Ok(None) => return None,
            Err(e) => return Some(Err(e)),
        };
        let normalized = self.normalized;
        Some(
            (0..group.row_count())
                .map(|i| group.embedding(i).and_then(|e| normalize_row(e, normalized)))
                .collect(),
        )
    }
}

fn check_shape(what: &str, m: &FeatureMatrix, dim: usize, rows: usize) -> Result<()> {
    if m.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: m.dim(),
        });
    }
    if m.row_count() != rows {
        return Err(Error::Manifest(format!(
            "{what}: expected {rows} rows, found {}",
            m.row_count()
        )));
    }
    Ok(())
}

/// Validates stored-normalized rows, then renormalizes in `f64` to remove
/// `f32` rounding.
fn normalize_row(e: Embedding, stored_normalized: bool) -> Result<Embedding> {
    if stored_normalized && (e.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Manifest(format!(
            "row norm {} deviates from 1 by more than {UNIT_NORM_TOLERANCE}",
            e.norm()
        )));
    }
    e.normalized()
}
