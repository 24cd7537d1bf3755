//! On-disk feature containers, dataset manifests, labels, and the synthetic
//! stream generator.

pub mod acef;
pub mod manifest;
pub mod synthetic;

pub use acef::{read_feature_file, write_feature_file, FeatureMatrix, Header, RowGroupReader};
pub use manifest::{read_labels, write_labels, Dataset, DatasetManifest, ViewStream};
pub use synthetic::{generate_synthetic_stream, SyntheticSpec, SyntheticStream};
