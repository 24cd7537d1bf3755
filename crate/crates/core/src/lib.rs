//! Streaming test-time adaptation over precomputed embeddings.
//!
//! A zero-shot classifier built from text prototypes is refined online by a
//! per-class cache of confident image features, curriculum admission
//! thresholds, and a one-step residual update of the text and visual
//! prototypes per sample.

pub mod adapter;
pub mod cache;
pub mod engine;
pub mod error;
pub mod features;
pub mod numerics;
pub mod report;
pub mod thresholds;
pub mod zeroshot;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Confidence measure used for admission, view filtering and thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Probability,
    #[default]
    Entropy,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Probability => "probability",
            Strategy::Entropy => "entropy",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(Strategy::Probability),
            "entropy" => Ok(Strategy::Entropy),
            other => Err(Error::ConfigInvalid(format!("unknown strategy {other:?}"))),
        }
    }
}
