//! Datasets, the MNIST IDX loader, the planted binary regression problem and
//! seeded minibatching.

mod idx;
mod synthetic;

pub use idx::{
    dataset_from_idx, load_mnist_idx, parse_idx_images, parse_idx_labels, IdxImages, IMAGES_MAGIC,
    LABELS_MAGIC,
};
pub use synthetic::{make_binary_regression, SyntheticRegressionProblem};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::propagation::Targets;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data at offset {offset}: needed {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {value} at index {index} is not a digit")]
    InvalidLabel { index: usize, value: u8 },
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Inputs `x_{s,0}` (one per row) and their supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Targets,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets, split: Split) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::InvalidTargets(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `indices` as a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Matrix, Targets)> {
        Ok((
            self.inputs.select_rows(indices)?,
            self.targets.select(indices)?,
        ))
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, targets) = self.gather(&idx)?;
        Ok(Self {
            inputs,
            targets,
            split: self.split,
        })
    }
}

/// Shuffled partition of `0..len` into batches of `batch_size` for one epoch.
///
/// The order depends only on `(seed, epoch)`; the final batch may be short.
pub fn minibatch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn minibatches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    minibatch_indices(ds.len(), batch_size, seed, epoch)
}
