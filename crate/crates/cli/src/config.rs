//! JSON run configuration.
//!
//! ```json
//! {
//!   "network": [{"type": "binary", "out": 128}, {"type": "batch_norm"},
//!               {"type": "activation", "kind": "relu"}, {"type": "binary", "out": 10},
//!               {"type": "batch_norm"}],
//!   "optimizer": {"algorithm": "binary-msa", "batch_size": 100, "epochs": 30, "seed": 0},
//!   "dataset": {"kind": "mnist", "train_limit": 10000},
//!   "loss": "squared-hinge",
//!   "output_dir": "runs/binary"
//! }
//! ```
//!
//! Omitted optimizer fields take their defaults (see [`MsaConfig::new`]).
//! `init_seed` defaults to the optimizer seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use msa_core::data::{load_mnist_idx, make_binary_regression, Dataset, Split};
use msa_core::layers::{build_network, LayerSpec, Network};
use msa_core::msa::MsaConfig;
use msa_core::propagation::LossKind;
use serde::{Deserialize, Serialize};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "MSA_OUTPUT_DIR";
/// Directory holding the MNIST IDX files when the config does not name one.
pub const MNIST_DIR_ENV: &str = "MSA_MNIST_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Standard MNIST file names (optionally gzipped) inside `dir`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "yes")]
        evaluate_test: bool,
    },
    /// Planted binary regression with `samples` standard normal inputs.
    Synthetic {
        d0: usize,
        d1: usize,
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: Vec<LayerSpec>,
    #[serde(default)]
    pub init_seed: Option<u64>,
    #[serde(default)]
    pub optimizer: MsaConfig,
    pub dataset: DatasetSpec,
    pub loss: LossKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Train and (optional) test sets described by a [`DatasetSpec`].
pub struct Data {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Copy with every default filled in, as written next to the outputs.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.init_seed = Some(self.init_seed());
        out.optimizer.rho = Some(self.optimizer.rho_rule());
        if let DatasetSpec::Mnist { dir, .. } = &mut out.dataset {
            *dir = Some(mnist_dir(dir.as_deref()));
        }
        out.output_dir = self.output_dir();
        out
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.optimizer.seed)
    }

    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn input_dim(&self) -> usize {
        match self.dataset {
            DatasetSpec::Mnist { .. } => 784,
            DatasetSpec::Synthetic { d0, .. } => d0,
        }
    }

    /// The freshly initialized network.
    pub fn build_network(&self) -> anyhow::Result<Network> {
        if self.network.is_empty() {
            bail!("network has no layers");
        }
        Ok(build_network(
            self.input_dim(),
            &self.network,
            self.init_seed(),
        )?)
    }

    /// Structural checks that need no data: shapes and optimizer compatibility.
    pub fn validate(&self) -> anyhow::Result<Network> {
        if let DatasetSpec::Synthetic {
            d0, d1, samples, ..
        } = self.dataset
        {
            if d0 == 0 || d1 == 0 || samples == 0 {
                bail!("synthetic dataset dimensions must be positive");
            }
        }
        let net = self.build_network()?;
        self.optimizer.validate(&net)?;
        Ok(net)
    }

    pub fn load_data(&self) -> anyhow::Result<Data> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                d0,
                d1,
                samples,
                seed,
            } => Ok(Data {
                train: make_binary_regression(*d0, *d1, *samples, *seed)?.dataset(),
                test: None,
            }),
            DatasetSpec::Mnist {
                dir,
                train_limit,
                test_limit,
                evaluate_test,
            } => {
                let dir = mnist_dir(dir.as_deref());
                let mut train = load_split(&dir, "train", Split::Train)?;
                if let Some(n) = train_limit {
                    train = train.take(*n)?;
                }
                let test = if *evaluate_test {
                    let mut t = load_split(&dir, "t10k", Split::Test)?;
                    if let Some(n) = test_limit {
                        t = t.take(*n)?;
                    }
                    Some(t)
                } else {
                    None
                };
                Ok(Data { train, test })
            }
        }
    }
}

/// `dir`, else `$MSA_MNIST_DIR`, else `data/mnist`.
pub fn mnist_dir(dir: Option<&Path>) -> PathBuf {
    dir.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn find(dir: &Path, stem: &str) -> anyhow::Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    bail!(
        "{stem}[.gz] not found in {} (see scripts/fetch_mnist.sh)",
        dir.display()
    )
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> anyhow::Result<Dataset> {
    let images = find(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    Ok(load_mnist_idx(images, labels, split)?)
}
