use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use msa_core::data::{Dataset, Split};
use msa_core::diagnostics::{
    error_estimate_terms, pmp_residual, random_neighbour, ErrorEstimateReport, PmpResidualReport,
};
use msa_core::msa::{evaluate, train_with, Evaluation, TrainOutcome};
use msa_core::propagation::TerminalLoss;
use msa_core::{Mode, Network};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{metrics, weights};

pub const WEIGHTS_FILE: &str = "weights.msaw";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const DIAGNOSE_FILE: &str = "diagnose.json";

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    /// Bad configuration, or weights that are missing, corrupt or do not match it.
    pub fn invalid(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn load_config(path: &Path) -> CliResult<(RunConfig, Network)> {
    let cfg = RunConfig::load(path).map_err(CliError::invalid)?;
    let net = cfg.validate().map_err(CliError::invalid)?;
    Ok((cfg, net))
}

fn load_matching_weights(cfg: &RunConfig, path: &Path) -> CliResult<Network> {
    let expected = cfg.build_network().map_err(CliError::invalid)?;
    let net = weights::load(path).map_err(CliError::invalid)?;
    if !net.same_architecture(&expected) {
        return Err(CliError::invalid(anyhow::anyhow!(
            "weights {} do not match the configured network (widths {:?} vs {:?})",
            path.display(),
            net.dims(),
            expected.dims()
        )));
    }
    Ok(net)
}

/// Where a training run put its outputs.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub output_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub weights: PathBuf,
    pub resolved_config: PathBuf,
}

/// Trains as configured and writes metrics, weights and the resolved config.
/// Progress lines go to stderr unless `quiet`.
pub fn run_training(cfg: &RunConfig, quiet: bool) -> CliResult<(TrainOutcome, TrainArtifacts)> {
    let net = cfg.validate().map_err(CliError::invalid)?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(CliError::runtime)?;
    let art = TrainArtifacts {
        metrics_csv: out.join("metrics.csv"),
        metrics_json: out.join("metrics.json"),
        weights: out.join(WEIGHTS_FILE),
        resolved_config: out.join(RESOLVED_CONFIG_FILE),
        output_dir: out,
    };
    let run = || -> anyhow::Result<TrainOutcome> {
        let resolved = serde_json::to_string_pretty(&cfg.resolved())?;
        std::fs::write(&art.resolved_config, resolved + "\n")?;
        let data = cfg.load_data()?;
        let epochs = cfg.optimizer.epochs;
        let outcome = train_with(
            net,
            &data.train,
            data.test.as_ref(),
            cfg.loss,
            &cfg.optimizer,
            &mut |r| {
                if !quiet {
                    let nz = r
                        .nonzero_fraction
                        .map(|v| format!(" nonzero={v:.4}"))
                        .unwrap_or_default();
                    let te = r
                        .test_error
                        .map(|v| format!(" test_error={v:.4}"))
                        .unwrap_or_default();
                    eprintln!(
                        "epoch {}/{epochs} j_train={:.6} train_error={:.4}{te}{nz} changed={} ({} ms)",
                        r.epoch, r.train_objective, r.train_error, r.changed, r.wall_ms
                    );
                }
            },
        )?;
        metrics::write_csv(&outcome.metrics, &art.metrics_csv)?;
        metrics::write_json(&outcome.metrics, &art.metrics_json)?;
        weights::save(&outcome.network, &art.weights)?;
        Ok(outcome)
    };
    let outcome = run().map_err(CliError::runtime)?;
    Ok((outcome, art))
}

pub fn cmd_train(config_path: &Path) -> CliResult<TrainArtifacts> {
    let (cfg, _) = load_config(config_path)?;
    let (_, art) = run_training(&cfg, false)?;
    eprintln!("wrote {}", art.output_dir.display());
    Ok(art)
}

fn split_data(cfg: &RunConfig, split: Split) -> CliResult<Dataset> {
    let data = cfg.load_data().map_err(CliError::runtime)?;
    match split {
        Split::Train => Ok(data.train),
        Split::Test => data.test.ok_or_else(|| {
            CliError::invalid(anyhow::anyhow!("the configured dataset has no test split"))
        }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub objective: f64,
    pub error_rate: f64,
}

/// Objective and error rate in inference mode.
pub fn cmd_eval(config_path: &Path, weights_path: &Path, split: Split) -> CliResult<EvalReport> {
    let (cfg, _) = load_config(config_path)?;
    let net = load_matching_weights(&cfg, weights_path)?;
    let ds = split_data(&cfg, split)?;
    let Evaluation {
        objective,
        error_rate,
    } = evaluate(&net, &ds, cfg.loss).map_err(|e| CliError::runtime(e.into()))?;
    Ok(EvalReport {
        split,
        samples: ds.len(),
        objective,
        error_rate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    /// Samples of the training split used as the batch.
    pub samples: usize,
    pub mode: Mode,
    pub pmp: PmpResidualReport,
    /// One report per random neighbour of the loaded weights.
    pub error_estimates: Vec<ErrorEstimateReport>,
}

/// Maximum-principle residuals of the loaded weights on the first `samples`
/// training samples, plus error-estimate terms against `perturbations`
/// random neighbours. Batch norm uses batch statistics so the batch forms
/// one control problem.
pub fn diagnose(
    cfg: &RunConfig,
    net: &Network,
    perturbations: usize,
    samples: usize,
) -> anyhow::Result<DiagnoseReport> {
    if samples == 0 {
        bail!("--samples must be positive");
    }
    let train = cfg.load_data()?.train.take(samples)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    let (x0, y) = train.gather(&idx)?;
    let loss = TerminalLoss::new(cfg.loss, y);
    let mode = Mode::Train;
    let pmp = pmp_residual(net, &x0, &loss, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
    let error_estimates = (0..perturbations)
        .map(|_| {
            let phi = random_neighbour(net, &mut rng)?;
            error_estimate_terms(net, &phi, &x0, &loss, mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DiagnoseReport {
        samples: train.len(),
        mode,
        pmp,
        error_estimates,
    })
}

/// Runs [`diagnose`] and writes the report to `diagnose.json` in the output directory.
pub fn cmd_diagnose(
    config_path: &Path,
    weights_path: &Path,
    perturbations: usize,
    samples: usize,
) -> CliResult<(DiagnoseReport, PathBuf)> {
    let (cfg, _) = load_config(config_path)?;
    let net = load_matching_weights(&cfg, weights_path)?;
    let report = diagnose(&cfg, &net, perturbations, samples).map_err(CliError::runtime)?;
    let out = cfg.output_dir();
    let path = out.join(DIAGNOSE_FILE);
    let write = || -> anyhow::Result<()> {
        std::fs::create_dir_all(&out)?;
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(())
    };
    write()
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::runtime)?;
    Ok((report, path))
}
