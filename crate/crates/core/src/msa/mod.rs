//! Method of successive approximations: alternate a forward state pass, a
//! backward co-state pass and a layer-wise maximization of the Hamiltonian.
//!
//! [`basic_msa_step`] maximizes each layer's summed Hamiltonian exactly.
//! [`msa_step`] is the stabilized minibatch variant used by [`train`]: a
//! moving average of the coefficient matrices, a proximal penalty set by a
//! heuristic, and Adam (or a Hamiltonian ascent step) for float layers.

mod adam;
mod updates;

pub use adam::{Adam, AdamConfig};
pub use updates::{binary_update, rho_from_heuristic, ternary_update, update_moving_average};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{minibatch_indices, Dataset};
use crate::error::{Error, Result};
use crate::layers::{coefficient_matrix, Layer, Mode, Network};
use crate::linalg::Matrix;
use crate::propagation::{
    backward_pass_to, forward_pass, objective_from_trajectory, LossKind, TerminalLoss, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Exact layer-wise argmax, no proximal term, no averaging.
    BasicMsa,
    BinaryMsa,
    TernaryMsa,
    /// `θ ← θ + η ∇_θ Σ_s H` on float layers.
    GradientMsa,
}

/// How the proximal coefficient is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum RhoRule {
    /// A fixed fraction of the largest `|M̄|` entry that disagrees with `θ`.
    Heuristic {
        fraction: f64,
    },
    Constant {
        value: f64,
    },
}

/// Hyperparameters of [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsaConfig {
    pub algorithm: Algorithm,
    /// `None` selects the heuristic with fraction 0.5 (binary) or 0.25 (ternary).
    pub rho: Option<RhoRule>,
    pub alpha0: f64,
    pub alpha_decay: f64,
    /// Steps between decays of `1 − α`; `None` means once per epoch.
    pub alpha_decay_every: Option<u64>,
    pub eta: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self::new(Algorithm::BinaryMsa)
    }
}

impl MsaConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            rho: None,
            alpha0: 0.999,
            alpha_decay: 0.5,
            alpha_decay_every: None,
            eta: 0.1,
            adam: AdamConfig::default(),
            batch_size: 100,
            epochs: 1,
            seed: 0,
        }
    }

    pub fn rho_rule(&self) -> RhoRule {
        self.rho.unwrap_or(RhoRule::Heuristic {
            fraction: match self.algorithm {
                Algorithm::TernaryMsa => 0.25,
                _ => 0.5,
            },
        })
    }

    /// `α_k = 1 − (1 − α₀)·γ^⌊k/K⌋`.
    pub fn alpha_at(&self, step: u64, steps_per_epoch: u64) -> f64 {
        let every = self.alpha_decay_every.unwrap_or(steps_per_epoch).max(1);
        let decays = i32::try_from(step / every).unwrap_or(i32::MAX);
        1.0 - (1.0 - self.alpha0) * self.alpha_decay.powi(decays)
    }

    /// Checks the hyperparameters and that `net` only has layers `algorithm` can train.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.alpha0) {
            return bad(format!("alpha0 must lie in [0, 1), got {}", self.alpha0));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return bad(format!(
                "alpha_decay must lie in (0, 1], got {}",
                self.alpha_decay
            ));
        }
        if self.alpha_decay_every == Some(0) {
            return bad("alpha_decay_every must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        let a = self.adam;
        if !(a.lr > 0.0
            && a.eps > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2))
        {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        match self.rho_rule() {
            RhoRule::Heuristic { fraction: v } | RhoRule::Constant { value: v } => {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("rho setting must be finite and >= 0, got {v}"));
                }
            }
        }
        for (t, layer) in net.layers().iter().enumerate() {
            let allowed = match (self.algorithm, layer) {
                (_, Layer::Activation(_)) => true,
                (Algorithm::BasicMsa, l) => l.is_discrete(),
                (Algorithm::BinaryMsa, l) => !matches!(l, Layer::Ternary(_)),
                (Algorithm::TernaryMsa, l) => !matches!(l, Layer::Binary(_)),
                (Algorithm::GradientMsa, l) => !l.is_discrete(),
            };
            if !allowed {
                return bad(format!(
                    "layer {t} ({}) cannot be trained by {:?}",
                    layer.kind_name(),
                    self.algorithm
                ));
            }
        }
        Ok(())
    }
}

/// Maximizes one layer's summed Hamiltonian `Σ_s H_t(x_{s,t}, p_{s,t+1}, θ)`.
pub trait HamiltonianMaximizer {
    fn maximize(
        &self,
        index: usize,
        layer: &Layer,
        xs: &Matrix,
        ps_next: &Matrix,
        sample_count: usize,
    ) -> Result<Layer>;
}

/// Closed-form argmax for binary and ternary dense layers.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactArgmax;

impl HamiltonianMaximizer for ExactArgmax {
    fn maximize(
        &self,
        index: usize,
        layer: &Layer,
        xs: &Matrix,
        ps_next: &Matrix,
        sample_count: usize,
    ) -> Result<Layer> {
        match layer {
            Layer::Binary(l) => {
                let m = coefficient_matrix(xs, ps_next)?;
                Layer::binary(binary_update(l.weights(), &m, 0.0)?)
            }
            Layer::Ternary(l) => {
                let m = coefficient_matrix(xs, ps_next)?;
                let lambda = l.lambda() * xs.rows() as f64 / sample_count as f64;
                Layer::ternary(ternary_update(l.weights(), &m, 0.0, lambda)?, l.lambda())
            }
            other => Err(Error::UnsupportedLayer {
                op: "exact Hamiltonian argmax",
                index,
                kind: other.kind_name(),
            }),
        }
    }
}

fn batch_trajectory(net: &Network, x0: &Matrix, loss: &TerminalLoss) -> Result<Trajectory> {
    let mut traj = forward_pass(net, x0, Mode::Train)?;
    backward_pass_to(net, &mut traj, loss, 1)?;
    Ok(traj)
}

/// One iteration of the unregularized method: every parameterized layer is
/// replaced by `maximizer`'s choice, all computed from the same trajectory.
pub fn basic_msa_step(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    maximizer: &dyn HamiltonianMaximizer,
) -> Result<Network> {
    let traj = batch_trajectory(net, x0, loss)?;
    let mut next = net.clone();
    for (t, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::Activation(_)) {
            continue;
        }
        let ps = traj.costate_or_err(t + 1)?;
        let new = maximizer.maximize(t, layer, traj.state(t), ps, traj.sample_count())?;
        next.replace_layer(t, new)?;
    }
    Ok(next)
}

/// One ascent step `θ_t ← θ_t + η ∇_θ Σ_s H_t` on every float layer.
///
/// Since `∇_θ Σ_s H_t = −∇_{θ_t} J`, this is a gradient descent step.
pub fn gradient_msa_step(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    eta: f64,
) -> Result<Network> {
    if let Some((index, l)) = net
        .layers()
        .iter()
        .enumerate()
        .find(|(_, l)| l.is_discrete())
    {
        return Err(Error::UnsupportedLayer {
            op: "gradient MSA",
            index,
            kind: l.kind_name(),
        });
    }
    let traj = batch_trajectory(net, x0, loss)?;
    let mut next = net.clone();
    for (t, layer) in next.layers_mut().iter_mut().enumerate() {
        if layer.is_float_trainable() {
            let g = layer.grad_theta_hamiltonian(
                traj.state(t),
                traj.costate_or_err(t + 1)?,
                Mode::Train,
            )?;
            layer.apply_param_step(eta, &g)?;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
struct LayerState {
    mbar: Option<Matrix>,
    adam: Option<Adam>,
}

/// Optimizer memory carried across minibatches.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaState {
    step: u64,
    steps_per_epoch: u64,
    layers: Vec<LayerState>,
}

impl MsaState {
    pub fn new(net: &Network, steps_per_epoch: u64) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerState {
                mbar: l.is_discrete().then(|| {
                    let w = l.dense_weights().expect("discrete layers are dense");
                    Matrix::zeros(w.rows(), w.cols())
                }),
                adam: None,
            })
            .collect();
        Self {
            step: 0,
            steps_per_epoch: steps_per_epoch.max(1),
            layers,
        }
    }

    /// Number of completed steps `k`.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// The moving average `M̄_t` of layer `t`, for discrete layers.
    pub fn moving_average(&self, t: usize) -> Option<&Matrix> {
        self.layers.get(t).and_then(|s| s.mbar.as_ref())
    }
}

/// What one [`msa_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Minibatch objective before the update.
    pub objective: f64,
    /// Number of discrete weight entries that changed.
    pub changed: usize,
    /// Proximal coefficient used per layer (`None` for non-discrete layers).
    pub rho: Vec<Option<f64>>,
}

/// One minibatch iteration of `config.algorithm`, updating `net` in place.
pub fn msa_step(
    net: &mut Network,
    state: &mut MsaState,
    config: &MsaConfig,
    x0: &Matrix,
    loss: &TerminalLoss,
) -> Result<StepReport> {
    let traj = batch_trajectory(net, x0, loss)?;
    let objective = objective_from_trajectory(net, &traj, loss)?;
    let alpha = match config.algorithm {
        Algorithm::BasicMsa => 0.0,
        _ => config.alpha_at(state.step, state.steps_per_epoch),
    };
    let rule = match config.algorithm {
        Algorithm::BasicMsa => RhoRule::Constant { value: 0.0 },
        _ => config.rho_rule(),
    };
    let mut changed = 0;
    let mut rhos = vec![None; net.depth()];
    for (t, layer) in net.layers_mut().iter_mut().enumerate() {
        let xs = traj.state(t);
        if matches!(layer, Layer::Activation(_)) {
            continue;
        }
        let ps = traj.costate_or_err(t + 1)?;
        let ls = &mut state.layers[t];
        match layer {
            Layer::Binary(_) | Layer::Ternary(_) => {
                let m = coefficient_matrix(xs, ps)?;
                let mbar =
                    update_moving_average(ls.mbar.as_ref().expect("discrete state"), &m, alpha)?;
                let old = layer.dense_weights().expect("dense").clone();
                let h = match rule {
                    RhoRule::Heuristic { fraction } => rho_from_heuristic(&mbar, &old, fraction)?,
                    RhoRule::Constant { value } => value,
                };
                let new = match layer {
                    Layer::Binary(l) => {
                        // `h` is the flip threshold, i.e. twice the proximal coefficient.
                        let w = binary_update(&old, &mbar, h / 2.0)?;
                        l.set_weights(w.clone())?;
                        w
                    }
                    Layer::Ternary(l) => {
                        let w = ternary_update(&old, &mbar, h, l.lambda())?;
                        l.set_weights(w.clone())?;
                        w
                    }
                    _ => unreachable!(),
                };
                changed += old
                    .data()
                    .iter()
                    .zip(new.data())
                    .filter(|(a, b)| a != b)
                    .count();
                rhos[t] = Some(h);
                ls.mbar = Some(mbar);
            }
            Layer::Dense(_) | Layer::BatchNorm(_) => {
                let g = layer.grad_theta_hamiltonian(xs, ps, Mode::Train)?;
                match config.algorithm {
                    Algorithm::GradientMsa => layer.apply_param_step(config.eta, &g)?,
                    _ => {
                        let flat = g.flatten();
                        let adam = ls
                            .adam
                            .get_or_insert_with(|| Adam::new(config.adam, flat.len()));
                        let descent: Vec<f64> = flat.iter().map(|v| -v).collect();
                        let delta = g.with_values(&adam.step(&descent))?;
                        layer.apply_param_step(1.0, &delta)?;
                    }
                }
                if let Layer::BatchNorm(bn) = layer {
                    bn.update_running_stats(xs)?;
                }
            }
            Layer::Activation(_) => {}
        }
    }
    state.step += 1;
    Ok(StepReport {
        objective,
        changed,
        rho: rhos,
    })
}

/// Objective and error rate of `net` on a dataset, in evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub error_rate: f64,
}

const EVAL_CHUNK: usize = 2000;

pub fn evaluate(net: &Network, ds: &Dataset, kind: LossKind) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch { op: "evaluate" });
    }
    let mut phi = 0.0;
    let mut wrong = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk)?;
        let loss = TerminalLoss::new(kind, y);
        let traj = forward_pass(net, &x, Mode::Eval)?;
        phi += loss.values(traj.output())?.iter().sum::<f64>();
        wrong += loss.error_rate(traj.output())? * chunk.len() as f64;
    }
    let n = ds.len() as f64;
    Ok(Evaluation {
        objective: phi / n + net.regularization(),
        error_rate: wrong / n,
    })
}

/// Training record written at the end of each epoch (epochs count from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_objective: f64,
    pub train_error: f64,
    pub test_objective: Option<f64>,
    pub test_error: Option<f64>,
    /// Fraction of nonzero discrete weights over all discrete layers.
    pub nonzero_fraction: Option<f64>,
    /// The same fraction per discrete layer, in layer order.
    pub layer_nonzero: Vec<f64>,
    /// Discrete entries changed during the epoch.
    pub changed: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<MetricsRecord>,
}

pub fn train(
    net: Network,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    kind: LossKind,
    config: &MsaConfig,
) -> Result<TrainOutcome> {
    train_with(net, train_set, test_set, kind, config, &mut |_| {})
}

/// [`train`], calling `observer` after each metrics record is produced.
pub fn train_with(
    mut net: Network,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    kind: LossKind,
    config: &MsaConfig,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate(&net)?;
    if train_set.is_empty() {
        return Err(Error::EmptyBatch { op: "train" });
    }
    let start = Instant::now();
    let has_bn = net
        .layers()
        .iter()
        .any(|l| matches!(l, Layer::BatchNorm(_)));
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size) as u64;
    let mut state = MsaState::new(&net, steps_per_epoch);
    let mut metrics = Vec::with_capacity(config.epochs);

    let mut record =
        |net: &Network, epoch: usize, step: u64, changed: usize| -> Result<MetricsRecord> {
            let tr = evaluate(net, train_set, kind)?;
            let te = test_set.map(|ds| evaluate(net, ds, kind)).transpose()?;
            let rec = MetricsRecord {
                epoch,
                step,
                train_objective: tr.objective,
                train_error: tr.error_rate,
                test_objective: te.map(|e| e.objective),
                test_error: te.map(|e| e.error_rate),
                nonzero_fraction: net.nonzero_fraction(),
                layer_nonzero: net
                    .layers()
                    .iter()
                    .filter_map(Layer::nonzero_fraction)
                    .collect(),
                changed,
                wall_ms: u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX),
            };
            observer(&rec);
            Ok(rec)
        };

    for epoch in 1..=config.epochs {
        let mut changed = 0;
        for batch in minibatch_indices(
            train_set.len(),
            config.batch_size,
            config.seed,
            epoch as u64,
        ) {
            // Batch statistics are undefined for a single sample.
            if has_bn && batch.len() < 2 {
                continue;
            }
            let (x, y) = train_set.gather(&batch)?;
            let loss = TerminalLoss::new(kind, y);
            changed += msa_step(&mut net, &mut state, config, &x, &loss)?.changed;
        }
        metrics.push(record(&net, epoch, state.step(), changed)?);
    }
    Ok(TrainOutcome {
        network: net,
        metrics,
    })
}
