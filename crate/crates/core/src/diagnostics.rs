//! Numerical checks of the control-theoretic statements behind the training
//! methods: the error estimate for one MSA update, residuals of the maximum
//! principle, agreement of the Hamiltonian ascent step with back-propagation,
//! and the discrete Gronwall inequality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{coefficient_matrix, ActivationKind, Layer, Mode, Network};
use crate::linalg::{frobenius_norm_sq, inner, Matrix};
use crate::msa::gradient_msa_step;
use crate::propagation::{
    backward_pass, backward_pass_to, forward_pass, objective, objective_from_trajectory,
    TerminalLoss,
};

/// Central-difference step used by every finite-difference check.
pub const FD_STEP: f64 = 1e-5;

/// The terms of the error estimate for moving from `θ` to `φ`, all evaluated
/// along the `θ` trajectory. The penalties omit the unknown constant `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorEstimateReport {
    /// `J(φ) − J(θ)`.
    pub delta_j: f64,
    /// `Σ_t Σ_s [H_t(x^θ, p^θ, φ_t) − H_t(x^θ, p^θ, θ_t)]`.
    pub hamiltonian_gain: f64,
    /// `(1/S) Σ_t Σ_s ‖f_t(x^θ, φ_t) − f_t(x^θ, θ_t)‖²`.
    pub penalty_f: f64,
    /// `(1/S) Σ_t Σ_s ‖∇_x f_t(x^θ, φ_t) − ∇_x f_t(x^θ, θ_t)‖²_F`.
    pub penalty_grad_f: f64,
    /// The same for `∇_x L_t`; the regularizers here never depend on `x`.
    pub penalty_grad_l: f64,
}

impl ErrorEstimateReport {
    pub fn penalty_sum(&self) -> f64 {
        self.penalty_f + self.penalty_grad_f + self.penalty_grad_l
    }

    /// Smallest `C` for which this pair satisfies the estimate, if any.
    ///
    /// `None` when the penalties vanish and `J(φ) − J(θ) + gain > 0`.
    pub fn required_constant(&self) -> Option<f64> {
        let excess = self.delta_j + self.hamiltonian_gain;
        let pen = self.penalty_sum();
        if pen > 0.0 {
            Some((excess / pen).max(0.0))
        } else if excess <= self.slack() {
            Some(0.0)
        } else {
            None
        }
    }

    /// `J(φ) − J(θ) ≤ −gain + C·penalties`, up to rounding.
    pub fn holds_with(&self, c: f64) -> bool {
        self.delta_j <= -self.hamiltonian_gain + c * self.penalty_sum() + self.slack()
    }

    fn slack(&self) -> f64 {
        1e-12 * (1.0 + self.delta_j.abs() + self.hamiltonian_gain.abs())
    }
}

fn check_pair(theta: &Network, phi: &Network) -> Result<()> {
    if theta.same_architecture(phi) {
        Ok(())
    } else {
        Err(Error::InvalidNetwork(
            "parameter sets have different architectures".into(),
        ))
    }
}

/// `Σ_s ‖∇_x f(x_s, φ) − ∇_x f(x_s, θ)‖²_F` for one layer.
///
/// Dense maps have the state-independent Jacobian `θ`. Batch normalization
/// uses the diagonal per-sample Jacobian.
fn jacobian_gap_sq(theta: &Layer, phi: &Layer, xs: &Matrix, mode: Mode) -> Result<f64> {
    match (theta, phi) {
        (Layer::BatchNorm(a), Layer::BatchNorm(b)) => {
            let ja = a.self_jacobian_diag(xs, mode)?;
            let jb = b.self_jacobian_diag(xs, mode)?;
            Ok(frobenius_norm_sq(&jb.sub(&ja)?))
        }
        (Layer::Activation(_), Layer::Activation(_)) => Ok(0.0),
        (a, b) => match (a.dense_weights(), b.dense_weights()) {
            (Some(wa), Some(wb)) => Ok(xs.rows() as f64 * frobenius_norm_sq(&wb.sub(wa)?)),
            _ => Err(Error::InvalidNetwork(format!(
                "cannot compare {} and {} layers",
                a.kind_name(),
                b.kind_name()
            ))),
        },
    }
}

/// Evaluates every term of the error estimate for `θ → φ` on one batch.
pub fn error_estimate_terms(
    theta: &Network,
    phi: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    mode: Mode,
) -> Result<ErrorEstimateReport> {
    check_pair(theta, phi)?;
    let mut traj = forward_pass(theta, x0, mode)?;
    backward_pass_to(theta, &mut traj, loss, 1)?;
    let s = traj.sample_count();
    let mut gain = 0.0;
    let mut pen_f = 0.0;
    let mut pen_grad = 0.0;
    for t in 0..theta.depth() {
        let xs = traj.state(t);
        let ps = traj.costate_or_err(t + 1)?;
        let (lt, lp) = (theta.layer(t), phi.layer(t));
        gain += lp.hamiltonian_sum(xs, ps, s, mode)? - lt.hamiltonian_sum(xs, ps, s, mode)?;
        pen_f += frobenius_norm_sq(&lp.forward(xs, mode)?.sub(traj.state(t + 1))?);
        pen_grad += jacobian_gap_sq(lt, lp, xs, mode)?;
    }
    let j_theta = objective_from_trajectory(theta, &traj, loss)?;
    let j_phi = objective(phi, x0, loss, mode)?;
    Ok(ErrorEstimateReport {
        delta_j: j_phi - j_theta,
        hamiltonian_gain: gain,
        penalty_f: pen_f / s as f64,
        penalty_grad_f: pen_grad / s as f64,
        penalty_grad_l: 0.0,
    })
}

/// A random neighbour of `net`: Gaussian noise of standard deviation `scale`
/// on float parameters, and each discrete entry resampled to a different
/// admissible value with probability `flip_prob`.
pub fn perturb<R: Rng>(net: &Network, scale: f64, flip_prob: f64, rng: &mut R) -> Result<Network> {
    let mut out = net.clone();
    for layer in out.layers_mut() {
        match layer {
            Layer::Binary(l) => {
                let w = l.weights();
                let data = w
                    .data()
                    .iter()
                    .map(|&v| if rng.random_bool(flip_prob) { -v } else { v })
                    .collect();
                l.set_weights(Matrix::new(w.rows(), w.cols(), data)?)?;
            }
            Layer::Ternary(l) => {
                let w = l.weights();
                let data = w
                    .data()
                    .iter()
                    .map(|&v| {
                        if rng.random_bool(flip_prob) {
                            let others: Vec<f64> =
                                [-1.0, 0.0, 1.0].into_iter().filter(|&o| o != v).collect();
                            others[rng.random_range(0..2)]
                        } else {
                            v
                        }
                    })
                    .collect();
                l.set_weights(Matrix::new(w.rows(), w.cols(), data)?)?;
            }
            Layer::Dense(_) | Layer::BatchNorm(_) => {
                let p = layer.params().expect("float layer");
                let noise: Vec<f64> = (0..p.flatten().len())
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                layer.apply_param_step(1.0, &p.with_values(&noise)?)?;
            }
            Layer::Activation(_) => {}
        }
    }
    Ok(out)
}

/// `max(0, max_i (ΔJ_i + gain_i)/penalties_i)` over reports with positive penalties.
pub fn fit_error_constant(reports: &[ErrorEstimateReport]) -> f64 {
    reports
        .iter()
        .filter(|r| r.penalty_sum() > 0.0)
        .map(|r| (r.delta_j + r.hamiltonian_gain) / r.penalty_sum())
        .fold(0.0, f64::max)
}

/// Outcome of fitting `C*` on one set of perturbations and testing `2C*` on another.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedConstantCheck {
    pub c_star: f64,
    pub fit_draws: usize,
    pub test_draws: usize,
    /// Test pairs violating the estimate with `C = 2C*`.
    pub violations: usize,
    /// Test pairs with a negative penalty term (never expected).
    pub negative_penalties: usize,
}

impl FittedConstantCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.negative_penalties == 0
    }
}

/// A neighbour at a log-uniform noise scale in `[1e-3, 1)` and flip
/// probability in `[1e-3, 10^{-1/2})`.
pub fn random_neighbour(net: &Network, rng: &mut ChaCha8Rng) -> Result<Network> {
    let scale = 10f64.powf(rng.random_range(-3.0..0.0));
    let flip = 10f64.powf(rng.random_range(-3.0..-0.5));
    perturb(net, scale, flip, rng)
}

/// Fits `C*` over `fit_draws` random neighbours of `net`, then checks the
/// estimate with `C = 2C*` on `test_draws` fresh neighbours.
pub fn fitted_constant_check(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    mode: Mode,
    fit_draws: usize,
    test_draws: usize,
    seed: u64,
) -> Result<FittedConstantCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<ErrorEstimateReport> {
        let phi = random_neighbour(net, rng)?;
        error_estimate_terms(net, &phi, x0, loss, mode)
    };
    let fit: Vec<_> = (0..fit_draws)
        .map(|_| draw(&mut rng))
        .collect::<Result<_>>()?;
    let c_star = fit_error_constant(&fit);
    let test: Vec<_> = (0..test_draws)
        .map(|_| draw(&mut rng))
        .collect::<Result<_>>()?;
    Ok(FittedConstantCheck {
        c_star,
        fit_draws,
        test_draws,
        violations: test.iter().filter(|r| !r.holds_with(2.0 * c_star)).count(),
        negative_penalties: test
            .iter()
            .filter(|r| r.penalty_f < 0.0 || r.penalty_grad_f < 0.0 || r.penalty_grad_l < 0.0)
            .count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerResidual {
    pub index: usize,
    pub kind: String,
    /// `max_θ Σ_s H_t − Σ_s H_t(θ_t)` for discrete layers.
    pub hamiltonian_gap: Option<f64>,
    /// `‖∇_θ Σ_s H_t‖` for float layers.
    pub stationarity: Option<f64>,
    /// `max |M_ij|`; zero flags a layer on which the Hamiltonian is constant in `θ`.
    pub max_abs_coefficient: Option<f64>,
}

/// How far a network is from satisfying the maximum principle on a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmpResidualReport {
    pub layers: Vec<LayerResidual>,
    /// `max |x_{t+1} − f_t(x_t, θ_t)|`.
    pub state_residual: f64,
    /// `max |p_t − ∇_x H_t|`, including the terminal condition.
    pub costate_residual: f64,
}

impl PmpResidualReport {
    pub fn max_gap(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.hamiltonian_gap)
            .fold(0.0, f64::max)
    }
}

pub fn pmp_residual(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    mode: Mode,
) -> Result<PmpResidualReport> {
    let mut traj = forward_pass(net, x0, mode)?;
    backward_pass(net, &mut traj, loss)?;
    let s = traj.sample_count() as f64;

    let mut state_residual: f64 = 0.0;
    let mut costate_residual: f64 = 0.0;
    let terminal = loss.gradients(traj.output())?.scale(-1.0 / s)?;
    costate_residual =
        costate_residual.max(terminal.sub(traj.costate_or_err(net.depth())?)?.max_abs());

    let mut layers = Vec::new();
    for (t, layer) in net.layers().iter().enumerate() {
        let xs = traj.state(t);
        let ps = traj.costate_or_err(t + 1)?;
        state_residual =
            state_residual.max(layer.forward(xs, mode)?.sub(traj.state(t + 1))?.max_abs());
        let pulled = layer.costate_pullback(xs, ps, mode)?;
        costate_residual = costate_residual.max(pulled.sub(traj.costate_or_err(t)?)?.max_abs());

        let (gap, stationarity, max_m) = match layer {
            Layer::Binary(l) => {
                let m = coefficient_matrix(xs, ps)?;
                let best: f64 = m.data().iter().map(|v| v.abs()).sum();
                (
                    Some(best - inner(&m, l.weights())?),
                    None,
                    Some(m.max_abs()),
                )
            }
            Layer::Ternary(l) => {
                let m = coefficient_matrix(xs, ps)?;
                let lambda = l.lambda();
                let best: f64 = m.data().iter().map(|v| (v.abs() - lambda).max(0.0)).sum();
                let current = inner(&m, l.weights())? - lambda * frobenius_norm_sq(l.weights());
                (Some((best - current).max(0.0)), None, Some(m.max_abs()))
            }
            Layer::Dense(_) | Layer::BatchNorm(_) => {
                let g = layer.grad_theta_hamiltonian(xs, ps, mode)?;
                (None, Some(g.norm_sq().sqrt()), None)
            }
            Layer::Activation(_) => (None, None, None),
        };
        layers.push(LayerResidual {
            index: t,
            kind: layer.kind_name().to_string(),
            hamiltonian_gap: gap,
            stationarity,
            max_abs_coefficient: max_m,
        });
    }
    Ok(PmpResidualReport {
        layers,
        state_residual,
        costate_residual,
    })
}

/// Central-difference gradient of `J` with respect to the float parameters of
/// layer `t`, in [`crate::layers::ParamGrad::flatten`] order.
pub fn fd_param_gradient(
    net: &Network,
    t: usize,
    x0: &Matrix,
    loss: &TerminalLoss,
    mode: Mode,
) -> Result<Vec<f64>> {
    let template = net.layer(t).params().ok_or(Error::NotFloatLayer {
        kind: net.layer(t).kind_name(),
    })?;
    let n = template.flatten().len();
    let mut unit = vec![0.0; n];
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        unit[i] = 1.0;
        let e = template.with_values(&unit)?;
        unit[i] = 0.0;
        let mut plus = net.clone();
        plus.layers_mut()[t].apply_param_step(FD_STEP, &e)?;
        let mut minus = net.clone();
        minus.layers_mut()[t].apply_param_step(-FD_STEP, &e)?;
        let jp = objective(&plus, x0, loss, mode)?;
        let jm = objective(&minus, x0, loss, mode)?;
        grad.push((jp - jm) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// `‖a − b‖_∞ / ‖b‖_∞`, with `0/0 = 0`.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_deviation needs equal lengths");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the parameter change of one Hamiltonian ascent step with
/// `−η ∇J` from central differences; returns the relative deviation over all
/// float parameters.
pub fn backprop_equivalence_check(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    eta: f64,
) -> Result<f64> {
    for (index, layer) in net.layers().iter().enumerate() {
        if let Layer::Activation(ActivationKind::Relu) = layer {
            return Err(Error::UnsupportedLayer {
                op: "finite-difference equivalence check",
                index,
                kind: "relu activation",
            });
        }
    }
    let stepped = gradient_msa_step(net, x0, loss, eta)?;
    let mut delta = Vec::new();
    let mut expected = Vec::new();
    for t in 0..net.depth() {
        let (Some(before), Some(after)) = (net.layer(t).params(), stepped.layer(t).params()) else {
            continue;
        };
        delta.extend(
            after
                .flatten()
                .iter()
                .zip(before.flatten())
                .map(|(a, b)| a - b),
        );
        let g = fd_param_gradient(net, t, x0, loss, Mode::Train)?;
        expected.extend(g.iter().map(|v| -eta * v));
    }
    Ok(relative_deviation(&delta, &expected))
}

/// `max_t |p_t − (−∂J/∂x_t)|` over every state and sample, with the
/// derivative taken by central differences through the rest of the network.
pub fn costate_fd_check(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    mode: Mode,
) -> Result<f64> {
    let mut traj = forward_pass(net, x0, mode)?;
    backward_pass(net, &mut traj, loss)?;
    let terminal = |t: usize, x: &Matrix| -> Result<f64> {
        let mut state = x.clone();
        for layer in &net.layers()[t..] {
            state = layer.forward(&state, mode)?;
        }
        let v = loss.values(&state)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut worst: f64 = 0.0;
    for t in 0..=net.depth() {
        let x = traj.state(t);
        let p = traj.costate_or_err(t)?;
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let mut xp = x.clone();
                xp.set(r, c, x.get(r, c) + FD_STEP)?;
                let mut xm = x.clone();
                xm.set(r, c, x.get(r, c) - FD_STEP)?;
                let d = (terminal(t, &xp)? - terminal(t, &xm)?) / (2.0 * FD_STEP);
                worst = worst.max((p.get(r, c) + d).abs());
            }
        }
    }
    Ok(worst)
}

/// `u_0, …, u_T` with `u_{t+1} = K u_t + w_t`.
pub fn gronwall_sequence(k: f64, u0: f64, w: &[f64]) -> Vec<f64> {
    let mut u = Vec::with_capacity(w.len() + 1);
    u.push(u0);
    for &wt in w {
        let last = *u.last().expect("non-empty");
        u.push(k * last + wt);
    }
    u
}

/// `max(1, K^T)·(u_0 + Σ_t w_t)`.
pub fn gronwall_bound(k: f64, u0: f64, w: &[f64]) -> f64 {
    let amp = k.powi(i32::try_from(w.len()).unwrap_or(i32::MAX)).max(1.0);
    amp * (u0 + w.iter().sum::<f64>())
}

/// Whether every iterate of the recursion respects the Gronwall bound, up to
/// a rounding allowance proportional to the horizon.
///
/// # Panics
/// If `k`, `u0` or any `w_t` is negative or not finite.
pub fn gronwall_check(k: f64, u0: f64, w: &[f64]) -> bool {
    let ok = |v: f64| v.is_finite() && v >= 0.0;
    assert!(
        ok(k) && ok(u0) && w.iter().all(|&v| ok(v)),
        "inputs must be finite and non-negative"
    );
    let bound = gronwall_bound(k, u0, w);
    let allowance = 1.0 + 4.0 * (w.len() as f64 + 2.0) * f64::EPSILON;
    gronwall_sequence(k, u0, w)
        .iter()
        .all(|&u| u <= bound * allowance)
}
