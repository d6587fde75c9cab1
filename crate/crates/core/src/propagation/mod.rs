//! Whole-network state and co-state passes.
//!
//! The forward pass records `x_{s,t}` for `t = 0..=T`. The backward pass starts
//! from `p_{s,T} = −(1/S)∇Φ_s(x_{s,T})` and applies each layer's pullback, so
//! `p_{s,t}` ends up as `−(1/S)` times the total derivative of `Φ_s` with
//! respect to `x_{s,t}`.

mod loss;

pub use loss::{argmax_first, LossKind, Targets, TerminalLoss};

use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    mode: Mode,
    states: Vec<Matrix>,
    costates: Vec<Option<Matrix>>,
}

impl Trajectory {
    /// Batch size `S`.
    pub fn sample_count(&self) -> usize {
        self.states[0].rows()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `x_{·,t}` for `t = 0..=T`.
    pub fn states(&self) -> &[Matrix] {
        &self.states
    }

    pub fn state(&self, t: usize) -> &Matrix {
        &self.states[t]
    }

    pub fn output(&self) -> &Matrix {
        self.states
            .last()
            .expect("trajectory has at least two states")
    }

    /// `p_{·,t}`, if the backward pass reached layer `t`.
    pub fn costate(&self, t: usize) -> Option<&Matrix> {
        self.costates[t].as_ref()
    }

    pub fn costate_or_err(&self, t: usize) -> Result<&Matrix> {
        self.costate(t).ok_or(Error::MissingCostates(t))
    }

    pub fn has_costates(&self) -> bool {
        self.costates.iter().all(Option::is_some)
    }
}

/// Propagates `x0` through every layer.
pub fn forward_pass(net: &Network, x0: &Matrix, mode: Mode) -> Result<Trajectory> {
    if x0.cols() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward_pass",
            left: crate::error::Shape(x0.rows(), net.input_dim()),
            right: x0.shape(),
        });
    }
    let mut states = Vec::with_capacity(net.depth() + 1);
    states.push(x0.clone());
    for layer in net.layers() {
        let next = layer.forward(states.last().expect("non-empty"), mode)?;
        states.push(next);
    }
    Ok(Trajectory {
        mode,
        costates: vec![None; states.len()],
        states,
    })
}

/// Fills every co-state `p_{·,T}, …, p_{·,0}`.
pub fn backward_pass(net: &Network, traj: &mut Trajectory, loss: &TerminalLoss) -> Result<()> {
    backward_pass_to(net, traj, loss, 0)
}

/// Fills co-states `p_{·,t}` for `t = T` down to `first`.
///
/// Training only needs `p_{·,1}, …, p_{·,T}`; skipping `p_{·,0}` avoids the
/// most expensive pullback when the input layer is wide.
pub fn backward_pass_to(
    net: &Network,
    traj: &mut Trajectory,
    loss: &TerminalLoss,
    first: usize,
) -> Result<()> {
    let depth = net.depth();
    if traj.states.len() != depth + 1 {
        return Err(Error::InvalidNetwork(format!(
            "trajectory has {} states for a {depth}-layer network",
            traj.states.len()
        )));
    }
    let s = traj.sample_count() as f64;
    let terminal = loss.gradients(traj.output())?.scale(-1.0 / s)?;
    traj.costates[depth] = Some(terminal);
    for t in (first..depth).rev() {
        let p_next = traj.costates[t + 1].as_ref().expect("filled above");
        let p = net
            .layer(t)
            .costate_pullback(&traj.states[t], p_next, traj.mode)?;
        traj.costates[t] = Some(p);
    }
    Ok(())
}

/// Forward then backward pass.
pub fn full_pass(
    net: &Network,
    x0: &Matrix,
    loss: &TerminalLoss,
    mode: Mode,
) -> Result<Trajectory> {
    let mut traj = forward_pass(net, x0, mode)?;
    backward_pass(net, &mut traj, loss)?;
    Ok(traj)
}

/// `J = (1/S)Σ_s Φ_s(x_{s,T}) + Σ_t L_t(θ_t)` from an existing forward pass.
///
/// The regularizers do not depend on the state, so the `(1/S)Σ_s` in front
/// of them collapses.
pub fn objective_from_trajectory(
    net: &Network,
    traj: &Trajectory,
    loss: &TerminalLoss,
) -> Result<f64> {
    let values = loss.values(traj.output())?;
    let terminal = values.iter().sum::<f64>() / values.len() as f64;
    Ok(terminal + net.regularization())
}

pub fn objective(net: &Network, x0: &Matrix, loss: &TerminalLoss, mode: Mode) -> Result<f64> {
    let traj = forward_pass(net, x0, mode)?;
    objective_from_trajectory(net, &traj, loss)
}
