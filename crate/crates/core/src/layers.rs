//! Layers as discrete-time control steps `x_{t+1} = f_t(x_t, θ_t)`.
//!
//! Every layer maps a batch (one sample per row) forward, pulls a batch of
//! co-states back through `∇_x H_t`, and evaluates the batch-summed
//! Hamiltonian `Σ_s p_s·f_t(x_s, θ) − (1/S) L_t(x_s, θ)` for its own
//! parameters. Dense layers additionally expose the coefficient matrix
//! `M = Σ_s p_s x_sᵀ`, which is the exact linear coefficient of the summed
//! Hamiltonian in `θ`.
//!
//! Only ternary layers carry a regularizer, `L_t = λ‖θ‖²_F`, and it does not
//! depend on the state, so none of the pullbacks have a `∇_x L_t` term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};
use crate::linalg::{
    frobenius_norm_sq, inner, matmul, matmul_transpose_a, matmul_transpose_b, Matrix, Vector,
};

/// Whether batch normalization uses batch statistics or its running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
            Self::Sigmoid => sigmoid(x),
            Self::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// `σ'(x)`; ReLU uses the subgradient 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Self::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Self::Softplus => sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_weights(weights: &Matrix, domain: &'static str, allowed: &[f64]) -> Result<()> {
    for r in 0..weights.rows() {
        for (c, &v) in weights.row(r).iter().enumerate() {
            if !allowed.contains(&v) {
                return Err(Error::InvalidWeight {
                    domain,
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Fully connected layer `x -> θx` with `θ ∈ {−1, +1}^{out×in}` and no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryDense {
    weights: Matrix,
}

impl BinaryDense {
    pub fn new(weights: Matrix) -> Result<Self> {
        check_weights(&weights, "binary", &[-1.0, 1.0])?;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Matrix) -> Result<()> {
        self.weights
            .same_shape("BinaryDense::set_weights", &weights)?;
        *self = Self::new(weights)?;
        Ok(())
    }
}

/// Fully connected layer `x -> θx` with `θ ∈ {−1, 0, +1}^{out×in}` and the
/// sparsity regularizer `λ‖θ‖²_F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernaryDense {
    weights: Matrix,
    lambda: f64,
}

impl TernaryDense {
    pub fn new(weights: Matrix, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidNetwork(format!(
                "ternary lambda must be a non-negative finite number, got {lambda}"
            )));
        }
        check_weights(&weights, "ternary", &[-1.0, 0.0, 1.0])?;
        Ok(Self { weights, lambda })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_weights(&mut self, weights: Matrix) -> Result<()> {
        self.weights
            .same_shape("TernaryDense::set_weights", &weights)?;
        *self = Self::new(weights, self.lambda)?;
        Ok(())
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        *self = Self::new(self.weights.clone(), lambda)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatDense {
    weight: Matrix,
    bias: Option<Vector>,
}

impl FloatDense {
    pub fn new(weight: Matrix, bias: Option<Vector>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.dim() != weight.rows() {
                return Err(Error::ShapeMismatch {
                    op: "FloatDense::new",
                    left: weight.shape(),
                    right: Shape(b.dim(), 1),
                });
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Vector> {
        self.bias.as_ref()
    }

    /// `θ += k·Δθ`, `b += k·Δb`.
    pub fn apply_step(&mut self, k: f64, grad: &DenseGrad) -> Result<()> {
        self.weight.axpy(k, &grad.weight)?;
        match (&mut self.bias, &grad.bias) {
            (Some(b), Some(g)) => axpy_vec(b, k, g),
            (None, None) => Ok(()),
            _ => Err(Error::InvalidNetwork("bias presence mismatch".into())),
        }
    }
}

fn axpy_vec(v: &mut Vector, k: f64, g: &Vector) -> Result<()> {
    if v.dim() != g.dim() {
        return Err(Error::ShapeMismatch {
            op: "axpy",
            left: Shape(v.dim(), 1),
            right: Shape(g.dim(), 1),
        });
    }
    for (a, &b) in v.data_mut().iter_mut().zip(g.data()) {
        *a += k * b;
    }
    if v.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "axpy" })
    }
}

/// Per-feature batch normalization `y = γ (x − μ)/√(σ² + ε) + β`.
///
/// In [`Mode::Train`] the batch mean and (biased) variance are used, which
/// couples the samples of a batch; [`Mode::Eval`] uses the running averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    gamma: Vector,
    beta: Vector,
    running_mean: Vector,
    running_var: Vector,
    eps: f64,
    momentum: f64,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

struct BatchStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    /// Identity-initialized layer: `γ = 1`, `β = 0`, running mean 0, running variance 1.
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Vector::filled(dim, 1.0),
            beta: Vector::zeros(dim),
            running_mean: Vector::zeros(dim),
            running_var: Vector::filled(dim, 1.0),
            eps: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn from_parts(
        gamma: Vector,
        beta: Vector,
        running_mean: Vector,
        running_var: Vector,
        eps: f64,
        momentum: f64,
    ) -> Result<Self> {
        let d = gamma.dim();
        if beta.dim() != d || running_mean.dim() != d || running_var.dim() != d {
            return Err(Error::InvalidNetwork(
                "batch norm vectors must share one dimension".into(),
            ));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidNetwork(format!(
                "batch norm eps must be positive, got {eps}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidNetwork(format!(
                "batch norm momentum must be in [0, 1), got {momentum}"
            )));
        }
        if running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidNetwork(
                "batch norm running variance must be non-negative".into(),
            ));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            momentum,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.dim()
    }
    pub fn gamma(&self) -> &Vector {
        &self.gamma
    }
    pub fn beta(&self) -> &Vector {
        &self.beta
    }
    pub fn running_mean(&self) -> &Vector {
        &self.running_mean
    }
    pub fn running_var(&self) -> &Vector {
        &self.running_var
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn apply_step(&mut self, k: f64, grad: &BatchNormGrad) -> Result<()> {
        axpy_vec(&mut self.gamma, k, &grad.gamma)?;
        axpy_vec(&mut self.beta, k, &grad.beta)
    }

    #[cfg(test)]
    pub(crate) fn gamma_mut(&mut self) -> &mut [f64] {
        self.gamma.data_mut()
    }
    #[cfg(test)]
    pub(crate) fn beta_mut(&mut self) -> &mut [f64] {
        self.beta.data_mut()
    }

    /// Folds the statistics of `x` into the running averages:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, x: &Matrix) -> Result<()> {
        let stats = self.batch_stats(x)?;
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean.data_mut()[j] =
                m * self.running_mean.data()[j] + (1.0 - m) * stats.mean[j];
            self.running_var.data_mut()[j] =
                m * self.running_var.data()[j] + (1.0 - m) * stats.var[j];
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "BatchNorm",
                left: Shape(self.dim(), self.dim()),
                right: x.shape(),
            });
        }
        Ok(())
    }

    fn batch_stats(&self, x: &Matrix) -> Result<BatchStats> {
        self.check_input(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok(BatchStats { mean, inv_std, var })
    }

    fn stats(&self, x: &Matrix, mode: Mode) -> Result<BatchStats> {
        match mode {
            Mode::Train => self.batch_stats(x),
            Mode::Eval => {
                self.check_input(x)?;
                Ok(BatchStats {
                    mean: self.running_mean.data().to_vec(),
                    inv_std: self
                        .running_var
                        .data()
                        .iter()
                        .map(|&v| 1.0 / (v + self.eps).sqrt())
                        .collect(),
                    var: self.running_var.data().to_vec(),
                })
            }
        }
    }

    fn normalized(&self, x: &Matrix, stats: &BatchStats) -> Matrix {
        let d = self.dim();
        let mut out = Vec::with_capacity(x.rows() * d);
        for row in x.iter_rows() {
            out.extend((0..d).map(|j| (row[j] - stats.mean[j]) * stats.inv_std[j]));
        }
        Matrix::from_raw(x.rows(), d, out)
    }

    fn forward(&self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let stats = self.stats(x, mode)?;
        let xhat = self.normalized(x, &stats);
        let (g, b) = (self.gamma.data(), self.beta.data());
        let d = self.dim();
        let mut out = xhat.into_data();
        for row in out.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        Matrix::new(x.rows(), d, out)
    }

    fn pullback(&self, x: &Matrix, p_next: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(p_next)?;
        x.same_shape("BatchNorm::pullback", p_next)?;
        let stats = self.stats(x, mode)?;
        let d = self.dim();
        let n = x.rows();
        let g = self.gamma.data();
        let mut out = vec![0.0; n * d];
        match mode {
            Mode::Eval => {
                for (o_row, p_row) in out.chunks_exact_mut(d).zip(p_next.iter_rows()) {
                    for j in 0..d {
                        o_row[j] = g[j] * stats.inv_std[j] * p_row[j];
                    }
                }
            }
            Mode::Train => {
                // p_x = (γ/σ)(p − mean(p) − x̂·mean(p ⊙ x̂)) per feature.
                let xhat = self.normalized(x, &stats);
                let mut mean_p = vec![0.0; d];
                let mut mean_px = vec![0.0; d];
                for (p_row, xh_row) in p_next.iter_rows().zip(xhat.iter_rows()) {
                    for j in 0..d {
                        mean_p[j] += p_row[j];
                        mean_px[j] += p_row[j] * xh_row[j];
                    }
                }
                mean_p.iter_mut().for_each(|v| *v /= n as f64);
                mean_px.iter_mut().for_each(|v| *v /= n as f64);
                for ((o_row, p_row), xh_row) in out
                    .chunks_exact_mut(d)
                    .zip(p_next.iter_rows())
                    .zip(xhat.iter_rows())
                {
                    for j in 0..d {
                        o_row[j] = g[j]
                            * stats.inv_std[j]
                            * (p_row[j] - mean_p[j] - xh_row[j] * mean_px[j]);
                    }
                }
            }
        }
        Matrix::new(n, d, out)
    }

    fn grad(&self, x: &Matrix, p_next: &Matrix, mode: Mode) -> Result<BatchNormGrad> {
        self.check_input(p_next)?;
        x.same_shape("BatchNorm::grad", p_next)?;
        let stats = self.stats(x, mode)?;
        let xhat = self.normalized(x, &stats);
        let d = self.dim();
        let mut gamma = vec![0.0; d];
        let mut beta = vec![0.0; d];
        for (p_row, xh_row) in p_next.iter_rows().zip(xhat.iter_rows()) {
            for j in 0..d {
                gamma[j] += p_row[j] * xh_row[j];
                beta[j] += p_row[j];
            }
        }
        Ok(BatchNormGrad {
            gamma: Vector::new(gamma)?,
            beta: Vector::new(beta)?,
        })
    }

    /// Diagonal of the per-sample Jacobian `∂y_s/∂x_s` for every sample,
    /// as a batch-shaped matrix.
    pub(crate) fn self_jacobian_diag(&self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let stats = self.stats(x, mode)?;
        let d = self.dim();
        let n = x.rows() as f64;
        let g = self.gamma.data();
        let mut out = Vec::with_capacity(x.rows() * d);
        match mode {
            Mode::Eval => {
                for _ in 0..x.rows() {
                    out.extend((0..d).map(|j| g[j] * stats.inv_std[j]));
                }
            }
            Mode::Train => {
                let xhat = self.normalized(x, &stats);
                for xh_row in xhat.iter_rows() {
                    out.extend((0..d).map(|j| {
                        g[j] * stats.inv_std[j] * (1.0 - 1.0 / n - xh_row[j] * xh_row[j] / n)
                    }));
                }
            }
        }
        Matrix::new(x.rows(), d, out)
    }
}

/// `∇_θ Σ_s H_t` for a fully connected float layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Option<Vector>,
}

/// `∇_θ Σ_s H_t` for a batch normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormGrad {
    pub gamma: Vector,
    pub beta: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamGrad {
    Dense(DenseGrad),
    BatchNorm(BatchNormGrad),
}

impl ParamGrad {
    pub fn norm_sq(&self) -> f64 {
        match self {
            Self::Dense(g) => {
                frobenius_norm_sq(&g.weight) + g.bias.as_ref().map_or(0.0, Vector::norm_sq)
            }
            Self::BatchNorm(g) => g.gamma.norm_sq() + g.beta.norm_sq(),
        }
    }

    /// All entries in a fixed order: weights (row-major) then bias, or γ then β.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Self::Dense(g) => {
                let mut v = g.weight.data().to_vec();
                if let Some(b) = &g.bias {
                    v.extend_from_slice(b.data());
                }
                v
            }
            Self::BatchNorm(g) => [g.gamma.data(), g.beta.data()].concat(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Binary(BinaryDense),
    Ternary(TernaryDense),
    Dense(FloatDense),
    Activation(ActivationKind),
    BatchNorm(BatchNorm),
}

/// `Σ_s p_s x_sᵀ` over a batch.
pub fn coefficient_matrix(xs: &Matrix, ps_next: &Matrix) -> Result<Matrix> {
    if xs.rows() != ps_next.rows() {
        return Err(Error::ShapeMismatch {
            op: "coefficient_matrix",
            left: xs.shape(),
            right: ps_next.shape(),
        });
    }
    matmul_transpose_a(ps_next, xs)
}

impl Layer {
    pub fn binary(weights: Matrix) -> Result<Self> {
        BinaryDense::new(weights).map(Self::Binary)
    }

    pub fn ternary(weights: Matrix, lambda: f64) -> Result<Self> {
        TernaryDense::new(weights, lambda).map(Self::Ternary)
    }

    pub fn dense(weight: Matrix, bias: Option<Vector>) -> Result<Self> {
        FloatDense::new(weight, bias).map(Self::Dense)
    }

    pub fn activation(kind: ActivationKind) -> Self {
        Self::Activation(kind)
    }

    pub fn batch_norm(dim: usize) -> Self {
        Self::BatchNorm(BatchNorm::new(dim))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Binary(_) => "binary",
            Self::Ternary(_) => "ternary",
            Self::Dense(_) => "dense",
            Self::Activation(_) => "activation",
            Self::BatchNorm(_) => "batch_norm",
        }
    }

    /// Weight matrix of a dense layer (`out × in`).
    pub fn dense_weights(&self) -> Option<&Matrix> {
        match self {
            Self::Binary(l) => Some(l.weights()),
            Self::Ternary(l) => Some(l.weights()),
            Self::Dense(l) => Some(l.weight()),
            _ => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Binary(_) | Self::Ternary(_))
    }

    pub fn is_float_trainable(&self) -> bool {
        matches!(self, Self::Dense(_) | Self::BatchNorm(_))
    }

    /// Input dimension, or `None` for layers that accept any width.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Self::Activation(_) => None,
            Self::BatchNorm(bn) => Some(bn.dim()),
            other => other.dense_weights().map(Matrix::cols),
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Self::Activation(_) => input_dim,
            Self::BatchNorm(bn) => bn.dim(),
            other => other.dense_weights().map_or(input_dim, Matrix::rows),
        }
    }

    /// Fraction of nonzero weights, for discrete layers.
    pub fn nonzero_fraction(&self) -> Option<f64> {
        match self {
            Self::Binary(l) => Some(nonzero_fraction(l.weights())),
            Self::Ternary(l) => Some(nonzero_fraction(l.weights())),
            _ => None,
        }
    }

    /// Per-sample regularizer `L_t(θ)`; it never depends on the state.
    pub fn regularizer(&self) -> f64 {
        match self {
            Self::Ternary(l) => l.lambda * frobenius_norm_sq(&l.weights),
            _ => 0.0,
        }
    }

    fn check_width(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if let Some(d) = self.input_dim() {
            if x.cols() != d {
                let w = self.dense_weights().map_or(Shape(d, d), Matrix::shape);
                return Err(Error::ShapeMismatch {
                    op,
                    left: w,
                    right: x.shape(),
                });
            }
        }
        Ok(())
    }

    /// `f_t` applied to every row of `x`.
    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_width("forward", x)?;
        match self {
            Self::Binary(l) => matmul_transpose_b(x, &l.weights),
            Self::Ternary(l) => matmul_transpose_b(x, &l.weights),
            Self::Dense(l) => {
                let mut out = matmul_transpose_b(x, &l.weight)?;
                if let Some(b) = &l.bias {
                    let d = out.cols();
                    for row in out.data_mut().chunks_exact_mut(d) {
                        for (o, &bj) in row.iter_mut().zip(b.data()) {
                            *o += bj;
                        }
                    }
                    if !out.data().iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { op: "forward" });
                    }
                }
                Ok(out)
            }
            Self::Activation(kind) => x.map(|v| kind.apply(v)),
            Self::BatchNorm(bn) => bn.forward(x, mode),
        }
    }

    /// `p_t = ∇_x H_t(x_t, p_{t+1}, θ_t)` for every sample.
    pub fn costate_pullback(&self, x: &Matrix, p_next: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_width("costate_pullback", x)?;
        let out_dim = self.output_dim(x.cols());
        if p_next.rows() != x.rows() || p_next.cols() != out_dim {
            return Err(Error::ShapeMismatch {
                op: "costate_pullback",
                left: Shape(x.rows(), out_dim),
                right: p_next.shape(),
            });
        }
        match self {
            Self::Binary(l) => matmul(p_next, &l.weights),
            Self::Ternary(l) => matmul(p_next, &l.weights),
            Self::Dense(l) => matmul(p_next, &l.weight),
            Self::Activation(kind) => x.zip_map(p_next, |xv, pv| kind.derivative(xv) * pv),
            Self::BatchNorm(bn) => bn.pullback(x, p_next, mode),
        }
    }

    /// `Σ_s [p_s·f_t(x_s, θ) − (1/S) L_t(x_s, θ)]` with `θ` taken from `self`.
    ///
    /// `sample_count` is the `S` of the objective; it is usually `xs.rows()`.
    pub fn hamiltonian_sum(
        &self,
        xs: &Matrix,
        ps_next: &Matrix,
        sample_count: usize,
        mode: Mode,
    ) -> Result<f64> {
        let fx = self.forward(xs, mode)?;
        fx.same_shape("hamiltonian_sum", ps_next)?;
        let coupling = inner(&fx, ps_next)?;
        let reg = xs.rows() as f64 / sample_count as f64 * self.regularizer();
        Ok(coupling - reg)
    }

    /// Exact `∇_θ Σ_s H_t` for float-parameterized layers.
    pub fn grad_theta_hamiltonian(
        &self,
        xs: &Matrix,
        ps_next: &Matrix,
        mode: Mode,
    ) -> Result<ParamGrad> {
        match self {
            Self::Dense(l) => {
                self.check_width("grad_theta_hamiltonian", xs)?;
                if ps_next.cols() != l.weight.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "grad_theta_hamiltonian",
                        left: l.weight.shape(),
                        right: ps_next.shape(),
                    });
                }
                let weight = coefficient_matrix(xs, ps_next)?;
                let bias = match &l.bias {
                    Some(_) => {
                        let mut sum = vec![0.0; ps_next.cols()];
                        for row in ps_next.iter_rows() {
                            for (s, &p) in sum.iter_mut().zip(row) {
                                *s += p;
                            }
                        }
                        Some(Vector::new(sum)?)
                    }
                    None => None,
                };
                Ok(ParamGrad::Dense(DenseGrad { weight, bias }))
            }
            Self::BatchNorm(bn) => bn.grad(xs, ps_next, mode).map(ParamGrad::BatchNorm),
            other => Err(Error::NotFloatLayer {
                kind: other.kind_name(),
            }),
        }
    }
}

pub(crate) fn nonzero_fraction(w: &Matrix) -> f64 {
    let nz = w.data().iter().filter(|&&v| v != 0.0).count();
    nz as f64 / w.data().len() as f64
}

/// The control system `f_0, …, f_{T−1}` with state widths `d_0, …, d_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidNetwork(
                "input dimension must be positive".into(),
            ));
        }
        if layers.is_empty() {
            return Err(Error::InvalidNetwork(
                "a network needs at least one layer".into(),
            ));
        }
        let mut d = input_dim;
        for (t, layer) in layers.iter().enumerate() {
            if let Some(expected) = layer.input_dim() {
                if expected != d {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {t} ({}) expects width {expected} but receives {d}",
                        layer.kind_name()
                    )));
                }
            }
            d = layer.output_dim(d);
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.dims().last().expect("non-empty")
    }

    /// Number of layers `T`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `d_0, …, d_T`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        let mut d = self.input_dim;
        dims.push(d);
        for layer in &self.layers {
            d = layer.output_dim(d);
            dims.push(d);
        }
        dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, t: usize) -> &Layer {
        &self.layers[t]
    }

    /// Replaces layer `t`, keeping the dimension chain intact.
    pub fn replace_layer(&mut self, t: usize, layer: Layer) -> Result<()> {
        let mut layers = self.layers.clone();
        layers[t] = layer;
        *self = Self::new(self.input_dim, layers)?;
        Ok(())
    }

    /// Mutable access for in-place parameter updates that cannot change shapes.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn same_architecture(&self, other: &Network) -> bool {
        self.input_dim == other.input_dim
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                std::mem::discriminant(a) == std::mem::discriminant(b)
                    && a.input_dim() == b.input_dim()
                    && a.output_dim(self.input_dim) == b.output_dim(self.input_dim)
            })
    }

    /// Fraction of nonzero entries over all discrete layers, if any.
    pub fn nonzero_fraction(&self) -> Option<f64> {
        let (nz, total) = self
            .layers
            .iter()
            .filter(|l| l.is_discrete())
            .filter_map(Layer::dense_weights)
            .fold((0usize, 0usize), |(nz, tot), w| {
                (
                    nz + w.data().iter().filter(|&&v| v != 0.0).count(),
                    tot + w.data().len(),
                )
            });
        (total > 0).then(|| nz as f64 / total as f64)
    }

    /// Sum of the (state-independent) regularizers `Σ_t L_t(θ_t)`.
    pub fn regularization(&self) -> f64 {
        self.layers.iter().map(Layer::regularizer).sum()
    }
}

impl ParamGrad {
    /// A gradient of the same layout as `self` holding `values` (see [`ParamGrad::flatten`]).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        let expected = self.flatten().len();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "ParamGrad::with_values",
                left: Shape(expected, 1),
                right: Shape(values.len(), 1),
            });
        }
        Ok(match self {
            Self::Dense(g) => {
                let n = g.weight.data().len();
                let weight = Matrix::new(g.weight.rows(), g.weight.cols(), values[..n].to_vec())?;
                let bias = match &g.bias {
                    Some(_) => Some(Vector::new(values[n..].to_vec())?),
                    None => None,
                };
                Self::Dense(DenseGrad { weight, bias })
            }
            Self::BatchNorm(g) => {
                let d = g.gamma.dim();
                Self::BatchNorm(BatchNormGrad {
                    gamma: Vector::new(values[..d].to_vec())?,
                    beta: Vector::new(values[d..].to_vec())?,
                })
            }
        })
    }
}

impl Layer {
    /// Current float parameters in gradient layout, for float layers.
    pub fn params(&self) -> Option<ParamGrad> {
        match self {
            Self::Dense(l) => Some(ParamGrad::Dense(DenseGrad {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })),
            Self::BatchNorm(bn) => Some(ParamGrad::BatchNorm(BatchNormGrad {
                gamma: bn.gamma.clone(),
                beta: bn.beta.clone(),
            })),
            _ => None,
        }
    }

    /// `θ += k·Δθ` for float-parameterized layers.
    pub fn apply_param_step(&mut self, k: f64, step: &ParamGrad) -> Result<()> {
        match (self, step) {
            (Self::Dense(l), ParamGrad::Dense(g)) => l.apply_step(k, g),
            (Self::BatchNorm(l), ParamGrad::BatchNorm(g)) => l.apply_step(k, g),
            (other, _) => Err(Error::NotFloatLayer {
                kind: other.kind_name(),
            }),
        }
    }
}

fn default_lambda() -> f64 {
    1e-7
}

/// Declarative description of one layer; output widths are given, input
/// widths follow from the preceding layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Binary {
        out: usize,
    },
    Ternary {
        out: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Dense {
        out: usize,
        #[serde(default)]
        bias: bool,
    },
    Activation {
        kind: ActivationKind,
    },
    BatchNorm,
}

/// Which discrete layer type a fully connected stack uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightDomain {
    Binary,
    Ternary { lambda: f64 },
}

impl LayerSpec {
    /// Fully connected stack with batch normalization after every affine map
    /// and ReLU between blocks: `[W, BN, ReLU, …, W, BN]`.
    pub fn fully_connected(domain: WeightDomain, widths: &[usize]) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for (i, &out) in widths.iter().enumerate() {
            specs.push(match domain {
                WeightDomain::Binary => LayerSpec::Binary { out },
                WeightDomain::Ternary { lambda } => LayerSpec::Ternary { out, lambda },
            });
            specs.push(LayerSpec::BatchNorm);
            if i + 1 < widths.len() {
                specs.push(LayerSpec::Activation {
                    kind: ActivationKind::Relu,
                });
            }
        }
        specs
    }
}

/// Builds a network from specs with seeded initialization: discrete weights
/// uniform on `{±1}`, float weights `N(0, 1/fan_in)`, zero biases, identity
/// batch normalization.
pub fn build_network(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Network> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut width = input_dim;
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut signs = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            Matrix::new(rows, cols, data)
        };
        let layer = match *spec {
            LayerSpec::Binary { out } => Layer::binary(signs(out, width)?)?,
            LayerSpec::Ternary { out, lambda } => Layer::ternary(signs(out, width)?, lambda)?,
            LayerSpec::Dense { out, bias } => {
                let sd = (width as f64).recip().sqrt();
                let data = (0..out * width)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer::dense(
                    Matrix::new(out, width, data)?,
                    bias.then(|| Vector::zeros(out)),
                )?
            }
            LayerSpec::Activation { kind } => Layer::activation(kind),
            LayerSpec::BatchNorm => Layer::batch_norm(width),
        };
        width = layer.output_dim(width);
        layers.push(layer);
    }
    Network::new(input_dim, layers)
}
