use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `Φ(x) = ½‖x − y‖²`
    MeanSquare,
    /// `Φ(x) = Σ_j max(0, 1 − x_j y_j)²` with one-vs-rest `y ∈ {−1, +1}^d`
    SquaredHinge,
    /// `Φ(x) = −Σ_j y_j log softmax(x)_j`
    SoftmaxCrossEntropy,
}

/// Supervision for the terminal loss: class indices or explicit target rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Vectors(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes(c) => c.len(),
            Self::Vectors(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(match self {
            Self::Classes(c) => Self::Classes(indices.iter().map(|&i| c[i]).collect()),
            Self::Vectors(m) => Self::Vectors(m.select_rows(indices)?),
        })
    }
}

/// The per-sample terminal cost `Φ_s`, optionally multiplied by a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalLoss {
    kind: LossKind,
    targets: Targets,
    scale: f64,
}

impl TerminalLoss {
    pub fn new(kind: LossKind, targets: Targets) -> Self {
        Self {
            kind,
            targets,
            scale: 1.0,
        }
    }

    /// Multiplies every `Φ_s` by `k`.
    pub fn scaled(mut self, k: f64) -> Self {
        self.scale *= k;
        self
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            kind: self.kind,
            targets: self.targets.select(indices)?,
            scale: self.scale,
        })
    }

    fn check(&self, outputs: &Matrix) -> Result<()> {
        if outputs.rows() != self.targets.len() {
            return Err(Error::InvalidTargets(format!(
                "{} outputs but {} targets",
                outputs.rows(),
                self.targets.len()
            )));
        }
        match &self.targets {
            Targets::Classes(c) => {
                if let Some(&bad) = c.iter().find(|&&k| k >= outputs.cols()) {
                    return Err(Error::InvalidTargets(format!(
                        "class {bad} out of range for output width {}",
                        outputs.cols()
                    )));
                }
            }
            Targets::Vectors(y) => {
                if y.cols() != outputs.cols() {
                    return Err(Error::InvalidTargets(format!(
                        "target width {} differs from output width {}",
                        y.cols(),
                        outputs.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Target row `s` in the encoding this loss expects.
    fn target_row(&self, s: usize, width: usize) -> Vec<f64> {
        match &self.targets {
            Targets::Vectors(y) => y.row(s).to_vec(),
            Targets::Classes(c) => {
                let off = match self.kind {
                    LossKind::SquaredHinge => -1.0,
                    _ => 0.0,
                };
                (0..width)
                    .map(|j| if j == c[s] { 1.0 } else { off })
                    .collect()
            }
        }
    }

    /// `Φ_s(x_{s,T})` for every sample.
    pub fn values(&self, outputs: &Matrix) -> Result<Vec<f64>> {
        self.check(outputs)?;
        let d = outputs.cols();
        let vals: Vec<f64> = outputs
            .iter_rows()
            .enumerate()
            .map(|(s, x)| {
                let y = self.target_row(s, d);
                let raw = match self.kind {
                    LossKind::MeanSquare => {
                        0.5 * x
                            .iter()
                            .zip(&y)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    }
                    LossKind::SquaredHinge => x
                        .iter()
                        .zip(&y)
                        .map(|(a, b)| {
                            let m = (1.0 - a * b).max(0.0);
                            m * m
                        })
                        .sum(),
                    LossKind::SoftmaxCrossEntropy => {
                        let lse = log_sum_exp(x);
                        x.iter().zip(&y).map(|(a, b)| -b * (a - lse)).sum()
                    }
                };
                self.scale * raw
            })
            .collect();
        if vals.iter().all(|v| v.is_finite()) {
            Ok(vals)
        } else {
            Err(Error::NonFinite {
                op: "terminal loss",
            })
        }
    }

    /// `∇Φ_s(x_{s,T})`, one row per sample.
    pub fn gradients(&self, outputs: &Matrix) -> Result<Matrix> {
        self.check(outputs)?;
        let d = outputs.cols();
        let mut out = Vec::with_capacity(outputs.rows() * d);
        for (s, x) in outputs.iter_rows().enumerate() {
            let y = self.target_row(s, d);
            match self.kind {
                LossKind::MeanSquare => out.extend(x.iter().zip(&y).map(|(a, b)| a - b)),
                LossKind::SquaredHinge => out.extend(
                    x.iter()
                        .zip(&y)
                        .map(|(a, b)| -2.0 * b * (1.0 - a * b).max(0.0)),
                ),
                LossKind::SoftmaxCrossEntropy => {
                    let lse = log_sum_exp(x);
                    let total: f64 = y.iter().sum();
                    out.extend(x.iter().zip(&y).map(|(a, b)| total * (a - lse).exp() - b));
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= self.scale);
        Matrix::new(outputs.rows(), d, out)
    }

    /// Fraction of misclassified samples.
    ///
    /// Class targets use the first maximal output as the prediction. Vector
    /// targets count a sample as wrong when any output differs from its target
    /// by more than `1e-6·(1 + |y|)`.
    pub fn error_rate(&self, outputs: &Matrix) -> Result<f64> {
        self.check(outputs)?;
        let wrong = match &self.targets {
            Targets::Classes(c) => outputs
                .iter_rows()
                .zip(c)
                .filter(|(x, &label)| argmax_first(x) != label)
                .count(),
            Targets::Vectors(y) => outputs
                .iter_rows()
                .zip(y.iter_rows())
                .filter(|(x, y)| {
                    x.iter()
                        .zip(y.iter())
                        .any(|(a, b)| (a - b).abs() > 1e-6 * (1.0 + b.abs()))
                })
                .count(),
        };
        Ok(wrong as f64 / outputs.rows() as f64)
    }
}

/// Index of the first maximal entry.
pub fn argmax_first(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mean_square_value_and_gradient() {
        let loss = TerminalLoss::new(LossKind::MeanSquare, Targets::Vectors(m(&[&[0.0, 0.0]])));
        assert_eq!(loss.values(&m(&[&[1.0, 2.0]])).unwrap(), vec![2.5]);
        assert_eq!(
            loss.gradients(&m(&[&[1.0, 2.0]])).unwrap(),
            m(&[&[1.0, 2.0]])
        );
    }

    #[test]
    fn squared_hinge_uses_one_vs_rest_encoding() {
        let loss = TerminalLoss::new(LossKind::SquaredHinge, Targets::Classes(vec![1]));
        // y = (−1, +1, −1): margins 1.5, −1, −2; only the first is active.
        let x = m(&[&[0.5, 2.0, -3.0]]);
        assert_eq!(loss.values(&x).unwrap(), vec![2.25]);
        assert_eq!(loss.gradients(&x).unwrap(), m(&[&[3.0, 0.0, 0.0]]));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let loss = TerminalLoss::new(LossKind::SoftmaxCrossEntropy, Targets::Classes(vec![0]));
        let x = m(&[&[0.0, 0.0]]);
        let v = loss.values(&x).unwrap()[0];
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let g = loss.gradients(&x).unwrap();
        assert!((g.get(0, 0) + 0.5).abs() < 1e-15 && (g.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = m(&[&[0.3, -1.2, 0.8], &[1.1, 0.4, -0.2]]);
        for loss in [
            TerminalLoss::new(LossKind::MeanSquare, Targets::Classes(vec![2, 0])),
            TerminalLoss::new(LossKind::SquaredHinge, Targets::Classes(vec![2, 0])),
            TerminalLoss::new(LossKind::SoftmaxCrossEntropy, Targets::Classes(vec![2, 0])),
        ] {
            let g = loss.gradients(&x).unwrap();
            let h = 1e-6;
            for r in 0..2 {
                for c in 0..3 {
                    let mut xp = x.clone();
                    xp.set(r, c, x.get(r, c) + h).unwrap();
                    let mut xm = x.clone();
                    xm.set(r, c, x.get(r, c) - h).unwrap();
                    let fd =
                        (loss.values(&xp).unwrap()[r] - loss.values(&xm).unwrap()[r]) / (2.0 * h);
                    assert!((fd - g.get(r, c)).abs() < 1e-7, "{:?}", loss.kind());
                }
            }
        }
    }

    #[test]
    fn error_rate_uses_first_argmax() {
        let loss = TerminalLoss::new(LossKind::SquaredHinge, Targets::Classes(vec![0, 1]));
        assert_eq!(
            loss.error_rate(&m(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap(),
            0.5
        );
    }

    #[test]
    fn rejects_mismatched_targets() {
        let loss = TerminalLoss::new(LossKind::MeanSquare, Targets::Classes(vec![5]));
        assert!(loss.values(&m(&[&[0.0, 0.0]])).is_err());
        let loss = TerminalLoss::new(LossKind::MeanSquare, Targets::Classes(vec![0, 1]));
        assert!(loss.values(&m(&[&[0.0, 0.0]])).is_err());
    }
}
