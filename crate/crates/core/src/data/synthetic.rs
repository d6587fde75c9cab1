//! Planted single-layer binary regression: `y_s = θ* x_s` with `θ*` uniform
//! on `{±1}` and standard normal inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Split};
use crate::error::Result;
use crate::layers::{Layer, Mode};
use crate::linalg::Matrix;
use crate::propagation::Targets;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRegressionProblem {
    pub theta_star: Matrix,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl SyntheticRegressionProblem {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(
            self.inputs.clone(),
            Targets::Vectors(self.targets.clone()),
            Split::Train,
        )
        .expect("rows agree by construction")
    }
}

/// Samples `θ* ∈ {±1}^{d1×d0}`, `S` inputs in `R^{d0}` and exact targets.
///
/// Targets go through the same layer kernel used in training, so `θ*`
/// attains a loss of exactly zero.
pub fn make_binary_regression(
    d0: usize,
    d1: usize,
    samples: usize,
    seed: u64,
) -> Result<SyntheticRegressionProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..d0 * d1)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let theta_star = Matrix::new(d1, d0, theta)?;
    let x: Vec<f64> = (0..samples * d0)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let inputs = Matrix::new(samples, d0, x)?;
    let targets = Layer::binary(theta_star.clone())?.forward(&inputs, Mode::Train)?;
    Ok(SyntheticRegressionProblem {
        theta_star,
        inputs,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul_transpose_a;

    #[test]
    fn shapes_and_domain() {
        let p = make_binary_regression(8, 3, 20, 1).unwrap();
        assert_eq!(p.theta_star.shape(), crate::error::Shape(3, 8));
        assert_eq!(p.inputs.shape(), crate::error::Shape(20, 8));
        assert_eq!(p.targets.shape(), crate::error::Shape(20, 3));
        assert!(p.theta_star.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(p, make_binary_regression(8, 3, 20, 1).unwrap());
        assert_ne!(
            p.inputs,
            make_binary_regression(8, 3, 20, 2).unwrap().inputs
        );
    }

    #[test]
    fn targets_are_linear_images() {
        let p = make_binary_regression(5, 2, 4, 9).unwrap();
        for s in 0..4 {
            for i in 0..2 {
                let y: f64 = (0..5)
                    .map(|j| p.theta_star.get(i, j) * p.inputs.get(s, j))
                    .sum();
                assert!((y - p.targets.get(s, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empirical_gram_is_near_identity() {
        let s = 10_000;
        let p = make_binary_regression(6, 1, s, 3).unwrap();
        let gram = matmul_transpose_a(&p.inputs, &p.inputs)
            .unwrap()
            .scale(1.0 / s as f64)
            .unwrap();
        let tol = 5.0 / (s as f64).sqrt();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram.get(i, j) - want).abs() < tol,
                    "({i},{j}) = {}",
                    gram.get(i, j)
                );
            }
        }
    }
}
