//! Closed-form layer-wise maximizers of the (regularized) Hamiltonian for
//! dense layers with discrete weights.

use crate::error::{Error, Result};
use crate::linalg::{sign, Matrix};

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

/// Entrywise maximizer of `⟨M̄, θ⟩ − ρ‖θ − θ_k‖²` over `θ ∈ {±1}`.
///
/// An entry moves to `sign(M̄)` once `|M̄| ≥ 2ρ`; otherwise, or when `M̄ = 0`,
/// it keeps its current value.
pub fn binary_update(theta_k: &Matrix, mbar: &Matrix, rho: f64) -> Result<Matrix> {
    theta_k.same_shape("binary_update", mbar)?;
    check_nonneg("rho", rho)?;
    theta_k.zip_map(mbar, |t, m| {
        if m != 0.0 && m.abs() >= 2.0 * rho {
            sign(m)
        } else {
            t
        }
    })
}

/// Entrywise maximizer of `M̄θ − λθ² − ρ(θ − θ_k)²` over `θ ∈ {−1, 0, +1}`.
///
/// `+1` when `M̄ ≥ ρ(1 − 2θ_k) + λ`, `−1` when `M̄ ≤ −ρ(1 + 2θ_k) − λ`,
/// and `0` otherwise.
pub fn ternary_update(theta_k: &Matrix, mbar: &Matrix, rho: f64, lambda: f64) -> Result<Matrix> {
    theta_k.same_shape("ternary_update", mbar)?;
    check_nonneg("rho", rho)?;
    check_nonneg("lambda", lambda)?;
    theta_k.zip_map(mbar, |t, m| ternary_entry(t, m, rho, lambda))
}

fn ternary_entry(t: f64, m: f64, rho: f64, lambda: f64) -> f64 {
    let up = rho * (1.0 - 2.0 * t) + lambda;
    let down = -rho * (1.0 + 2.0 * t) - lambda;
    let plus = m >= up;
    let minus = m <= down;
    match (plus, minus) {
        (true, false) => 1.0,
        (false, true) => -1.0,
        (false, false) => 0.0,
        // Only possible when ρ = λ = 0 and M̄ = 0; there every value scores 0.
        (true, true) => t,
    }
}

/// `α M̄ + (1 − α) M`.
pub fn update_moving_average(mbar: &Matrix, m: &Matrix, alpha: f64) -> Result<Matrix> {
    mbar.same_shape("update_moving_average", m)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(m.clone());
    }
    mbar.zip_map(m, |a, b| alpha * a + (1.0 - alpha) * b)
}

/// `c · max{|M̄_ij| : sign(M̄_ij) ≠ sign(θ_ij), M̄_ij ≠ 0}`, or `0` when every
/// nonzero entry of `M̄` already agrees in sign with `θ`.
///
/// For binary layers the result is the flip threshold `2ρ`.
pub fn rho_from_heuristic(mbar: &Matrix, theta: &Matrix, fraction: f64) -> Result<f64> {
    mbar.same_shape("rho_from_heuristic", theta)?;
    check_nonneg("rho fraction", fraction)?;
    let worst = mbar
        .data()
        .iter()
        .zip(theta.data())
        .filter(|&(&m, &t)| m != 0.0 && sign(m) != sign(t))
        .map(|(m, _)| m.abs())
        .fold(0.0, f64::max);
    Ok(fraction * worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Every maximizer of `score` over `domain`, in domain order.
    fn maximizers(domain: &[f64], score: impl Fn(f64) -> f64) -> Vec<f64> {
        let best = domain
            .iter()
            .map(|&v| score(v))
            .fold(f64::NEG_INFINITY, f64::max);
        domain
            .iter()
            .copied()
            .filter(|&v| score(v) == best)
            .collect()
    }

    #[test]
    fn binary_examples() {
        let theta = m(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        let mbar = m(&[&[-3.0, -0.5], &[2.0, 0.0]]);
        assert_eq!(
            binary_update(&theta, &mbar, 0.5).unwrap(),
            m(&[&[-1.0, 1.0], &[1.0, -1.0]])
        );
        // Exactly at the threshold the entry flips.
        assert_eq!(
            binary_update(&m(&[&[1.0]]), &m(&[&[-1.0]]), 0.5).unwrap(),
            m(&[&[-1.0]])
        );
        // ρ = 0 gives sign(M̄), keeping θ_k where M̄ = 0.
        assert_eq!(
            binary_update(&theta, &mbar, 0.0).unwrap(),
            m(&[&[-1.0, -1.0], &[1.0, -1.0]])
        );
        assert!(binary_update(&theta, &mbar, -1.0).is_err());
        assert!(binary_update(&theta, &m(&[&[1.0, 1.0]]), 0.0).is_err());
    }

    #[test]
    fn ternary_examples() {
        let t = m(&[&[0.0, 0.0, 1.0, 1.0, -1.0]]);
        let mbar = m(&[&[0.3, 0.05, -0.5, -0.05, 0.2]]);
        // From 0 the thresholds are ±(ρ + λ) = ±0.2; from +1 dropping to −1
        // needs M̄ ≤ −3ρ − λ = −0.4 and keeping +1 needs M̄ ≥ −ρ + λ = 0.
        assert_eq!(
            ternary_update(&t, &mbar, 0.1, 0.1).unwrap(),
            m(&[&[1.0, 0.0, -1.0, 0.0, 0.0]])
        );
        // Without the proximal term a large λ forces zeros.
        assert_eq!(
            ternary_update(&m(&[&[1.0, -1.0]]), &m(&[&[0.9, -0.9]]), 0.0, 1.0).unwrap(),
            m(&[&[0.0, 0.0]])
        );
        assert!(ternary_update(&t, &mbar, 0.1, -1.0).is_err());
    }

    #[test]
    fn binary_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let tk = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mb: f64 = rng.random_range(-2.0..2.0);
            let rho: f64 = rng.random_range(0.0..1.0);
            let got = binary_update(&m(&[&[tk]]), &m(&[&[mb]]), rho)
                .unwrap()
                .get(0, 0);
            let best = maximizers(&[-1.0, 1.0], |v| mb * v - rho * (v - tk) * (v - tk));
            assert_eq!(best, vec![got], "tk={tk} m={mb} rho={rho}");
        }
    }

    #[test]
    fn ternary_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2000 {
            let tk = [-1.0, 0.0, 1.0][rng.random_range(0..3)];
            let mb: f64 = rng.random_range(-3.0..3.0);
            let rho: f64 = rng.random_range(0.0..1.0);
            let lambda: f64 = rng.random_range(0.0..1.0);
            let got = ternary_update(&m(&[&[tk]]), &m(&[&[mb]]), rho, lambda)
                .unwrap()
                .get(0, 0);
            let best = maximizers(&[-1.0, 0.0, 1.0], |v| {
                mb * v - lambda * v * v - rho * (v - tk) * (v - tk)
            });
            assert_eq!(best, vec![got], "tk={tk} m={mb} rho={rho} lambda={lambda}");
        }
    }

    #[test]
    fn ternary_tie_takes_the_inequality_branch() {
        // M̄ = ρ + λ from 0: both 0 and +1 maximize; the update returns +1.
        let got = ternary_update(&m(&[&[0.0]]), &m(&[&[0.75]]), 0.5, 0.25).unwrap();
        assert_eq!(got, m(&[&[1.0]]));
    }

    #[test]
    fn moving_average_examples() {
        let z = Matrix::zeros(1, 1);
        let ten = m(&[&[10.0]]);
        assert_eq!(update_moving_average(&z, &ten, 0.0).unwrap(), ten);
        let v = update_moving_average(&z, &ten, 0.999).unwrap().get(0, 0);
        assert!((v - 0.01).abs() < 1e-12);
        let mut avg = z;
        for _ in 0..200 {
            avg = update_moving_average(&avg, &ten, 0.9).unwrap();
        }
        assert!((avg.get(0, 0) - 10.0).abs() < 1e-7);
        assert!(update_moving_average(&ten, &ten, 1.0).is_err());
    }

    #[test]
    fn heuristic_examples() {
        let mbar = m(&[&[3.0, -1.0], &[0.5, -2.0]]);
        let theta = Matrix::filled(2, 2, 1.0);
        assert_eq!(rho_from_heuristic(&mbar, &theta, 0.5).unwrap(), 1.0);
        assert_eq!(
            rho_from_heuristic(&mbar, &mbar.map(sign).unwrap(), 0.5).unwrap(),
            0.0
        );
        // Zero weights disagree with every nonzero entry.
        assert_eq!(
            rho_from_heuristic(&mbar, &Matrix::zeros(2, 2), 0.25).unwrap(),
            0.75
        );
    }

    proptest! {
        #[test]
        fn sparsity_is_monotone_in_lambda(
            cells in proptest::collection::vec((-1i8..=1, -3.0f64..3.0), 12),
            rho in 0.0f64..1.0, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let theta = Matrix::new(3, 4, cells.iter().map(|c| f64::from(c.0)).collect()).unwrap();
            let mbar = Matrix::new(3, 4, cells.iter().map(|c| c.1).collect()).unwrap();
            let a = ternary_update(&theta, &mbar, rho, lo).unwrap();
            let b = ternary_update(&theta, &mbar, rho, hi).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(*x != 0.0 || *y == 0.0);
            }
        }

        #[test]
        fn zero_penalty_binary_is_sign(cells in proptest::collection::vec((any::<bool>(), -3.0f64..3.0), 6)) {
            let theta = Matrix::new(2, 3, cells.iter().map(|c| if c.0 { 1.0 } else { -1.0 }).collect()).unwrap();
            let mbar = Matrix::new(2, 3, cells.iter().map(|c| c.1).collect()).unwrap();
            let out = binary_update(&theta, &mbar, 0.0).unwrap();
            for ((o, t), mv) in out.data().iter().zip(theta.data()).zip(mbar.data()) {
                prop_assert_eq!(*o, if *mv == 0.0 { *t } else { sign(*mv) });
            }
        }
    }
}
