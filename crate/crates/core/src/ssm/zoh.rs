//! Zero-order-hold discretization of a diagonal continuous-time SSM.
//!
//! For one diagonal entry with step `Δ > 0`: `Ā = exp(ΔA)` and
//! `B̄ = (exp(ΔA) - 1) / A · B = Δ·φ(ΔA)·B` with `φ(z) = (e^z - 1) / z`.

use crate::error::{ensure_arg, ensure_shape, Result};
use crate::scalar::Scalar;

/// Below this `|ΔA|` the truncated Taylor series of `φ` replaces the quotient.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// `φ(z) = (e^z - 1) / z`, with `φ(0) = 1`.
#[inline]
pub fn phi<T: Scalar>(z: T) -> T {
    if z.abs() < T::lit(SERIES_THRESHOLD) {
        // 1 + z/2 + z²/6 + z³/24
        T::one() + z * (T::lit(0.5) + z * (T::lit(1.0 / 6.0) + z * T::lit(1.0 / 24.0)))
    } else {
        z.exp_m1() / z
    }
}

/// `ψ(z) = dφ/dz = (z e^z - e^z + 1) / z²`, with `ψ(0) = 1/2`.
#[inline]
pub fn phi_grad<T: Scalar>(z: T) -> T {
    if z.abs() < T::lit(1e-2) {
        // Σ_k (k+1)/(k+2)! z^k
        let c = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
            1.0 / 5760.0,
        ];
        c.iter()
            .rev()
            .fold(T::zero(), |acc, &ck| acc * z + T::lit(ck))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Discretizes one `(A, B, Δ)` entry, returning `(Ā, B̄)`.
#[inline]
pub fn zoh<T: Scalar>(a: T, b: T, delta: T) -> (T, T) {
    let z = delta * a;
    (z.exp(), delta * phi(z) * b)
}

/// Elementwise discretization of a diagonal `A` and matching `B` with a shared step `Δ`.
pub fn zoh_discretize<T: Scalar>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    ensure_arg!(delta > T::zero(), "ZOH step must be positive, got {delta}");
    ensure_shape!(
        a.len() == b.len(),
        "A has {} entries, B has {}",
        a.len(),
        b.len()
    );
    Ok(a.iter().zip(b).map(|(&a, &b)| zoh(a, b, delta)).unzip())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_a_limit() {
        let (ab, bb) = zoh(0.0f64, 1.0, 1.0);
        assert_eq!(ab, 1.0);
        assert_eq!(bb, 1.0);
        let (ab, bb) = zoh(-1e-12f64, 2.0, 1.0);
        assert!((ab - 1.0).abs() < 1e-11);
        assert!((bb - 2.0).abs() < 1e-11);
    }

    #[test]
    fn half_life_point() {
        let (ab, bb) = zoh(-1.0f64, 1.0, std::f64::consts::LN_2);
        assert!((ab - 0.5).abs() <= 1e-15);
        assert!((bb - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(zoh_discretize(&[-1.0f64], &[1.0], 0.0).is_err());
        assert!(zoh_discretize(&[-1.0f64], &[1.0], -0.1).is_err());
        assert!(zoh_discretize(&[-1.0f64, -2.0], &[1.0], 0.1).is_err());
    }

    #[test]
    fn phi_is_continuous_across_threshold() {
        for &z in &[
            SERIES_THRESHOLD * 0.999,
            SERIES_THRESHOLD * 1.001,
            -SERIES_THRESHOLD * 0.999,
            -SERIES_THRESHOLD * 1.001,
        ] {
            let exact = (1..30).fold((0.0, 1.0), |(s, term): (f64, f64), k| {
                let t = term * z / (k as f64 + 1.0);
                (s + term, t)
            });
            assert!((phi(z) - exact.0).abs() < 1e-15, "z = {z}");
        }
    }

    #[test]
    fn phi_grad_matches_difference_quotient() {
        for &z in &[-3.0f64, -0.5, -0.02, -0.009, -1e-5, 0.0, 1e-3, 0.3] {
            let h = 1e-6;
            let fd = (phi(z + h) - phi(z - h)) / (2.0 * h);
            assert!((fd - phi_grad(z)).abs() < 1e-8, "z = {z}");
        }
    }
}
