//! Compound-symmetry error correlation.
//!
//! Within a subject with `n` observations the noise correlation is
//! `Σ(ρ) = (1 - ρ) I + ρ J`, whose inverse has the closed form
//! `Ω(ρ) = (1 - ρ)^-1 [I - κ J]` with `κ = ρ / (1 + (n - 1) ρ)`. Every
//! quantity the sampler needs reduces to a handful of sums, so nothing here
//! is worse than linear in `n`.

use crate::error::{config_err, data_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompoundSymmetry {
    rho: f64,
}

impl CompoundSymmetry {
    pub fn new(rho: f64) -> Result<Self> {
        if (0.0..1.0).contains(&rho) {
            Ok(CompoundSymmetry { rho })
        } else {
            Err(config_err(format!("rho must lie in [0, 1), got {rho}")))
        }
    }

    pub fn independent() -> Self {
        CompoundSymmetry { rho: 0.0 }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `κ = ρ / (1 + (n - 1) ρ)`, the weight on `J` inside `Ω`.
    #[inline]
    pub fn kappa(&self, n: usize) -> f64 {
        self.rho / (1.0 + (n as f64 - 1.0) * self.rho)
    }

    /// `aᵀ Ω(ρ) b` from one pass over the two vectors.
    pub fn quad_form(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(data_err(format!("length mismatch: {} vs {}", a.len(), b.len())));
        }
        Ok(self.quad_form_unchecked(a, b))
    }

    #[inline]
    pub(crate) fn quad_form_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let (mut ab, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            ab += x * y;
            sa += x;
            sb += y;
        }
        if self.rho == 0.0 {
            return ab;
        }
        (ab - self.kappa(a.len()) * sa * sb) / (1.0 - self.rho)
    }

    /// `log |Ω(ρ)|` for a block of size `n`.
    pub fn log_det_precision(&self, n: usize) -> f64 {
        let n = n as f64;
        -(n - 1.0) * (-self.rho).ln_1p() - ((n - 1.0) * self.rho).ln_1p()
    }

    /// Mean shift and variance of the next same-subject noise term given
    /// that subject's observed residuals, under noise scale `sigma`.
    ///
    /// For an exchangeable normal vector with variance `σ²` and correlation
    /// `ρ`, conditioning on `k` observed values `e` gives mean
    /// `ρ Σe / (1 + (k-1)ρ)` and variance `σ² (1 - kρ² / (1 + (k-1)ρ))`.
    pub fn conditional_predictive(&self, sigma: f64, observed: &[f64]) -> (f64, f64) {
        let var = sigma * sigma;
        let k = observed.len();
        if k == 0 || self.rho == 0.0 {
            return (0.0, var);
        }
        let denom = 1.0 + (k as f64 - 1.0) * self.rho;
        let shift = self.rho * observed.iter().sum::<f64>() / denom;
        let v = var * (1.0 - k as f64 * self.rho * self.rho / denom);
        (shift, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_sigma(rho: f64, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn independent_is_dot_product() {
        let cs = CompoundSymmetry::independent();
        assert_eq!(cs.quad_form(&[1.0, 2.0, 3.0], &[4.0, -1.0, 0.5]).unwrap(), 3.5);
        assert_eq!(cs.log_det_precision(7), 0.0);
    }

    #[test]
    fn two_by_two_examples() {
        let cs = CompoundSymmetry::new(0.5).unwrap();
        assert!((cs.quad_form(&[1.0, 1.0], &[1.0, 1.0]).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!((cs.log_det_precision(2) + 0.75f64.ln()).abs() < 1e-12);
        assert!((cs.log_det_precision(2) - 0.28768).abs() < 1e-5);
        assert_eq!(cs.log_det_precision(1), 0.0);
    }

    #[test]
    fn rejects_bad_rho_and_lengths() {
        assert!(CompoundSymmetry::new(1.0).is_err());
        assert!(CompoundSymmetry::new(-0.1).is_err());
        let cs = CompoundSymmetry::new(0.2).unwrap();
        assert!(cs.quad_form(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=12 {
            for step in 1..=19 {
                let rho = step as f64 * 0.05;
                if rho >= 1.0 {
                    continue;
                }
                let cs = CompoundSymmetry::new(rho).unwrap();
                let sigma = dense_sigma(rho, n);
                let omega = sigma.clone().try_inverse().unwrap();
                let a = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                let b = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                let dense = a.dot(&(&omega * &b));
                let fast = cs.quad_form(a.as_slice(), b.as_slice()).unwrap();
                assert!((dense - fast).abs() < 1e-10, "n={n} rho={rho}");
                let ld = -sigma.determinant().ln();
                assert!((ld - cs.log_det_precision(n)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn positive_definite_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let n = rng.random_range(1..15);
            let cs = CompoundSymmetry::new(rng.random::<f64>() * 0.99).unwrap();
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            if a.iter().all(|v| *v == 0.0) {
                continue;
            }
            assert!(cs.quad_form(&a, &a).unwrap() > 0.0);
        }
    }

    #[test]
    fn conditional_predictive_examples() {
        let cs0 = CompoundSymmetry::independent();
        assert_eq!(cs0.conditional_predictive(2.0, &[1.0, 3.0]), (0.0, 4.0));
        let cs = CompoundSymmetry::new(0.4).unwrap();
        assert_eq!(cs.conditional_predictive(2.0, &[]), (0.0, 4.0));
        let (m, v) = cs.conditional_predictive(1.5, &[0.8]);
        assert!((m - 0.4 * 0.8).abs() < 1e-15);
        assert!((v - 2.25 * (1.0 - 0.16)).abs() < 1e-15);
    }

    #[test]
    fn conditional_predictive_matches_dense_gaussian_conditioning() {
        let rho = 0.35;
        let sigma = 1.3;
        let cs = CompoundSymmetry::new(rho).unwrap();
        let e = [0.4, -1.1, 2.0];
        let k = e.len();
        let cov = dense_sigma(rho, k + 1) * (sigma * sigma);
        let s11 = cov.view((0, 0), (k, k)).into_owned();
        let s21 = cov.view((k, 0), (1, k)).into_owned();
        let w = s21 * s11.try_inverse().unwrap();
        let mean = (&w * DVector::from_column_slice(&e))[0];
        let var = cov[(k, k)] - (&w * cov.view((0, k), (k, 1)))[0];
        let (m, v) = cs.conditional_predictive(sigma, &e);
        assert!((m - mean).abs() < 1e-12);
        assert!((v - var).abs() < 1e-12);
    }
}
