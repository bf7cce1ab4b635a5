//! Composite Simpson quadrature with automatic refinement.

use crate::error::{Error, Result};

/// Stopping rule for [`simpson`].
#[derive(Debug, Clone, Copy)]
pub struct SimpsonConfig {
    /// Initial number of subintervals (rounded up to even).
    pub initial_intervals: usize,
    /// Successive estimates must differ by less than this, relative.
    pub rel_tol: f64,
    /// Absolute floor applied to the relative test, for integrals near zero.
    pub abs_tol: f64,
    /// Number of interval doublings before giving up.
    pub max_refinements: usize,
}

impl Default for SimpsonConfig {
    fn default() -> Self {
        Self {
            initial_intervals: 16,
            rel_tol: 1e-6,
            abs_tol: 1e-300,
            max_refinements: 20,
        }
    }
}

/// Integrates `f` over `[a, b]` with composite Simpson, doubling the number
/// of subintervals until two successive estimates agree.
///
/// `b < a` is allowed and flips the sign as usual.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, cfg: SimpsonConfig) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut n = cfg.initial_intervals.max(2);
    n += n % 2;
    let h = (b - a) / n as f64;
    // Keep endpoint, odd-node and even-node sums separately so each doubling
    // only evaluates the new midpoints.
    let ends = f(a) + f(b);
    let mut odd: f64 = (0..n / 2).map(|i| f(a + (2 * i + 1) as f64 * h)).sum();
    let mut even: f64 = (1..n / 2).map(|i| f(a + (2 * i) as f64 * h)).sum();
    let mut estimate = (ends + 4.0 * odd + 2.0 * even) * h / 3.0;
    let mut last_change = f64::INFINITY;

    for _ in 0..cfg.max_refinements {
        n *= 2;
        let h = (b - a) / n as f64;
        even += odd;
        odd = (0..n / 2).map(|i| f(a + (2 * i + 1) as f64 * h)).sum();
        let next = (ends + 4.0 * odd + 2.0 * even) * h / 3.0;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("quadrature estimate {next}")));
        }
        last_change = (next - estimate).abs() / next.abs().max(cfg.abs_tol);
        estimate = next;
        if last_change < cfg.rel_tol {
            return Ok(estimate);
        }
    }
    Err(Error::QuadratureDiverged {
        refinements: cfg.max_refinements,
        last_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let v = simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, SimpsonConfig::default()).unwrap();
        assert!((v - 0.0).abs() < 1e-12);
        let v = simpson(|x| x * x, 0.0, 3.0, SimpsonConfig::default()).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let cfg = SimpsonConfig { rel_tol: 1e-10, ..Default::default() };
        let fwd = simpson(f64::sin, 0.0, 1.0, cfg).unwrap();
        let rev = simpson(f64::sin, 1.0, 0.0, cfg).unwrap();
        assert!((fwd + rev).abs() < 1e-12);
        assert!((fwd - (1.0 - 1f64.cos())).abs() < 1e-9);
    }

    #[test]
    fn gaussian_integral() {
        let v = simpson(|x: f64| (-x * x / 2.0).exp(), -12.0, 12.0, SimpsonConfig::default()).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn reports_divergence() {
        let cfg = SimpsonConfig { max_refinements: 2, rel_tol: 1e-15, ..Default::default() };
        let err = simpson(|x: f64| (50.0 * x).sin(), 0.0, 10.0, cfg).unwrap_err();
        assert!(matches!(err, Error::QuadratureDiverged { refinements: 2, .. }));
    }
}
