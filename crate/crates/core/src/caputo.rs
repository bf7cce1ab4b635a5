//! Caputo-Fabrizio fractional derivative of the Gaussian.
//!
//! Used only as a reference curve for judging the interpolated basis. With
//! `k = ν/(1-ν)` the derivative is the memory integral
//!
//! ```text
//! D^ν G(x) = 1/(1-ν) ∫_{-∞}^{x} G'(τ;σ) · exp(-k (x - τ)) dτ
//! ```
//!
//! which tends to `G` as `ν → 0` and to `G'` as `ν → 1`. Completing the
//! square in `τ` gives the usual closed prefactor times a Gaussian-weighted
//! integral; evaluating the memory form directly keeps every factor bounded,
//! which the factored form does not for `ν` near 1.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::basis::{frac_gauss_deriv_1d, BasisKernel1D, Grid1D};
use crate::error::{Error, Result};
use crate::quadrature::{simpson, SimpsonConfig};

/// Lower cut-off of the memory integral, in units of σ. `G'` is below 1e-30
/// of its peak there.
const TAIL_SIGMAS: f64 = 12.0;

/// Integrand of the memory integral at `tau` for the evaluation point `x`.
pub fn memory_integrand(nu: f64, sigma: f64, x: f64, tau: f64) -> f64 {
    let k = nu / (1.0 - nu);
    let g_prime = -tau / ((2.0 * PI).sqrt() * sigma.powi(3)) * (-tau * tau / (2.0 * sigma * sigma)).exp();
    g_prime * (-k * (x - tau)).exp()
}

/// Caputo-Fabrizio derivative of order `nu ∈ (0, 1)` at arbitrary points.
pub fn caputo_fabrizio_at(nu: f64, sigma: f64, xs: &[f64], cfg: SimpsonConfig) -> Result<Vec<f64>> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::invalid(format!("Caputo-Fabrizio order must lie in (0, 1), got {nu}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    xs.iter()
        .map(|&x| {
            let lower = (-TAIL_SIGMAS * sigma).min(x - sigma);
            let integral = simpson(|tau| memory_integrand(nu, sigma, x, tau), lower, x, cfg)?;
            Ok(integral / (1.0 - nu))
        })
        .collect()
}

/// Caputo-Fabrizio derivative sampled on `grid`, default quadrature settings.
pub fn caputo_fabrizio_1d(nu: f64, sigma: f64, grid: Grid1D) -> Result<BasisKernel1D> {
    let cfg = SimpsonConfig { abs_tol: 1e-12, ..SimpsonConfig::default() };
    let values = caputo_fabrizio_at(nu, sigma, &grid.points(), cfg)?;
    Ok(BasisKernel1D { order: nu, sigma, grid, values })
}

/// Root mean squared difference between two equally long vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Both curves at one order, sampled on the kernel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfRow {
    pub nu: f64,
    pub caputo: Vec<f64>,
    pub interpolated: Vec<f64>,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfComparison {
    pub sigma: f64,
    pub xs: Vec<f64>,
    pub rows: Vec<CfRow>,
    pub mean_rmse: f64,
}

/// Orders 0.1, 0.2, …, 0.9.
pub fn cf_orders() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Caputo-Fabrizio and interpolated bases at every order of [`cf_orders`]
/// on the grid `half_width_from_sigma(sigma)`.
pub fn compare_cf(sigma: f64) -> Result<CfComparison> {
    let grid = Grid1D::for_sigma(sigma)?;
    let rows = cf_orders()
        .into_iter()
        .map(|nu| {
            let caputo = caputo_fabrizio_1d(nu, sigma, grid)?.values;
            let interpolated = frac_gauss_deriv_1d(nu, sigma, grid)?.values;
            let rmse = rmse(&caputo, &interpolated);
            Ok(CfRow { nu, caputo, interpolated, rmse })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_rmse = rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64;
    Ok(CfComparison { sigma, xs: grid.points(), rows, mean_rmse })
}

impl CfComparison {
    /// One row per order (`nu, rmse, cf@x…, interp@x…`) and a final
    /// `mean` row carrying the mean RMSE.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("nu,rmse");
        for prefix in ["cf", "interp"] {
            for x in &self.xs {
                out.push_str(&format!(",{prefix}@{x}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.9e}", r.nu, r.rmse));
            for v in r.caputo.iter().chain(&r.interpolated) {
                out.push_str(&format!(",{v:.9e}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("mean,{:.9e}{}\n", self.mean_rmse, ",".repeat(2 * self.xs.len())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{frac_gauss_deriv_1d, gauss_deriv_at, half_width_from_sigma};

    fn unit_grid() -> Grid1D {
        Grid1D::new(half_width_from_sigma(1.0)).unwrap()
    }

    fn simpson_fixed<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn rejects_orders_outside_open_interval() {
        for nu in [0.0, 1.0, -0.5, 1.5] {
            assert!(caputo_fabrizio_1d(nu, 1.0, unit_grid()).is_err());
        }
    }

    #[test]
    fn finite_on_grid() {
        let k = caputo_fabrizio_1d(0.5, 1.0, unit_grid()).unwrap();
        assert_eq!(k.values.len(), 5);
        assert!(k.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn limits_approach_integer_orders() {
        let xs = unit_grid().points();
        let cfg = SimpsonConfig { abs_tol: 1e-12, ..Default::default() };
        let near0 = caputo_fabrizio_at(1e-4, 1.0, &xs, cfg).unwrap();
        let near1 = caputo_fabrizio_at(1.0 - 1e-3, 1.0, &xs, cfg).unwrap();
        let g0 = gauss_deriv_at(0, 1.0, &xs).unwrap();
        let g1 = gauss_deriv_at(1, 1.0, &xs).unwrap();
        for p in 0..xs.len() {
            assert!((near0[p] - g0[p]).abs() < 1e-3, "{} vs {}", near0[p], g0[p]);
            assert!((near1[p] - g1[p]).abs() < 1e-2, "{} vs {}", near1[p], g1[p]);
        }
    }

    #[test]
    fn stable_under_step_halving() {
        let (nu, sigma) = (0.5, 1.0);
        let k = caputo_fabrizio_1d(nu, sigma, unit_grid()).unwrap();
        for (x, v) in unit_grid().points().into_iter().zip(k.values) {
            let f = |tau| memory_integrand(nu, sigma, x, tau) / (1.0 - nu);
            let lower = (-TAIL_SIGMAS * sigma).min(x - sigma);
            let coarse = simpson_fixed(f, lower, x, 2000);
            let fine = simpson_fixed(f, lower, x, 4000);
            assert!((fine - coarse).abs() / fine.abs().max(1e-12) < 1e-3);
            assert!((fine - v).abs() / fine.abs().max(1e-12) < 1e-3);
        }
    }

    #[test]
    fn comparison_table() {
        let c = compare_cf(1.0).unwrap();
        assert_eq!(c.rows.len(), 9);
        assert_eq!(c.xs, [-2.0, -1.0, 0.0, 1.0, 2.0]);
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[0].starts_with("nu,rmse,cf@-2,"));
        assert!(lines[10].starts_with("mean,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 12));
        assert!(c.mean_rmse < 0.22);
    }

    #[test]
    fn interpolation_stays_close() {
        let g = unit_grid();
        let errs: Vec<f64> = (1..=9)
            .map(|i| {
                let nu = i as f64 / 10.0;
                let cf = caputo_fabrizio_1d(nu, 1.0, g).unwrap().values;
                let it = frac_gauss_deriv_1d(nu, 1.0, g).unwrap().values;
                rmse(&cf, &it)
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean < 0.22, "mean rmse {mean}, per order {errs:?}");
    }
}
