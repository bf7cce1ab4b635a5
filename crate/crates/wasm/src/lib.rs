//! Browser bindings for the interactive kernel explorer in `www/`.
//!
//! Each exported function has a plain Rust twin returning
//! [`fracsrf::Result`], so the math is testable off the browser; the
//! exports only convert errors into JavaScript exceptions.

use std::f64::consts::PI;

use fracsrf::basis::{frac_gauss_deriv_1d, frac_gauss_deriv_at, kernel_2d, Grid1D};
use fracsrf::caputo::{caputo_fabrizio_1d, caputo_fabrizio_at, rmse};
use fracsrf::quadrature::SimpsonConfig;
use wasm_bindgen::prelude::*;

/// Samples per σ of the plotted curves.
const CURVE_DENSITY: f64 = 25.0;
/// Plotted range of the curves, in units of σ either side of 0.
const CURVE_SIGMAS: f64 = 4.0;

/// Row-major `(2·half_width+1)²` kernel `G^νy(y) ⊗ G^νx(x)` at scale σ.
pub fn kernel_values(nu_x: f64, nu_y: f64, sigma: f64, half_width: usize) -> fracsrf::Result<Vec<f64>> {
    Ok(kernel_2d(nu_x, nu_y, sigma, Grid1D::new(half_width)?)?.values)
}

/// Caputo-Fabrizio and interpolated curves at one order.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    xs: Vec<f64>,
    caputo: Vec<f64>,
    interpolated: Vec<f64>,
    grid_rmse: f64,
}

#[wasm_bindgen]
impl Curves {
    #[wasm_bindgen(getter)]
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn caputo(&self) -> Vec<f64> {
        self.caputo.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn interpolated(&self) -> Vec<f64> {
        self.interpolated.clone()
    }

    /// RMSE on the integer kernel grid, as reported by `compare-cf`.
    #[wasm_bindgen(getter)]
    pub fn grid_rmse(&self) -> f64 {
        self.grid_rmse
    }
}

/// Dense curves over ±4σ plus the RMSE on the kernel grid. `nu ∈ (0, 1)`.
pub fn cf_curves(nu: f64, sigma: f64) -> fracsrf::Result<Curves> {
    let n = (2.0 * CURVE_SIGMAS * CURVE_DENSITY).round() as usize;
    let xs: Vec<f64> = (0..=n).map(|i| sigma * CURVE_SIGMAS * (2.0 * i as f64 / n as f64 - 1.0)).collect();
    let caputo = caputo_fabrizio_at(nu, sigma, &xs, SimpsonConfig { abs_tol: 1e-12, ..SimpsonConfig::default() })?;
    let interpolated = frac_gauss_deriv_at(nu, sigma, &xs)?;
    let grid = Grid1D::for_sigma(sigma)?;
    let grid_rmse = rmse(&caputo_fabrizio_1d(nu, sigma, grid)?.values, &frac_gauss_deriv_1d(nu, sigma, grid)?.values);
    Ok(Curves { xs, caputo, interpolated, grid_rmse })
}

/// `|Σ_x g(x) e^{-2πi f x}|` of the sampled 1D basis for `bins` frequencies
/// evenly spaced over `[0, 0.5]` cycles per pixel.
pub fn response(nu: f64, sigma: f64, half_width: usize, bins: usize) -> fracsrf::Result<Vec<f64>> {
    let grid = Grid1D::new(half_width)?;
    let g = frac_gauss_deriv_1d(nu, sigma, grid)?.values;
    let xs = grid.points();
    let step = if bins > 1 { 0.5 / (bins - 1) as f64 } else { 0.0 };
    Ok((0..bins)
        .map(|b| {
            let w = 2.0 * PI * step * b as f64;
            let (re, im) = g.iter().zip(&xs).fold((0.0, 0.0), |(re, im), (v, x)| (re + v * (w * x).cos(), im - v * (w * x).sin()));
            re.hypot(im)
        })
        .collect())
}

fn js(e: fracsrf::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn kernel(nu_x: f64, nu_y: f64, sigma: f64, half_width: usize) -> Result<Vec<f64>, JsError> {
    kernel_values(nu_x, nu_y, sigma, half_width).map_err(js)
}

#[wasm_bindgen]
pub fn caputo_curves(nu: f64, sigma: f64) -> Result<Curves, JsError> {
    cf_curves(nu, sigma).map_err(js)
}

#[wasm_bindgen]
pub fn frequency_response(nu: f64, sigma: f64, half_width: usize, bins: usize) -> Result<Vec<f64>, JsError> {
    response(nu, sigma, half_width, bins).map_err(js)
}

/// Half width the library picks for a scale: `max(1, ceil(2σ))`.
#[wasm_bindgen]
pub fn half_width_for(sigma: f64) -> usize {
    fracsrf::basis::half_width_from_sigma(sigma)
}
