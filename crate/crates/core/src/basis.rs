//! Gaussian derivative bases on discrete grids.
//!
//! Integer orders are evaluated through the physicists' Hermite recursion,
//! `G^i(x;σ) = (-1/(σ√2))^i · H_i(x/(σ√2)) · G(x;σ)`, and fractional orders
//! by linear interpolation between the two neighbouring integer orders. All
//! basis math is done in `f64`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric unit-spaced support `[-half_width, ..., half_width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid1D {
    half_width: usize,
}

impl Grid1D {
    pub fn new(half_width: usize) -> Result<Self> {
        if half_width == 0 {
            return Err(Error::invalid("grid half width must be positive"));
        }
        Ok(Self { half_width })
    }

    /// Grid wide enough for a Gaussian of scale `sigma`, see [`half_width_from_sigma`].
    pub fn for_sigma(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Self::new(half_width_from_sigma(sigma))
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    /// Number of samples, always odd.
    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> Vec<f64> {
        let hw = self.half_width as i64;
        (-hw..=hw).map(|x| x as f64).collect()
    }
}

/// A sampled 1D Gaussian derivative of (possibly fractional) order.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisKernel1D {
    pub order: f64,
    pub sigma: f64,
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

/// A separable 2D kernel, `values[r * size + c] = g_y[r] * g_x[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    pub order_x: f64,
    pub order_y: f64,
    pub sigma: f64,
    pub size: usize,
    pub values: Vec<f64>,
}

impl Kernel2D {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.size)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma must be positive and finite, got {sigma}")))
    }
}

fn check_order(nu: f64) -> Result<()> {
    if nu.is_finite() && nu >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("derivative order must be non-negative, got {nu}")))
    }
}

/// Physicists' Hermite polynomial `H_i` evaluated elementwise.
pub fn hermite(i: usize, xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| hermite_scalar(i, x)).collect()
}

fn hermite_scalar(i: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if i == 0 {
        return prev;
    }
    let mut cur = 2.0 * x;
    for k in 2..=i {
        let next = 2.0 * x * cur - 2.0 * (k - 1) as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Unit-integral Gaussian density.
pub fn gaussian(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma)
}

/// All integer-order Gaussian derivatives `G^0 ..= G^max_order` at `xs`,
/// sharing one pass of the Hermite recursion. Indexed `[order][point]`.
pub fn gauss_deriv_family(max_order: usize, sigma: f64, xs: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; xs.len()]; max_order + 1];
    let scale = -1.0 / (sigma * SQRT_2);
    for (p, &x) in xs.iter().enumerate() {
        let g = gaussian(x, sigma);
        let u = x / (sigma * SQRT_2);
        let mut h_prev = 1.0;
        let mut h_cur = 2.0 * u;
        let mut factor = 1.0;
        out[0][p] = g;
        for (i, row) in out.iter_mut().enumerate().skip(1) {
            factor *= scale;
            if i >= 2 {
                let next = 2.0 * u * h_cur - 2.0 * (i - 1) as f64 * h_prev;
                h_prev = h_cur;
                h_cur = next;
            }
            row[p] = factor * h_cur * g;
        }
    }
    out
}

/// Integer-order Gaussian derivative at arbitrary sample positions.
pub fn gauss_deriv_at(order: usize, sigma: f64, xs: &[f64]) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    Ok(gauss_deriv_family(order, sigma, xs).pop().unwrap_or_default())
}

/// `G^i(x;σ)` sampled on `grid`.
pub fn gauss_deriv_1d(order: usize, sigma: f64, grid: Grid1D) -> Result<BasisKernel1D> {
    let values = gauss_deriv_at(order, sigma, &grid.points())?;
    Ok(BasisKernel1D { order: order as f64, sigma, grid, values })
}

/// Splits `nu` into its integer part and the interpolation weight of the
/// next order. The upper order is always `floor + 1`, so integer orders get
/// weight `(1, 0)` and reproduce `G^n` exactly.
pub fn interpolation_weights(nu: f64) -> (usize, f64) {
    let floor = nu.floor();
    (floor as usize, nu - floor)
}

/// Value of the interpolated basis together with its partial derivatives
/// with respect to the order and the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FracSample {
    pub value: Vec<f64>,
    pub d_nu: Vec<f64>,
    pub d_sigma: Vec<f64>,
}

/// Evaluates the fractional-order basis and its partials at `xs`.
///
/// The order partial is `G^(n+1) - G^n` (right derivative at integers). The
/// scale partial uses the heat-equation identity `∂G^i/∂σ = σ·G^(i+2)`.
pub fn frac_with_derivatives(nu: f64, sigma: f64, xs: &[f64]) -> Result<FracSample> {
    check_order(nu)?;
    check_sigma(sigma)?;
    let (n, f) = interpolation_weights(nu);
    let fam = gauss_deriv_family(n + 3, sigma, xs);
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| (1.0 - f) * x + f * y).collect()
    };
    let value = mix(&fam[n], &fam[n + 1]);
    let d_nu = fam[n + 1].iter().zip(&fam[n]).map(|(hi, lo)| hi - lo).collect();
    let d_sigma = mix(&fam[n + 2], &fam[n + 3]).into_iter().map(|v| sigma * v).collect();
    Ok(FracSample { value, d_nu, d_sigma })
}

/// Fractional-order basis at arbitrary sample positions.
pub fn frac_gauss_deriv_at(nu: f64, sigma: f64, xs: &[f64]) -> Result<Vec<f64>> {
    check_order(nu)?;
    check_sigma(sigma)?;
    let (n, f) = interpolation_weights(nu);
    let fam = gauss_deriv_family(n + 1, sigma, xs);
    Ok(fam[n].iter().zip(&fam[n + 1]).map(|(lo, hi)| (1.0 - f) * lo + f * hi).collect())
}

/// `(1-f)·G^n + f·G^(n+1)` on `grid`, with `n = floor(nu)` and `f = nu - n`.
pub fn frac_gauss_deriv_1d(nu: f64, sigma: f64, grid: Grid1D) -> Result<BasisKernel1D> {
    let values = frac_gauss_deriv_at(nu, sigma, &grid.points())?;
    Ok(BasisKernel1D { order: nu, sigma, grid, values })
}

/// Partial derivative of [`frac_gauss_deriv_1d`] with respect to the order.
pub fn frac_gauss_deriv_dnu(nu: f64, sigma: f64, grid: Grid1D) -> Result<Vec<f64>> {
    check_order(nu)?;
    check_sigma(sigma)?;
    let (n, _) = interpolation_weights(nu);
    let fam = gauss_deriv_family(n + 1, sigma, &grid.points());
    Ok(fam[n + 1].iter().zip(&fam[n]).map(|(hi, lo)| hi - lo).collect())
}

/// Half width covering `2σ` around the centre: `max(1, ceil(2σ))`.
pub fn half_width_from_sigma(sigma: f64) -> usize {
    ((2.0 * sigma).ceil() as usize).max(1)
}

/// Outer product of the fractional bases along y (rows) and x (columns).
pub fn kernel_2d(nu_x: f64, nu_y: f64, sigma: f64, grid: Grid1D) -> Result<Kernel2D> {
    let gx = frac_gauss_deriv_1d(nu_x, sigma, grid)?.values;
    let gy = frac_gauss_deriv_1d(nu_y, sigma, grid)?.values;
    Ok(Kernel2D {
        order_x: nu_x,
        order_y: nu_y,
        sigma,
        size: grid.len(),
        values: outer(&gy, &gx),
    })
}

pub(crate) fn outer(rows: &[f64], cols: &[f64]) -> Vec<f64> {
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| r * c)).collect()
}
