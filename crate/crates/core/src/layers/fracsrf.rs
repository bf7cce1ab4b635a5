use std::f64::consts::LN_2;

use rand::Rng;

use super::{bind_all, fan_in_uniform, AlphaScale, LayerKind, LayerSpec, Param, ParamGroup, StructuredInit, Support};
use crate::basis::{frac_gauss_deriv_at, frac_with_derivatives, half_width_from_sigma, FracSample, Grid1D};
use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, Function, Tape, Var};
use crate::tensor::Tensor;

/// Upper clip for learned orders.
pub const DEFAULT_NU_MAX: f64 = 10.0;
/// Largest half width a σ-driven support may reach; a diverging σ fails
/// here instead of allocating an enormous kernel.
pub const MAX_HALF_WIDTH: usize = 64;

/// Structured parameters of one fractional layer: per-kernel `α`, `νx`, `νy`
/// (`[K, C]`) and one `log2 σ` per output filter (`[K]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FracParams {
    pub alpha: Tensor,
    pub nu_x: Tensor,
    pub nu_y: Tensor,
    pub log2_sigma: Tensor,
    pub sigma_trainable: bool,
}

impl FracParams {
    pub fn out_channels(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log2_sigma.data().iter().map(|l| l.exp2()).collect()
    }

    fn check(&self) -> Result<()> {
        let kc = self.alpha.shape();
        if kc.len() != 2 || self.nu_x.shape() != kc || self.nu_y.shape() != kc || self.log2_sigma.shape() != [kc[0]] {
            return Err(Error::shape(format!(
                "inconsistent fractional parameters: alpha {:?}, nu_x {:?}, nu_y {:?}, log2_sigma {:?}",
                kc,
                self.nu_x.shape(),
                self.nu_y.shape(),
                self.log2_sigma.shape()
            )));
        }
        for (name, t) in [("alpha", &self.alpha), ("nu_x", &self.nu_x), ("nu_y", &self.nu_y), ("log2_sigma", &self.log2_sigma)] {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("fractional parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Clamps both order tensors into `[0, nu_max]`.
pub fn clip_orders(params: &mut FracParams, nu_max: f64) {
    for t in [&mut params.nu_x, &mut params.nu_y] {
        for v in t.data_mut() {
            *v = v.clamp(0.0, nu_max);
        }
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-filter sampled bases, kept from the forward pass for backward.
struct Materialized {
    half_widths: Vec<usize>,
    max_half_width: usize,
    /// `[k * C + c]` → bases along x and y.
    x: Vec<FracSample>,
    y: Vec<FracSample>,
}

fn materialize(p: &FracParams, support: Support) -> Result<(Materialized, Vec<f64>)> {
    p.check()?;
    let (k_out, c_in) = (p.out_channels(), p.in_channels());
    let sigmas = p.sigmas();
    let half_widths: Vec<usize> = sigmas
        .iter()
        .map(|&s| match support {
            Support::Fixed(hw) => Ok(hw),
            Support::FromSigma if s > 0.0 && s <= MAX_HALF_WIDTH as f64 / 2.0 => Ok(half_width_from_sigma(s)),
            Support::FromSigma => Err(Error::NonFinite(format!(
                "sigma {s:e} is outside the supported range (0, {}]",
                MAX_HALF_WIDTH / 2
            ))),
        })
        .collect::<Result<_>>()?;
    let max_hw = *half_widths.iter().max().expect("at least one filter");
    let size = 2 * max_hw + 1;
    let mut weights = vec![0.0; k_out * c_in * size * size];
    let mut xs_all = Vec::with_capacity(k_out * c_in);
    let mut ys_all = Vec::with_capacity(k_out * c_in);
    for k in 0..k_out {
        let grid = Grid1D::new(half_widths[k])?;
        let pts = grid.points();
        let off = max_hw - half_widths[k];
        for c in 0..c_in {
            let i = k * c_in + c;
            let a = p.alpha.data()[i];
            let bx = frac_with_derivatives(p.nu_x.data()[i], sigmas[k], &pts)?;
            let by = frac_with_derivatives(p.nu_y.data()[i], sigmas[k], &pts)?;
            let plane = &mut weights[i * size * size..(i + 1) * size * size];
            for (r, gy) in by.value.iter().enumerate() {
                for (q, gx) in bx.value.iter().enumerate() {
                    plane[(off + r) * size + off + q] = a * gy * gx;
                }
            }
            xs_all.push(bx);
            ys_all.push(by);
        }
    }
    Ok((Materialized { half_widths, max_half_width: max_hw, x: xs_all, y: ys_all }, weights))
}

struct FracFilterBank {
    bases: Materialized,
    out_channels: usize,
    in_channels: usize,
}

impl Function for FracFilterBank {
    fn name(&self) -> &'static str {
        "frac_filter_bank"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let (k_out, c_in) = (self.out_channels, self.in_channels);
        let alpha = ctx.inputs[0];
        let log2_sigma = ctx.inputs[3];
        let size = 2 * self.bases.max_half_width + 1;
        let mut d_alpha = vec![0.0; k_out * c_in];
        let mut d_nu_x = vec![0.0; k_out * c_in];
        let mut d_nu_y = vec![0.0; k_out * c_in];
        let mut d_log2_sigma = vec![0.0; k_out];
        for k in 0..k_out {
            let hw = self.bases.half_widths[k];
            let n = 2 * hw + 1;
            let off = self.bases.max_half_width - hw;
            let sigma = log2_sigma[k].exp2();
            let mut d_sigma = 0.0;
            for c in 0..c_in {
                let i = k * c_in + c;
                let (bx, by) = (&self.bases.x[i], &self.bases.y[i]);
                let g = &ctx.grad_output[i * size * size..(i + 1) * size * size];
                // col[q] = Σ_r dW[r,q]·gy[r], row[r] = Σ_q dW[r,q]·gx[q]
                let mut col = vec![0.0; n];
                let mut row = vec![0.0; n];
                for r in 0..n {
                    let line = &g[(off + r) * size + off..(off + r) * size + off + n];
                    for q in 0..n {
                        col[q] += line[q] * by.value[r];
                        row[r] += line[q] * bx.value[q];
                    }
                }
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let a = alpha[i];
                d_alpha[i] = dot(&col, &bx.value);
                d_nu_x[i] = a * dot(&col, &bx.d_nu);
                d_nu_y[i] = a * dot(&row, &by.d_nu);
                d_sigma += a * (dot(&col, &bx.d_sigma) + dot(&row, &by.d_sigma));
            }
            d_log2_sigma[k] = d_sigma * sigma * LN_2;
        }
        Ok(vec![
            ctx.needs_grad[0].then_some(d_alpha),
            ctx.needs_grad[1].then_some(d_nu_x),
            ctx.needs_grad[2].then_some(d_nu_y),
            ctx.needs_grad[3].then_some(d_log2_sigma),
        ])
    }
}

/// Convolution whose kernels are `α · G^νx(x;σ) ⊗ G^νy(y;σ)`.
#[derive(Debug, Clone)]
pub struct FracSrfConv {
    name: String,
    spec: LayerSpec,
    support: Support,
    alpha: Param,
    nu_x: Param,
    nu_y: Param,
    log2_sigma: Param,
    bias: Option<Param>,
}

impl FracSrfConv {
    pub fn new<R: Rng>(name: &str, spec: &LayerSpec, init: &StructuredInit, rng: &mut R) -> Result<Self> {
        let LayerKind::FracSrf { support } = spec.kind else {
            return Err(Error::invalid("FracSrfConv needs a FracSrf layer spec"));
        };
        let (lo, hi) = init.order_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("bad order init range [{lo}, {hi}]")));
        }
        if !(init.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma init must be positive, got {}", init.sigma)));
        }
        let (k, c) = (spec.out_channels, spec.in_channels);
        let hw = match support {
            Support::Fixed(hw) => hw,
            Support::FromSigma => half_width_from_sigma(init.sigma),
        };
        let side = 2 * hw + 1;
        let mut alpha = fan_in_uniform(rng, k * c, c * side * side);
        let mut order = || -> Vec<f64> {
            (0..k * c).map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect()
        };
        let nu_x = order();
        let nu_y = order();
        if init.alpha_scale == AlphaScale::NormMatched {
            let pts = Grid1D::new(hw)?.points();
            for ((a, &nx), &ny) in alpha.iter_mut().zip(&nu_x).zip(&nu_y) {
                let norm = l2(&frac_gauss_deriv_at(nx, init.sigma, &pts)?) * l2(&frac_gauss_deriv_at(ny, init.sigma, &pts)?);
                *a *= side as f64 / norm;
            }
        }
        let param = |suffix: &str, shape: Vec<usize>, data: Vec<f64>, group| -> Result<Param> {
            Ok(Param::new(format!("{name}.{suffix}"), Tensor::new(shape, data)?.with_grad(), group))
        };
        let mut log2_sigma = param("log2_sigma", vec![k], vec![init.sigma.log2(); k], ParamGroup::Scale)?;
        log2_sigma.tensor.set_requires_grad(spec.learn_sigma);
        Ok(Self {
            name: name.to_string(),
            spec: spec.clone(),
            support,
            alpha: param("alpha", vec![k, c], alpha, ParamGroup::Default)?,
            nu_x: param("nu_x", vec![k, c], nu_x, ParamGroup::Default)?,
            nu_y: param("nu_y", vec![k, c], nu_y, ParamGroup::Default)?,
            log2_sigma,
            bias: spec
                .bias
                .then(|| param("bias", vec![k], vec![0.0; k], ParamGroup::Default))
                .transpose()?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn support(&self) -> Support {
        self.support
    }

    /// Snapshot of the structured parameters.
    pub fn frac_params(&self) -> FracParams {
        FracParams {
            alpha: self.alpha.tensor.clone(),
            nu_x: self.nu_x.tensor.clone(),
            nu_y: self.nu_y.tensor.clone(),
            log2_sigma: self.log2_sigma.tensor.clone(),
            sigma_trainable: self.log2_sigma.tensor.requires_grad(),
        }
    }

    /// Replaces the structured parameters (shapes must match).
    pub fn set_frac_params(&mut self, p: FracParams) -> Result<()> {
        p.check()?;
        if p.alpha.shape() != self.alpha.tensor.shape() {
            return Err(Error::shape("replacement parameters have a different shape"));
        }
        let keep = |old: &Tensor, mut new: Tensor| {
            new.set_requires_grad(old.requires_grad());
            new
        };
        self.alpha.tensor = keep(&self.alpha.tensor, p.alpha);
        self.nu_x.tensor = keep(&self.nu_x.tensor, p.nu_x);
        self.nu_y.tensor = keep(&self.nu_y.tensor, p.nu_y);
        self.log2_sigma.tensor = keep(&self.log2_sigma.tensor, p.log2_sigma);
        Ok(())
    }

    pub fn clip_orders(&mut self, nu_max: f64) {
        for t in [&mut self.nu_x.tensor, &mut self.nu_y.tensor] {
            for v in t.data_mut() {
                *v = v.clamp(0.0, nu_max);
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.alpha, &self.nu_x, &self.nu_y, &self.log2_sigma];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.alpha, &mut self.nu_x, &mut self.nu_y, &mut self.log2_sigma];
        v.extend(self.bias.as_mut());
        v
    }

    pub fn filter_bank(&self) -> Result<Tensor> {
        let (m, w) = materialize(&self.frac_params(), self.support)?;
        let size = 2 * m.max_half_width + 1;
        Tensor::new([self.spec.out_channels, self.spec.in_channels, size, size], w)
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, bound: &mut Vec<Var>) -> Result<Var> {
        let vars = bind_all(tape, &self.params(), bound);
        let weights = frac_filter_bank(tape, [vars[0], vars[1], vars[2], vars[3]], self.support)?;
        let size = tape.shape(weights)[2];
        let padding = self.spec.padding.unwrap_or(size / 2);
        let out = tape.conv2d(input, weights, self.spec.stride, padding)?;
        match vars.get(4) {
            Some(&b) => tape.add_channel_bias(out, b),
            None => Ok(out),
        }
    }
}

/// Records the materialisation of a `[K, C, s, s]` bank from
/// `[alpha, nu_x, nu_y, log2_sigma]` leaves.
pub fn frac_filter_bank(tape: &mut Tape, inputs: [Var; 4], support: Support) -> Result<Var> {
    let p = FracParams {
        alpha: tape.to_tensor(inputs[0]),
        nu_x: tape.to_tensor(inputs[1]),
        nu_y: tape.to_tensor(inputs[2]),
        log2_sigma: tape.to_tensor(inputs[3]),
        sigma_trainable: tape.requires_grad(inputs[3]),
    };
    let (bases, weights) = materialize(&p, support)?;
    let (k, c) = (p.out_channels(), p.in_channels());
    let size = 2 * bases.max_half_width + 1;
    let op = FracFilterBank { bases, out_channels: k, in_channels: c };
    Ok(tape.record(&inputs, vec![k, c, size, size], weights, Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::kernel_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize, k: usize, support: Support, learn_sigma: bool) -> FracSrfConv {
        let mut spec = LayerSpec::new(LayerKind::FracSrf { support }, c, k, 5);
        spec.learn_sigma = learn_sigma;
        spec.bias = false;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        FracSrfConv::new("f", &spec, &StructuredInit::default(), &mut rng).unwrap()
    }

    fn set(l: &mut FracSrfConv, alpha: f64, nx: f64, ny: f64, log2s: f64) {
        let mut p = l.frac_params();
        p.alpha.data_mut().fill(alpha);
        p.nu_x.data_mut().fill(nx);
        p.nu_y.data_mut().fill(ny);
        p.log2_sigma.data_mut().fill(log2s);
        l.set_frac_params(p).unwrap();
    }

    #[test]
    fn bank_matches_kernel_2d() {
        let mut l = layer(1, 1, Support::FromSigma, false);
        set(&mut l, 1.0, 1.5, 2.5, 0.0);
        let bank = l.filter_bank().unwrap();
        let expect = kernel_2d(1.5, 2.5, 1.0, Grid1D::new(2).unwrap()).unwrap();
        assert_eq!(bank.shape(), &[1, 1, 5, 5]);
        assert_eq!(bank.data(), expect.values.as_slice());
    }

    #[test]
    fn mixed_scales_are_zero_embedded() {
        let mut l = layer(1, 2, Support::FromSigma, true);
        let mut p = l.frac_params();
        p.alpha.data_mut().fill(1.0);
        p.nu_x.data_mut().fill(0.0);
        p.nu_y.data_mut().fill(0.0);
        p.log2_sigma.data_mut().copy_from_slice(&[-1.0, 1.0]); // hw 1 and 4
        l.set_frac_params(p).unwrap();
        let bank = l.filter_bank().unwrap();
        assert_eq!(bank.shape(), &[2, 1, 9, 9]);
        let small = &bank.data()[..81];
        let k = kernel_2d(0.0, 0.0, 0.5, Grid1D::new(1).unwrap()).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let inside = (3..6).contains(&r) && (3..6).contains(&c);
                let v = small[r * 9 + c];
                if inside {
                    assert_eq!(v, k.get(r - 3, c - 3));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn diverged_sigma_is_an_error() {
        let mut l = layer(1, 1, Support::FromSigma, true);
        set(&mut l, 1.0, 1.0, 1.0, 6.0);
        assert!(matches!(l.filter_bank(), Err(Error::NonFinite(_))));
        set(&mut l, 1.0, 1.0, 1.0, -1100.0);
        assert!(matches!(l.filter_bank(), Err(Error::NonFinite(_))));
        let mut fixed = layer(1, 1, Support::Fixed(2), true);
        set(&mut fixed, 1.0, 1.0, 1.0, 5.0);
        assert_eq!(fixed.filter_bank().unwrap().shape(), &[1, 1, 5, 5]);
    }

    #[test]
    fn order_zero_is_gaussian_blur() {
        let mut l = layer(1, 1, Support::FromSigma, false);
        set(&mut l, 1.0, 0.0, 0.0, 0.0);
        let img: Vec<f64> = (0..49).map(|i| ((i * 7) % 5) as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new([1, 1, 7, 7], img.clone()).unwrap());
        let y = l.forward(&mut tape, x, &mut Vec::new()).unwrap();
        let g = kernel_2d(0.0, 0.0, 1.0, Grid1D::new(2).unwrap()).unwrap();
        for r in 0..7i64 {
            for c in 0..7i64 {
                let mut acc = 0.0;
                for dr in -2..=2i64 {
                    for dc in -2..=2i64 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..7).contains(&rr) && (0..7).contains(&cc) {
                            acc += img[(rr * 7 + cc) as usize] * g.get((dr + 2) as usize, (dc + 2) as usize);
                        }
                    }
                }
                assert!((tape.value(y)[(r * 7 + c) as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubling_alpha_doubles_output() {
        let mut l = layer(2, 3, Support::Fixed(2), false);
        let img = Tensor::new([1, 2, 6, 6], (0..72).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let run = |l: &FracSrfConv| {
            let mut tape = Tape::new();
            let x = tape.leaf(&img);
            let y = l.forward(&mut tape, x, &mut Vec::new()).unwrap();
            tape.value(y).to_vec()
        };
        let before = run(&l);
        let mut p = l.frac_params();
        p.alpha.data_mut().iter_mut().for_each(|a| *a *= 2.0);
        l.set_frac_params(p).unwrap();
        let after = run(&l);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn rematerializes_after_mutation() {
        let mut l = layer(1, 1, Support::Fixed(2), false);
        set(&mut l, 1.0, 1.2, 0.4, 0.0);
        let before = l.filter_bank().unwrap();
        let mut p = l.frac_params();
        p.nu_y.data_mut()[0] = 0.41;
        l.set_frac_params(p).unwrap();
        assert_ne!(before, l.filter_bank().unwrap());
    }

    #[test]
    fn clipping() {
        let mut l = layer(1, 3, Support::Fixed(2), false);
        let mut p = l.frac_params();
        p.nu_x.data_mut().copy_from_slice(&[-0.3, 4.2, 12.0]);
        p.nu_y.data_mut().copy_from_slice(&[12.0, -1.0, 0.5]);
        clip_orders(&mut p, 10.0);
        assert_eq!(p.nu_x.data(), &[0.0, 4.2, 10.0]);
        assert_eq!(p.nu_y.data(), &[10.0, 0.0, 0.5]);
        let once = p.clone();
        clip_orders(&mut p, 10.0);
        assert_eq!(once, p);
        l.set_frac_params(p.clone()).unwrap();
        l.clip_orders(10.0);
        assert_eq!(l.frac_params(), p);
    }

    #[test]
    fn rejects_non_finite_parameters() {
        let mut l = layer(1, 1, Support::Fixed(2), false);
        let mut p = l.frac_params();
        p.nu_x.data_mut()[0] = f64::NAN;
        assert!(l.set_frac_params(p.clone()).is_err());
        // Bypass the setter and make sure forward still refuses.
        l.nu_x.tensor.data_mut()[0] = f64::INFINITY;
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([1, 1, 5, 5]));
        assert!(matches!(l.forward(&mut tape, x, &mut Vec::new()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn channel_mismatch() {
        let l = layer(2, 1, Support::Fixed(2), false);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([1, 3, 5, 5]));
        assert!(matches!(l.forward(&mut tape, x, &mut Vec::new()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn init_orders_in_range() {
        let mut spec = LayerSpec::new(LayerKind::FracSrf { support: Support::Fixed(2) }, 8, 16, 5);
        spec.learn_sigma = true;
        let init = StructuredInit { order_range: (1.0, 6.0), sigma: 1.0, ..Default::default() };
        let l = FracSrfConv::new("f", &spec, &init, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = l.frac_params();
        assert!(p.nu_x.data().iter().chain(p.nu_y.data()).all(|v| (1.0..=6.0).contains(v)));
        assert!(p.sigma_trainable);
        assert_eq!(p.log2_sigma.data(), &[0.0; 16]);
        let names: Vec<&str> = l.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["f.alpha", "f.nu_x", "f.nu_y", "f.log2_sigma", "f.bias"]);
    }
}
