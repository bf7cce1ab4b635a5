use std::f64::consts::LN_2;

use rand::Rng;

use super::fracsrf::l2;
use super::{bind_all, fan_in_uniform, AlphaScale, LayerKind, LayerSpec, Param, ParamGroup, StructuredInit};
use crate::basis::{gauss_deriv_family, Grid1D};
use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, Function, Tape, Var};
use crate::tensor::Tensor;

/// Coefficients `[K, C, (N+1)²]` over the separable basis, entry
/// `i·(N+1) + j` weighting `G^j(y) ⊗ G^i(x)`, plus one `log2 σ` per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfParams {
    pub alpha: Tensor,
    pub log2_sigma: Tensor,
    pub order: usize,
}

impl SrfParams {
    pub fn basis_len(order: usize) -> usize {
        (order + 1) * (order + 1)
    }
}

/// Integer-order Gaussian derivatives `0 ..= order + 2` per filter; the two
/// extra orders feed the scale derivative.
fn families(log2_sigma: &[f64], order: usize, half_width: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let pts = Grid1D::new(half_width)?.points();
    Ok(log2_sigma
        .iter()
        .map(|l| gauss_deriv_family(order + 2, l.exp2(), &pts))
        .collect())
}

fn materialize(alpha: &[f64], fams: &[Vec<Vec<f64>>], in_channels: usize, order: usize, size: usize) -> Vec<f64> {
    let b = SrfParams::basis_len(order);
    let mut w = vec![0.0; alpha.len() / b * size * size];
    for (kc, coeffs) in alpha.chunks(b).enumerate() {
        let fam = &fams[kc / in_channels];
        let plane = &mut w[kc * size * size..(kc + 1) * size * size];
        for i in 0..=order {
            for j in 0..=order {
                let a = coeffs[i * (order + 1) + j];
                if a == 0.0 {
                    continue;
                }
                for r in 0..size {
                    for q in 0..size {
                        plane[r * size + q] += a * fam[j][r] * fam[i][q];
                    }
                }
            }
        }
    }
    w
}

struct SrfFilterBank {
    fams: Vec<Vec<Vec<f64>>>,
    in_channels: usize,
    order: usize,
    size: usize,
}

impl Function for SrfFilterBank {
    fn name(&self) -> &'static str {
        "srf_filter_bank"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let (alpha, log2_sigma) = (ctx.inputs[0], ctx.inputs[1]);
        let (order, size) = (self.order, self.size);
        let b = SrfParams::basis_len(order);
        let mut d_alpha = vec![0.0; alpha.len()];
        let mut d_log2_sigma = vec![0.0; log2_sigma.len()];
        for (kc, coeffs) in alpha.chunks(b).enumerate() {
            let k = kc / self.in_channels;
            let fam = &self.fams[k];
            let sigma = log2_sigma[k].exp2();
            let g = &ctx.grad_output[kc * size * size..(kc + 1) * size * size];
            // proj[j][q] = Σ_r dW[r,q]·G^j[r]
            let proj: Vec<Vec<f64>> = (0..=order + 2)
                .map(|j| {
                    let mut acc = vec![0.0; size];
                    for r in 0..size {
                        for q in 0..size {
                            acc[q] += g[r * size + q] * fam[j][r];
                        }
                    }
                    acc
                })
                .collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut d_sigma = 0.0;
            for i in 0..=order {
                for j in 0..=order {
                    let idx = i * (order + 1) + j;
                    d_alpha[kc * b + idx] = dot(&proj[j], &fam[i]);
                    // ∂(G^j ⊗ G^i)/∂σ = σ(G^(j+2) ⊗ G^i + G^j ⊗ G^(i+2))
                    d_sigma += coeffs[idx] * sigma * (dot(&proj[j + 2], &fam[i]) + dot(&proj[j], &fam[i + 2]));
                }
            }
            d_log2_sigma[k] += d_sigma * sigma * LN_2;
        }
        Ok(vec![ctx.needs_grad[0].then_some(d_alpha), ctx.needs_grad[1].then_some(d_log2_sigma)])
    }
}

/// Structured receptive field convolution: each kernel is a linear
/// combination of separable Gaussian derivatives up to a fixed order.
#[derive(Debug, Clone)]
pub struct SrfConv {
    name: String,
    spec: LayerSpec,
    order: usize,
    alpha: Param,
    log2_sigma: Param,
    bias: Option<Param>,
}

impl SrfConv {
    pub fn new<R: Rng>(name: &str, spec: &LayerSpec, init: &StructuredInit, rng: &mut R) -> Result<Self> {
        let sigma = init.sigma;
        let LayerKind::Srf { order } = spec.kind else {
            return Err(Error::invalid("SrfConv needs an Srf layer spec"));
        };
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let (k, c) = (spec.out_channels, spec.in_channels);
        let b = SrfParams::basis_len(order);
        let side = spec.kernel_hint;
        let mut alpha = fan_in_uniform(rng, k * c * b, c * side * side);
        if init.alpha_scale == AlphaScale::NormMatched {
            // Σ_ij |G^j ⊗ G^i|² = (Σ_i |G^i|²)²
            let fam = &families(&[sigma.log2()], order, side / 2)?[0];
            let energy: f64 = fam[..=order].iter().map(|g| l2(g).powi(2)).sum();
            alpha.iter_mut().for_each(|a| *a *= side as f64 / energy);
        }
        let mut log2_sigma = Tensor::new([k], vec![sigma.log2(); k])?;
        log2_sigma.set_requires_grad(spec.learn_sigma);
        Ok(Self {
            name: name.to_string(),
            spec: spec.clone(),
            order,
            alpha: Param::new(format!("{name}.alpha"), Tensor::new([k, c, b], alpha)?.with_grad(), ParamGroup::Default),
            log2_sigma: Param::new(format!("{name}.log2_sigma"), log2_sigma, ParamGroup::Scale),
            bias: spec.bias.then(|| {
                Param::new(format!("{name}.bias"), Tensor::zeros([k]).with_grad(), ParamGroup::Default)
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn srf_params(&self) -> SrfParams {
        SrfParams {
            alpha: self.alpha.tensor.clone(),
            log2_sigma: self.log2_sigma.tensor.clone(),
            order: self.order,
        }
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha.tensor
    }

    pub fn set_alpha(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.alpha.tensor.len() {
            return Err(Error::shape("alpha replacement has the wrong length"));
        }
        self.alpha.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.alpha, &self.log2_sigma];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.alpha, &mut self.log2_sigma];
        v.extend(self.bias.as_mut());
        v
    }

    fn half_width(&self) -> usize {
        self.spec.kernel_hint / 2
    }

    pub fn filter_bank(&self) -> Result<Tensor> {
        let p = self.srf_params();
        let size = self.spec.kernel_hint;
        let fams = families(p.log2_sigma.data(), self.order, self.half_width())?;
        let w = materialize(p.alpha.data(), &fams, self.spec.in_channels, self.order, size);
        Tensor::new([self.spec.out_channels, self.spec.in_channels, size, size], w)
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, bound: &mut Vec<Var>) -> Result<Var> {
        if !self.alpha.tensor.is_finite() || !self.log2_sigma.tensor.is_finite() {
            return Err(Error::NonFinite(format!("{} parameters", self.name)));
        }
        let vars = bind_all(tape, &self.params(), bound);
        let size = self.spec.kernel_hint;
        let fams = families(tape.value(vars[1]), self.order, self.half_width())?;
        let w = materialize(tape.value(vars[0]), &fams, self.spec.in_channels, self.order, size);
        let (k, c) = (self.spec.out_channels, self.spec.in_channels);
        let op = SrfFilterBank { fams, in_channels: c, order: self.order, size };
        let weights = tape.record(&vars[..2], vec![k, c, size, size], w, Box::new(op));
        let padding = self.spec.padding.unwrap_or(size / 2);
        let out = tape.conv2d(input, weights, self.spec.stride, padding)?;
        match vars.get(2) {
            Some(&b) => tape.add_channel_bias(out, b),
            None => Ok(out),
        }
    }
}
