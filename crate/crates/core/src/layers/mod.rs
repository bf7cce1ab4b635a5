//! Trainable convolution layers.
//!
//! * [`PlainConv`]: every kernel pixel is a free weight.
//! * [`SrfConv`]: each kernel is a learned linear combination of all
//!   separable Gaussian derivatives up to a fixed order.
//! * [`FracSrfConv`]: each kernel is a single weighted Gaussian derivative
//!   with learned fractional orders along x and y.
//!
//! Structured layers rebuild their filter bank from the current parameters
//! on every forward pass.

mod entropy;
mod fracsrf;
mod plain;
mod srf;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use entropy::{effective_basis_counts, entropy_regularizer, kernel_entropies, EFFECTIVE_THRESHOLD};
pub use fracsrf::{clip_orders, FracParams, FracSrfConv, DEFAULT_NU_MAX};
pub use plain::PlainConv;
pub use srf::{SrfConv, SrfParams};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which optimizer settings a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Default,
    /// Log-scale parameters, optionally with their own learning rate and decay.
    Scale,
}

/// A named trainable (or frozen) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

impl Param {
    pub(crate) fn new(name: String, tensor: Tensor, group: ParamGroup) -> Self {
        Self { name, tensor, group }
    }
}

/// Kernel support rule for fractional layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// `half_width_from_sigma(σ)` per filter, re-evaluated every forward.
    FromSigma,
    /// Fixed half width regardless of σ.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    PlainConv,
    Srf { order: usize },
    FracSrf { support: Support },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel size for plain and SRF layers (odd).
    pub kernel_hint: usize,
    pub stride: usize,
    /// `None` means size-preserving (`kernel / 2`).
    pub padding: Option<usize>,
    /// Whether σ is trained (structured layers only).
    pub learn_sigma: bool,
    pub bias: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_channels: usize, out_channels: usize, kernel_hint: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            kernel_hint,
            stride: 1,
            padding: None,
            learn_sigma: false,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("layer channel counts must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("layer stride must be positive"));
        }
        if !matches!(self.kind, LayerKind::FracSrf { .. }) && self.kernel_hint % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel_hint)));
        }
        Ok(())
    }
}

/// Number of weights a layer learns, excluding biases (see [`bias_count`]).
///
/// * plain: `K·C·h·w`
/// * SRF of order N: `K·C·(N+1)²`, plus `K` scales when σ is learned
/// * FracSRF: `3·K·C + K` (α, νx, νy per kernel and one σ per filter)
pub fn param_count(spec: &LayerSpec) -> usize {
    let (k, c) = (spec.out_channels, spec.in_channels);
    match spec.kind {
        LayerKind::PlainConv => k * c * spec.kernel_hint * spec.kernel_hint,
        LayerKind::Srf { order } => k * c * (order + 1) * (order + 1) + if spec.learn_sigma { k } else { 0 },
        LayerKind::FracSrf { .. } => 3 * k * c + k,
    }
}

pub fn bias_count(spec: &LayerSpec) -> usize {
    if spec.bias {
        spec.out_channels
    } else {
        0
    }
}

/// How structured coefficients are scaled at initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScale {
    /// `α ~ U(±1/sqrt(C·h·w))`, the bound a plain conv uses per tap.
    #[default]
    FanIn,
    /// Rescales the fan-in draw so each kernel's expected squared L2 norm
    /// equals that of a fan-in initialised plain conv kernel, `1/(3C)`.
    NormMatched,
}

/// Initial values for structured layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructuredInit {
    /// Orders are drawn uniformly from `[lo, hi]`.
    pub order_range: (f64, f64),
    pub sigma: f64,
    pub alpha_scale: AlphaScale,
}

impl Default for StructuredInit {
    fn default() -> Self {
        Self { order_range: (1.0, 6.0), sigma: 1.0, alpha_scale: AlphaScale::FanIn }
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub(crate) fn fan_in_uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Any supported layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Plain(PlainConv),
    Srf(SrfConv),
    Frac(FracSrfConv),
}

impl Layer {
    pub fn build<R: Rng>(name: &str, spec: &LayerSpec, init: &StructuredInit, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            LayerKind::PlainConv => Layer::Plain(PlainConv::new(name, spec, rng)),
            LayerKind::Srf { .. } => Layer::Srf(SrfConv::new(name, spec, init, rng)?),
            LayerKind::FracSrf { .. } => Layer::Frac(FracSrfConv::new(name, spec, init, rng)?),
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Layer::Plain(l) => l.name(),
            Layer::Srf(l) => l.name(),
            Layer::Frac(l) => l.name(),
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        match self {
            Layer::Plain(l) => l.spec(),
            Layer::Srf(l) => l.spec(),
            Layer::Frac(l) => l.spec(),
        }
    }

    /// Records the layer on `tape`. One leaf per entry of [`Layer::params`]
    /// is pushed onto `bound`, in that order.
    pub fn forward(&self, tape: &mut Tape, input: Var, bound: &mut Vec<Var>) -> Result<Var> {
        match self {
            Layer::Plain(l) => l.forward(tape, input, bound),
            Layer::Srf(l) => l.forward(tape, input, bound),
            Layer::Frac(l) => l.forward(tape, input, bound),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Plain(l) => l.params(),
            Layer::Srf(l) => l.params(),
            Layer::Frac(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Plain(l) => l.params_mut(),
            Layer::Srf(l) => l.params_mut(),
            Layer::Frac(l) => l.params_mut(),
        }
    }

    /// Materialised `[K, C, h, w]` weights at the current parameters.
    pub fn filter_bank(&self) -> Result<Tensor> {
        match self {
            Layer::Plain(l) => Ok(l.weight().clone()),
            Layer::Srf(l) => l.filter_bank(),
            Layer::Frac(l) => l.filter_bank(),
        }
    }
}

/// Binds every param of a layer as a tape leaf, in order.
pub(crate) fn bind_all(tape: &mut Tape, params: &[&Param], bound: &mut Vec<Var>) -> Vec<Var> {
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.tensor)).collect();
    bound.extend_from_slice(&vars);
    vars
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_examples() {
        let plain = LayerSpec::new(LayerKind::PlainConv, 16, 32, 3);
        assert_eq!(param_count(&plain), 4608);
        let frac = LayerSpec::new(LayerKind::FracSrf { support: Support::FromSigma }, 16, 32, 3);
        assert_eq!(param_count(&frac), 1568);
        let srf = LayerSpec::new(LayerKind::Srf { order: 2 }, 16, 32, 5);
        assert_eq!(param_count(&srf), 4608);
        let srf_learned = LayerSpec { learn_sigma: true, ..srf };
        assert_eq!(param_count(&srf_learned), 4608 + 32);
        assert_eq!(bias_count(&plain), 32);
        assert_eq!(bias_count(&LayerSpec { bias: false, ..plain }), 0);
    }

    #[test]
    fn frac_to_plain_ratio_is_one_third_plus_scale_term() {
        for c in 5..=512 {
            let plain = LayerSpec::new(LayerKind::PlainConv, c, c, 3);
            let frac = LayerSpec::new(LayerKind::FracSrf { support: Support::FromSigma }, c, c, 3);
            let ratio = param_count(&frac) as f64 / param_count(&plain) as f64;
            assert!(ratio < 0.36, "C={c}: {ratio}");
            assert!((ratio - (1.0 / 3.0 + 1.0 / (9.0 * c as f64))).abs() < 1e-12);
        }
        // At C = 4 the shared-scale term lifts the ratio to exactly 13/36.
        let plain = LayerSpec::new(LayerKind::PlainConv, 4, 4, 3);
        let frac = LayerSpec::new(LayerKind::FracSrf { support: Support::FromSigma }, 4, 4, 3);
        assert_eq!(param_count(&frac) * 36, param_count(&plain) * 13);
    }

    #[test]
    fn validation() {
        let mut s = LayerSpec::new(LayerKind::PlainConv, 1, 1, 4);
        assert!(s.validate().is_err());
        s.kernel_hint = 3;
        assert!(s.validate().is_ok());
        s.in_channels = 0;
        assert!(s.validate().is_err());
    }
}
