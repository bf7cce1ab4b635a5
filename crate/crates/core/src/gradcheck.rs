//! Finite-difference verification of every analytic gradient in the engine.
//!
//! A small network exercising all layer types,
//!
//! ```text
//! input → FracSRF → ReLU → SRF(N=2) → ReLU → conv 3×3 → GAP → cross-entropy
//!       + λ · α-entropy(SRF)
//! ```
//!
//! is differentiated once on the tape and then probed entry by entry with
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::{entropy_regularizer, Layer, LayerKind, LayerSpec, StructuredInit, Support};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is numerically zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;
const ENTROPY_LAMBDA: f64 = 0.1;
/// Every ReLU input must be at least this far from the kink, far more than
/// a ±FD_STEP perturbation can move it.
const KINK_MARGIN: f64 = 2e-4;
/// Fraction of ReLU inputs that must be positive, so the check is not
/// vacuous.
const MIN_ALIVE: f64 = 0.25;
const MAX_DRAWS: usize = 1000;
/// Magnitude range of the SRF coefficients.
const ALPHA_MIN: f64 = 0.05;
const ALPHA_MAX: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Net {
    input: Tensor,
    labels: Vec<usize>,
    layers: Vec<Layer>,
}

impl Net {
    /// Draws networks from `seed` until one sits on a smooth piece of the
    /// loss with enough live units.
    fn build(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_DRAWS {
            let net = Self::draw(&mut rng)?;
            let pre = net.relu_inputs()?;
            let alive = pre.iter().filter(|&&v| v > 0.0).count() as f64 / pre.len() as f64;
            if alive >= MIN_ALIVE && pre.iter().all(|v| v.abs() > KINK_MARGIN) {
                return Ok(net);
            }
        }
        Err(crate::error::Error::invalid(format!("no usable gradcheck network in {MAX_DRAWS} draws")))
    }

    fn draw(rng: &mut ChaCha8Rng) -> Result<Self> {
        let init = StructuredInit::default();
        let frac_spec = LayerSpec {
            learn_sigma: true,
            ..LayerSpec::new(LayerKind::FracSrf { support: Support::FromSigma }, 2, 3, 0)
        };
        let srf_spec = LayerSpec { learn_sigma: true, ..LayerSpec::new(LayerKind::Srf { order: 2 }, 3, 2, 5) };
        let plain_spec = LayerSpec::new(LayerKind::PlainConv, 2, 3, 3);
        let mut layers = vec![
            Layer::build("frac", &frac_spec, &init, rng)?,
            Layer::build("srf", &srf_spec, &init, rng)?,
            Layer::build("plain", &plain_spec, &init, rng)?,
        ];
        // Orders strictly inside (n, n + 1) and scales away from the
        // support-size breakpoints so that ±FD_STEP stays on one smooth piece.
        for layer in &mut layers {
            for p in layer.params_mut() {
                let data = p.tensor.data_mut();
                if p.name.ends_with(".nu_x") || p.name.ends_with(".nu_y") {
                    data.iter_mut().for_each(|v| *v = rng.random_range(0..4) as f64 + rng.random_range(0.1..0.9));
                } else if p.name.ends_with(".log2_sigma") {
                    data.iter_mut().for_each(|v| *v = rng.random_range(0.1..0.5));
                } else if p.name == "srf.alpha" {
                    // |α| in the entropy term has a kink at 0.
                    data.iter_mut().for_each(|v| {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        *v = sign * rng.random_range(ALPHA_MIN..ALPHA_MAX);
                    });
                } else if p.name.ends_with(".bias") {
                    data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
                }
            }
        }
        let input = Tensor::new([2, 2, 7, 7], (0..196).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        Ok(Self { input, labels: vec![0, 2], layers })
    }

    fn relu_inputs(&self) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut x = tape.leaf(&self.input);
        let mut out = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layer.forward(&mut tape, x, &mut Vec::new())?;
            out.extend_from_slice(tape.value(x));
            x = tape.relu(x);
        }
        Ok(out)
    }

    /// Loss and, when `grads` is set, the gradient of the input followed by
    /// every parameter in layer order.
    fn eval(&self, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let input = tape.leaf(&self.input.clone().with_grad());
        let mut bound = Vec::new();
        let mut x = input;
        let mut srf_alpha = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let first = bound.len();
            x = layer.forward(&mut tape, x, &mut bound)?;
            if matches!(layer, Layer::Srf(_)) {
                srf_alpha = Some(bound[first]);
            }
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        let logits = tape.global_avg_pool(x)?;
        let mut loss = tape.softmax_cross_entropy(logits, &self.labels)?;
        if let Some(a) = srf_alpha {
            let h = entropy_regularizer(&mut tape, a)?;
            let h = tape.scale(h, ENTROPY_LAMBDA);
            loss = tape.add(loss, h)?;
        }
        let value = tape.value(loss)[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let all = std::iter::once(input).chain(bound);
        Ok((value, all.map(|v| tape.grad(v).map_or_else(Vec::new, <[f64]>::to_vec)).collect()))
    }

    fn names(&self) -> Vec<String> {
        std::iter::once("input".to_string())
            .chain(self.layers.iter().flat_map(|l| l.params().into_iter().map(|p| p.name.clone())))
            .collect()
    }

    fn entry(&mut self, tensor: usize, index: usize) -> &mut f64 {
        if tensor == 0 {
            return &mut self.input.data_mut()[index];
        }
        let mut params: Vec<_> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        let p = params.swap_remove(tensor - 1);
        &mut p.tensor.data_mut()[index]
    }
}

/// Checks every gradient of the test network built from `seed`.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut net = Net::build(seed)?;
    let (_, analytic) = net.eval(true)?;
    let names = net.names();
    let mut tensors = Vec::with_capacity(names.len());
    for (t, (name, grad)) in names.into_iter().zip(&analytic).enumerate() {
        let mut max_rel_error: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let orig = *net.entry(t, i);
            *net.entry(t, i) = orig + FD_STEP;
            let up = net.eval(false)?.0;
            *net.entry(t, i) = orig - FD_STEP;
            let down = net.eval(false)?.0;
            *net.entry(t, i) = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel_error = max_rel_error.max(rel_error(a, numeric));
        }
        tensors.push(TensorCheck { name, entries: grad.len(), max_rel_error });
    }
    Ok(GradcheckReport { seed, step: FD_STEP, tolerance: TOLERANCE, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_every_parameter() {
        let r = gradcheck(1).unwrap();
        let names: Vec<&str> = r.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "input",
                "frac.alpha",
                "frac.nu_x",
                "frac.nu_y",
                "frac.log2_sigma",
                "frac.bias",
                "srf.alpha",
                "srf.log2_sigma",
                "srf.bias",
                "plain.weight",
                "plain.bias"
            ]
        );
        assert!(r.tensors.iter().all(|t| t.entries > 0));
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
