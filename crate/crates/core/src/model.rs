//! Sequential conv networks with a global-average-pool classification head.
//!
//! `input → conv → ReLU → … → conv → [head] → global average pool → logits`;
//! the last layer's channel count is the number of classes and the optional
//! [`Head`] nonlinearity defaults to none.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{bias_count, param_count, Layer, LayerKind, LayerSpec, Param, StructuredInit, Support};
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

/// The three Exp-1 network families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Srf,
    FracSrf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Srf, ModelKind::FracSrf];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Srf => "srf",
            ModelKind::FracSrf => "fracsrf",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "srf" => Ok(ModelKind::Srf),
            "fracsrf" => Ok(ModelKind::FracSrf),
            other => Err(Error::invalid(format!("unknown model `{other}` (expected cnn, srf or fracsrf)"))),
        }
    }
}

/// What sits between the last conv and the global average pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Pool the last conv output directly.
    #[default]
    Linear,
    /// ReLU after the last conv as well, as in NiN.
    Relu,
    /// Pool the magnitude of the last conv output.
    Abs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub init: StructuredInit,
    #[serde(default)]
    pub head: Head,
}

/// Hidden width of the Exp-1 networks.
pub const EXP1_HIDDEN: usize = 32;

impl ModelSpec {
    /// Two 5×5 layers `in → 32 → classes`. SRF uses order 2; both structured
    /// variants keep σ = 1 fixed and the fractional one a fixed 5×5 support.
    pub fn exp1(kind: ModelKind, in_channels: usize, classes: usize) -> Self {
        let layer_kind = match kind {
            ModelKind::Cnn => LayerKind::PlainConv,
            ModelKind::Srf => LayerKind::Srf { order: 2 },
            ModelKind::FracSrf => LayerKind::FracSrf { support: Support::Fixed(2) },
        };
        Self {
            layers: vec![
                LayerSpec::new(layer_kind, in_channels, EXP1_HIDDEN, 5),
                LayerSpec::new(layer_kind, EXP1_HIDDEN, classes, 5),
            ],
            init: StructuredInit::default(),
            head: Head::default(),
        }
    }

    /// Network-in-Network for 32×32 inputs: three blocks of a k×k conv
    /// (k = 5, 5, 3) followed by two 1×1 convs. Pooling and dropout carry
    /// no parameters and are left out. Only the k×k convs take `kind`; the
    /// 1×1 convs stay plain.
    pub fn nin(kind: ModelKind, in_channels: usize, classes: usize) -> Self {
        let spatial = |k: usize, c_in, c_out| {
            let lk = match kind {
                ModelKind::Cnn => LayerKind::PlainConv,
                ModelKind::Srf => LayerKind::Srf { order: 2 },
                ModelKind::FracSrf => LayerKind::FracSrf { support: Support::Fixed(k / 2) },
            };
            LayerSpec::new(lk, c_in, c_out, k)
        };
        let pointwise = |c_in, c_out| LayerSpec::new(LayerKind::PlainConv, c_in, c_out, 1);
        Self {
            layers: vec![
                spatial(5, in_channels, 192),
                pointwise(192, 160),
                pointwise(160, 96),
                spatial(5, 96, 192),
                pointwise(192, 192),
                pointwise(192, 192),
                spatial(3, 192, 192),
                pointwise(192, 192),
                pointwise(192, classes),
            ],
            init: StructuredInit::default(),
            head: Head::Relu,
        }
    }

    /// Weights (without biases) of the layers whose kernel is wider than
    /// 1×1, i.e. the ones a structured variant replaces.
    pub fn spatial_param_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kernel_hint > 1).map(param_count).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::invalid(format!(
                    "layer {} outputs {} channels but layer {} expects {}",
                    i + 1,
                    w[0].out_channels,
                    i + 2,
                    w[1].in_channels
                )));
            }
        }
        let (lo, hi) = self.init.order_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("bad order init range [{lo}, {hi}]")));
        }
        if !(self.init.sigma > 0.0 && self.init.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma init must be positive, got {}", self.init.sigma)));
        }
        Ok(())
    }

    /// Learned weights including biases.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| param_count(l) + bias_count(l)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Initialises every layer from one ChaCha stream seeded by `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Layer::build(&format!("conv{}", i + 1), l, &spec.init, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Records the network on `tape` and returns the `[N, classes]` logits
    /// together with one leaf per entry of [`Model::params`].
    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<(Var, Vec<Var>)> {
        let mut bound = Vec::new();
        let mut x = tape.leaf(images);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x, &mut bound)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        x = match self.spec.head {
            Head::Linear => x,
            Head::Relu => tape.relu(x),
            Head::Abs => tape.abs(x),
        };
        let logits = tape.global_avg_pool(x)?;
        Ok((logits, bound))
    }

    /// Logits without recording gradients, in batches of `batch_size`.
    pub fn logits(&self, images: &Tensor, batch_size: usize, precision: Precision) -> Result<Vec<f64>> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!("images must be [N, C, H, W], got {shape:?}")));
        }
        let per: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(shape[0] * self.num_classes());
        for chunk in images.data().chunks(batch_size.max(1) * per) {
            let n = chunk.len() / per;
            let batch = Tensor::new([n, shape[1], shape[2], shape[3]], chunk.to_vec())?;
            let frozen = self.frozen();
            let mut tape = Tape::with_conv_precision(precision);
            let (logits, _) = frozen.forward(&mut tape, &batch)?;
            out.extend_from_slice(tape.value(logits));
        }
        Ok(out)
    }

    /// Copy with every parameter detached, so forward passes record no
    /// gradient bookkeeping.
    fn frozen(&self) -> Model {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.tensor.set_requires_grad(false);
        }
        m
    }

    pub fn clip_orders(&mut self, nu_max: f64) {
        for l in &mut self.layers {
            if let Layer::Frac(f) = l {
                f.clip_orders(nu_max);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self.params().into_iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    /// Overwrites every parameter with the checkpoint tensor of the same name.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.params_mut() {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint parameter `{}`", p.name)));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nin_replacement_ratio() {
        let plain = ModelSpec::nin(ModelKind::Cnn, 3, 10);
        let frac = ModelSpec::nin(ModelKind::FracSrf, 3, 10);
        let srf = ModelSpec::nin(ModelKind::Srf, 3, 10);
        // 25·3·192 + 25·96·192 + 9·192·192
        assert_eq!(plain.spatial_param_count(), 806_976);
        // (3·3·192 + 192) + (3·96·192 + 192) + (3·192·192 + 192)
        assert_eq!(frac.spatial_param_count(), 168_192);
        // 9 coefficients per kernel
        assert_eq!(srf.spatial_param_count(), 9 * (3 * 192 + 96 * 192 + 192 * 192));
        let ratio = frac.spatial_param_count() as f64 / plain.spatial_param_count() as f64;
        assert!(ratio < 0.36);
        for s in [&plain, &frac, &srf] {
            s.validate().unwrap();
            assert_eq!(s.num_classes(), 10);
        }
    }

    #[test]
    fn exp1_shapes() {
        for kind in ModelKind::ALL {
            let spec = ModelSpec::exp1(kind, 1, 5);
            let m = Model::build(&spec, 0).unwrap();
            assert_eq!(m.layers().len(), 2);
            assert_eq!((spec.layers[0].in_channels, spec.layers[0].out_channels), (1, 32));
            assert_eq!((spec.layers[1].in_channels, spec.layers[1].out_channels), (32, 5));
            let mut tape = Tape::new();
            let (logits, bound) = m.forward(&mut tape, &Tensor::zeros([2, 1, 12, 12])).unwrap();
            assert_eq!(tape.shape(logits), &[2, 5]);
            assert_eq!(bound.len(), m.params().len());
        }
    }

    #[test]
    fn exp1_param_counts() {
        assert_eq!(ModelSpec::exp1(ModelKind::Cnn, 1, 5).param_count(), 32 * 25 + 32 + 5 * 32 * 25 + 5);
        assert_eq!(ModelSpec::exp1(ModelKind::Srf, 1, 5).param_count(), 32 * 9 + 32 + 5 * 32 * 9 + 5);
        assert_eq!(ModelSpec::exp1(ModelKind::FracSrf, 1, 5).param_count(), (3 * 32 + 32 + 32) + (3 * 160 + 5 + 5));
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let spec = ModelSpec::exp1(ModelKind::FracSrf, 1, 5);
        let a = Model::build(&spec, 3).unwrap().to_checkpoint();
        assert_eq!(a, Model::build(&spec, 3).unwrap().to_checkpoint());
        assert_ne!(a, Model::build(&spec, 4).unwrap().to_checkpoint());
    }

    #[test]
    fn initial_orders_in_range() {
        let m = Model::build(&ModelSpec::exp1(ModelKind::FracSrf, 1, 5), 1).unwrap();
        for p in m.params() {
            if p.name.ends_with(".nu_x") || p.name.ends_with(".nu_y") {
                assert!(p.tensor.data().iter().all(|v| (1.0..=6.0).contains(v)));
            }
        }
    }

    #[test]
    fn rejects_broken_chain() {
        let mut spec = ModelSpec::exp1(ModelKind::Cnn, 1, 5);
        spec.layers[1].in_channels = 16;
        assert!(Model::build(&spec, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_through_model() {
        let spec = ModelSpec::exp1(ModelKind::Srf, 1, 5);
        let src = Model::build(&spec, 1).unwrap();
        let mut dst = Model::build(&spec, 2).unwrap();
        let ckpt = Checkpoint::from_bytes(&src.to_checkpoint().to_bytes()).unwrap();
        dst.load_checkpoint(&ckpt).unwrap();
        for (a, b) in src.params().iter().zip(dst.params()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let other = Model::build(&ModelSpec::exp1(ModelKind::Cnn, 1, 5), 0).unwrap().to_checkpoint();
        assert!(dst.load_checkpoint(&other).is_err());
    }

    #[test]
    fn parses_kinds() {
        assert_eq!("fracsrf".parse::<ModelKind>().unwrap(), ModelKind::FracSrf);
        assert!("bogus".parse::<ModelKind>().is_err());
    }
}
