use rand::Rng;

use super::{bind_all, fan_in_uniform, LayerSpec, Param, ParamGroup};
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordinary convolution with free `[K, C, h, w]` weights.
#[derive(Debug, Clone)]
pub struct PlainConv {
    name: String,
    spec: LayerSpec,
    weight: Param,
    bias: Option<Param>,
}

impl PlainConv {
    pub fn new<R: Rng>(name: &str, spec: &LayerSpec, rng: &mut R) -> Self {
        let (k, c, s) = (spec.out_channels, spec.in_channels, spec.kernel_hint);
        let w = fan_in_uniform(rng, k * c * s * s, c * s * s);
        let weight = Tensor::new([k, c, s, s], w).expect("validated spec").with_grad();
        Self {
            name: name.to_string(),
            spec: spec.clone(),
            weight: Param::new(format!("{name}.weight"), weight, ParamGroup::Default),
            bias: spec
                .bias
                .then(|| Param::new(format!("{name}.bias"), Tensor::zeros([k]).with_grad(), ParamGroup::Default)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight.tensor
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, bound: &mut Vec<Var>) -> Result<Var> {
        let vars = bind_all(tape, &self.params(), bound);
        let padding = self.spec.padding.unwrap_or(self.spec.kernel_hint / 2);
        let out = tape.conv2d(input, vars[0], self.spec.stride, padding)?;
        match vars.get(1) {
            Some(&b) => tape.add_channel_bias(out, b),
            None => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_names() {
        let spec = LayerSpec::new(LayerKind::PlainConv, 4, 6, 3);
        let l = PlainConv::new("c1", &spec, &mut ChaCha8Rng::seed_from_u64(0));
        let bound = 1.0 / 6.0;
        assert_eq!(l.weight().shape(), &[6, 4, 3, 3]);
        assert!(l.weight().data().iter().all(|w| w.abs() <= bound));
        let names: Vec<&str> = l.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["c1.weight", "c1.bias"]);
    }

    #[test]
    fn same_padding_keeps_size() {
        let spec = LayerSpec::new(LayerKind::PlainConv, 1, 2, 5);
        let l = PlainConv::new("c", &spec, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([3, 1, 8, 9]));
        let y = l.forward(&mut tape, x, &mut Vec::new()).unwrap();
        assert_eq!(tape.shape(y), &[3, 2, 8, 9]);
    }
}
