//! Mini-batch training, evaluation and run reports.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::layers::{
    effective_basis_counts, entropy_regularizer, kernel_entropies, Layer, ParamGroup, DEFAULT_NU_MAX,
    EFFECTIVE_THRESHOLD,
};
use crate::metrics::{argmax_rows, ks_two_sample, ConfusionMatrix};
use crate::model::Model;
use crate::optim::{sgd_step, SgdState};
use crate::tape::{Precision, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate for `log2_sigma` parameters; `None` uses `lr`.
    pub sigma_lr: Option<f64>,
    /// Weight decay for `log2_sigma` parameters; `None` uses `weight_decay`.
    pub sigma_wd: Option<f64>,
    /// Weight of the mean α entropy of SRF layers; 0 disables it.
    pub entropy_lambda: f64,
    pub seed: u64,
    pub nu_max: f64,
    /// Arithmetic inside convolutions during training and evaluation.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            sigma_lr: None,
            sigma_wd: None,
            entropy_lambda: 0.0,
            seed: 0,
            nu_max: DEFAULT_NU_MAX,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.entropy_lambda >= 0.0) {
            return Err(Error::invalid(format!("entropy lambda must be non-negative, got {}", self.entropy_lambda)));
        }
        if !(self.nu_max > 0.0) {
            return Err(Error::invalid(format!("nu_max must be positive, got {}", self.nu_max)));
        }
        if let Some(lr) = self.sigma_lr {
            if !(lr > 0.0) {
                return Err(Error::invalid(format!("sigma learning rate must be positive, got {lr}")));
            }
        }
        self.optimizers().map(|_| ())
    }

    fn optimizers(&self) -> Result<(SgdState, SgdState)> {
        Ok((
            SgdState::new(self.lr, self.momentum, self.weight_decay)?,
            SgdState::new(
                self.sigma_lr.unwrap_or(self.lr),
                self.momentum,
                self.sigma_wd.unwrap_or(self.weight_decay),
            )?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches (without the entropy term).
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub accuracy: f64,
    /// Mean per-kernel α entropy over SRF layers at the end of the epoch.
    pub alpha_entropy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_class_recall: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// Equal-width histogram; `edges.len() == counts.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Values outside `[lo, hi]` are clamped into the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

/// Learned structure of one layer at the end of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub nu_x: Option<Histogram>,
    pub nu_y: Option<Histogram>,
    pub sigma: Option<Histogram>,
    /// Median count of SRF basis functions above the effective threshold.
    pub median_effective_basis: Option<f64>,
    /// Kolmogorov-Smirnov distance between the orders (x and y pooled) at
    /// initialisation and after training.
    pub order_ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub param_count: usize,
    pub config: TrainConfig,
    pub initial_alpha_entropy: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub mean_seconds_per_epoch: f64,
    pub test: Option<EvalReport>,
    pub layers: Vec<LayerSummary>,
}

impl RunReport {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.mean_seconds_per_epoch = 0.0;
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }
}

pub fn evaluate(model: &Model, set: &LabeledImageSet, batch_size: usize, precision: Precision) -> Result<EvalReport> {
    let classes = model.num_classes();
    if set.num_classes() != classes {
        return Err(Error::invalid(format!("model predicts {classes} classes, data has {}", set.num_classes())));
    }
    let logits = model.logits(&set.images, batch_size, precision)?;
    let confusion = ConfusionMatrix::from_predictions(classes, &set.labels, &argmax_rows(&logits, classes))?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        macro_precision: confusion.macro_precision(),
        macro_recall: confusion.macro_recall(),
        per_class_recall: confusion.recalls(),
        confusion,
    })
}

/// Mean α entropy over every SRF kernel of the model, `None` without SRF layers.
pub fn mean_alpha_entropy(model: &Model) -> Result<Option<f64>> {
    let mut all = Vec::new();
    for l in model.layers() {
        if let Layer::Srf(s) = l {
            all.extend(kernel_entropies(s.alpha())?);
        }
    }
    Ok((!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn summarize_layers(model: &Model, nu_max: f64) -> Result<Vec<LayerSummary>> {
    const BINS: usize = 20;
    model
        .layers()
        .iter()
        .map(|l| {
            let mut s = LayerSummary {
                layer: l.name().to_string(),
                nu_x: None,
                nu_y: None,
                sigma: None,
                median_effective_basis: None,
                order_ks: None,
            };
            let sigma_hist = |sigmas: &[f64]| {
                let (lo, hi) = sigmas.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                Histogram::new(sigmas, lo, hi, if hi > lo { BINS } else { 1 })
            };
            match l {
                Layer::Frac(f) => {
                    let p = f.frac_params();
                    s.nu_x = Some(Histogram::new(p.nu_x.data(), 0.0, nu_max, BINS));
                    s.nu_y = Some(Histogram::new(p.nu_y.data(), 0.0, nu_max, BINS));
                    s.sigma = Some(sigma_hist(&p.sigmas()));
                }
                Layer::Srf(r) => {
                    let sigmas: Vec<f64> = r.srf_params().log2_sigma.data().iter().map(|v| v.exp2()).collect();
                    s.sigma = Some(sigma_hist(&sigmas));
                    let counts = effective_basis_counts(r.alpha(), EFFECTIVE_THRESHOLD)?;
                    s.median_effective_basis = median(counts.into_iter().map(|c| c as f64).collect());
                }
                Layer::Plain(_) => {}
            }
            Ok(s)
        })
        .collect()
}

/// Orders of a FracSRF layer, x and y pooled.
fn layer_orders(l: &Layer) -> Option<Vec<f64>> {
    match l {
        Layer::Frac(f) => {
            let p = f.frac_params();
            Some(p.nu_x.data().iter().chain(p.nu_y.data()).copied().collect())
        }
        _ => None,
    }
}

fn extrema_dump(model: &Model) -> String {
    model
        .params()
        .iter()
        .map(|p| {
            let (lo, hi) = p.tensor.min_max();
            format!("{} [{lo:.4e}, {hi:.4e}]", p.name)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains `model` in place and evaluates it on `test` when given.
///
/// `on_epoch` sees every finished epoch, e.g. for progress output.
pub fn train_model(
    model: &mut Model,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<RunReport> {
    cfg.validate()?;
    if train.num_classes() != model.num_classes() {
        return Err(Error::invalid(format!(
            "model predicts {} classes, data has {}",
            model.num_classes(),
            train.num_classes()
        )));
    }
    if train.image_shape()[0] != model.spec().in_channels() {
        return Err(Error::shape(format!(
            "model expects {} input channels, data has {}",
            model.spec().in_channels(),
            train.image_shape()[0]
        )));
    }
    let (mut opt_default, mut opt_scale) = cfg.optimizers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial_alpha_entropy = mean_alpha_entropy(model)?;
    let initial_orders: Vec<_> = model.layers().iter().map(layer_orders).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    // Positions, within Model::params(), of every SRF layer's alpha.
    let mut srf_alpha_slots = Vec::new();
    let mut offset = 0;
    for l in model.layers() {
        if matches!(l, Layer::Srf(_)) {
            srf_alpha_slots.push(offset);
        }
        offset += l.params().len();
    }
    let use_entropy = cfg.entropy_lambda > 0.0 && !srf_alpha_slots.is_empty();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = train.batch(idx)?;
            let mut tape = Tape::with_conv_precision(cfg.precision);
            let (logits, bound) = model.forward(&mut tape, &images)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let ce_value = tape.value(ce)[0];
            if !ce_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {ce_value} at epoch {epoch}, batch {b}; parameter ranges: {}",
                    extrema_dump(model)
                )));
            }
            let preds = argmax_rows(tape.value(logits), model.num_classes());
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();

            let mut loss = ce;
            if use_entropy {
                for &slot in &srf_alpha_slots {
                    let h = entropy_regularizer(&mut tape, bound[slot])?;
                    let weighted = tape.scale(h, cfg.entropy_lambda);
                    loss = tape.add(loss, weighted)?;
                }
            }
            tape.backward(loss)?;

            let mut defaults = Vec::new();
            let mut scales = Vec::new();
            for (p, &v) in model.params_mut().into_iter().zip(&bound) {
                if !p.tensor.requires_grad() {
                    continue;
                }
                match tape.grad(v) {
                    Some(g) => p.tensor.accumulate_grad(g)?,
                    None => p.tensor.accumulate_grad(&vec![0.0; p.tensor.len()])?,
                }
                match p.group {
                    ParamGroup::Default => defaults.push(&mut p.tensor),
                    ParamGroup::Scale => scales.push(&mut p.tensor),
                }
            }
            sgd_step(&mut defaults, &mut opt_default)?;
            if !scales.is_empty() {
                sgd_step(&mut scales, &mut opt_scale)?;
            }
            model.clip_orders(cfg.nu_max);
            loss_sum += ce_value;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            accuracy: correct as f64 / train.len().max(1) as f64,
            alpha_entropy: mean_alpha_entropy(model)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        epochs.push(stats);
    }

    let test = test.map(|t| evaluate(model, t, cfg.batch_size.max(64), cfg.precision)).transpose()?;
    let mean_seconds_per_epoch = if epochs.is_empty() {
        0.0
    } else {
        epochs.iter().map(|e| e.seconds).sum::<f64>() / epochs.len() as f64
    };
    let mut layers = summarize_layers(model, cfg.nu_max)?;
    for ((s, l), before) in layers.iter_mut().zip(model.layers()).zip(&initial_orders) {
        if let (Some(before), Some(after)) = (before, layer_orders(l)) {
            s.order_ks = Some(ks_two_sample(before, &after));
        }
    }
    Ok(RunReport {
        model: String::new(),
        seed: cfg.seed,
        param_count: model.spec().param_count(),
        config: cfg.clone(),
        initial_alpha_entropy,
        epochs,
        mean_seconds_per_epoch,
        test,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_sinusoids, SinusoidsSpec};
    use crate::model::{ModelKind, ModelSpec};

    fn tiny_data() -> (LabeledImageSet, LabeledImageSet) {
        generate_sinusoids(&SinusoidsSpec::geometric(12, 3, 0.05, 0.35, 8, 4, 5)).unwrap()
    }

    fn tiny_model(kind: ModelKind) -> Model {
        let mut spec = ModelSpec::exp1(kind, 1, 3);
        spec.layers[0].out_channels = 4;
        spec.layers[1].in_channels = 4;
        Model::build(&spec, 1).unwrap()
    }

    #[test]
    fn zero_epochs_still_evaluates() {
        let (train, test) = tiny_data();
        let mut m = tiny_model(ModelKind::FracSrf);
        let before = m.to_checkpoint();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let r = train_model(&mut m, &train, Some(&test), &cfg, |_| {}).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.test.unwrap().confusion.total(), test.len() as u64);
        assert_eq!(m.to_checkpoint(), before);
    }

    #[test]
    fn orders_stay_clipped() {
        let (train, _) = tiny_data();
        let mut m = tiny_model(ModelKind::FracSrf);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, lr: 0.5, nu_max: 3.0, ..Default::default() };
        train_model(&mut m, &train, None, &cfg, |_| {}).unwrap();
        for p in m.params() {
            if p.name.contains(".nu_") {
                assert!(p.tensor.data().iter().all(|v| (0.0..=3.0).contains(v)), "{}", p.name);
            }
        }
    }

    #[test]
    fn fixed_sigma_is_untouched() {
        let (train, _) = tiny_data();
        let mut m = tiny_model(ModelKind::Srf);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        train_model(&mut m, &train, None, &cfg, |_| {}).unwrap();
        for p in m.params() {
            if p.name.ends_with("log2_sigma") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn same_seed_same_report() {
        let (train, test) = tiny_data();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, entropy_lambda: 0.01, ..Default::default() };
        let run = || {
            let mut m = tiny_model(ModelKind::Srf);
            train_model(&mut m, &train, Some(&test), &cfg, |_| {}).unwrap().without_timing()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::new(&[0.0, 0.5, 9.99, 10.0, 12.0, -1.0], 0.0, 10.0, 10);
        assert_eq!(h.edges.len(), 11);
        assert_eq!(h.counts, [3, 0, 0, 0, 0, 0, 0, 0, 0, 3]);
        let flat = Histogram::new(&[1.0, 1.0], 1.0, 1.0, 1);
        assert_eq!(flat.counts, [2]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { entropy_lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
