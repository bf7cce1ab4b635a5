//! Multi-seed experiment drivers on the Sinusoids data: the three-way model
//! comparison, the σ / order initialisation sweeps and the α-entropy study.
//!
//! Runs are independent, so each driver can spread them over `jobs` worker
//! threads. Results are gathered in run order, which makes every report
//! independent of `jobs` apart from its wall-clock fields.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::basis::half_width_from_sigma;
use crate::datasets::{generate_sinusoids, LabeledImageSet, SinusoidsSpec};
use crate::error::{Error, Result};
use crate::layers::{effective_basis_counts, Layer, LayerKind, StructuredInit, Support, EFFECTIVE_THRESHOLD};
use crate::model::{Head, Model, ModelKind, ModelSpec};
use crate::train::{mean_alpha_entropy, train_model, EpochStats, RunReport, TrainConfig};

/// Called with a run label such as `fracsrf/seed3` after every epoch.
pub type Progress<'a> = &'a (dyn Fn(&str, &EpochStats) + Sync);

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Options shared by every model an experiment builds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub head: Head,
    pub init: StructuredInit,
}

impl ModelOptions {
    /// The Exp-1 network of `kind` for `data` with these options applied.
    pub fn exp1(&self, kind: ModelKind, data: &LabeledImageSet) -> ModelSpec {
        let mut spec = ModelSpec::exp1(kind, data.image_shape()[0], data.num_classes());
        spec.head = self.head;
        spec.init = self.init;
        spec
    }
}

/// Seeds `base_seed, base_seed + 1, …`; each seeds both model
/// initialisation and batch shuffling. The data is generated once from
/// `data.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp1Config {
    pub data: SinusoidsSpec,
    pub train: TrainConfig,
    pub model: ModelOptions,
    pub seed_count: usize,
    pub base_seed: u64,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self {
            data: SinusoidsSpec::default(),
            train: TrainConfig::default(),
            model: ModelOptions::default(),
            seed_count: 5,
            base_seed: 0,
        }
    }
}

fn seeds(base: u64, count: usize) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    Ok((0..count as u64).map(|i| base + i).collect())
}

/// Aggregate over the seeds of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub param_count: usize,
    pub test_accuracy: MeanStd,
    pub macro_precision: MeanStd,
    pub macro_recall: MeanStd,
    pub per_class_recall: Vec<MeanStd>,
    /// Train accuracy of the last epoch.
    pub final_train_accuracy: MeanStd,
    pub seconds_per_epoch: MeanStd,
    /// Confusion counts averaged over seeds.
    pub mean_confusion: Vec<Vec<f64>>,
    /// Order shift per run, averaged over the fractional layers.
    pub order_ks: Option<MeanStd>,
}

impl ModelSummary {
    fn of(model: &str, runs: &[&RunReport]) -> Result<Self> {
        let tests = runs
            .iter()
            .map(|r| r.test.as_ref().ok_or_else(|| Error::invalid("run without test metrics")))
            .collect::<Result<Vec<_>>>()?;
        let stat = |f: &dyn Fn(usize) -> f64| MeanStd::of(&(0..runs.len()).map(f).collect::<Vec<_>>());
        let classes = tests.first().map_or(0, |t| t.per_class_recall.len());
        let mut mean_confusion = vec![vec![0.0; classes]; classes];
        for t in &tests {
            for (row, counts) in mean_confusion.iter_mut().zip(&t.confusion.counts) {
                for (m, &c) in row.iter_mut().zip(counts) {
                    *m += c as f64 / tests.len() as f64;
                }
            }
        }
        let ks: Vec<f64> = runs
            .iter()
            .filter_map(|r| {
                let v: Vec<f64> = r.layers.iter().filter_map(|l| l.order_ks).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        Ok(Self {
            model: model.to_string(),
            param_count: runs.first().map_or(0, |r| r.param_count),
            test_accuracy: stat(&|i| tests[i].accuracy),
            macro_precision: stat(&|i| tests[i].macro_precision),
            macro_recall: stat(&|i| tests[i].macro_recall),
            per_class_recall: (0..classes).map(|c| stat(&|i| tests[i].per_class_recall[c])).collect(),
            final_train_accuracy: stat(&|i| runs[i].epochs.last().map_or(0.0, |e| e.accuracy)),
            seconds_per_epoch: stat(&|i| runs[i].mean_seconds_per_epoch),
            mean_confusion,
            order_ks: (!ks.is_empty()).then(|| MeanStd::of(&ks)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Report {
    pub config: Exp1Config,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelSummary>,
    /// Every run, model-major then by seed.
    pub runs: Vec<RunReport>,
}

impl Exp1Report {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == kind.as_str())
    }

    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.runs = r.runs.iter().map(RunReport::without_timing).collect();
        for m in &mut r.models {
            m.seconds_per_epoch = MeanStd { mean: 0.0, std: 0.0 };
        }
        r
    }
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order. The
/// first error wins.
fn run_parallel<I: Sync, T: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::invalid("worker exited without a result"))))
        .collect()
}

/// One training run: build from `spec` with `seed`, train, evaluate.
fn run_one(
    label: &str,
    spec: &ModelSpec,
    seed: u64,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &TrainConfig,
    progress: Progress,
) -> Result<(RunReport, Model)> {
    let mut model = Model::build(spec, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut report = train_model(&mut model, train, Some(test), &cfg, |e| progress(label, e))?;
    report.model = label.split('/').next().unwrap_or(label).to_string();
    Ok((report, model))
}

/// Trains plain CNN, SRF(N=2) and FracSRF on the same data for every seed.
pub fn run_experiment_1(cfg: &Exp1Config, jobs: usize, progress: Progress) -> Result<Exp1Report> {
    let seeds = seeds(cfg.base_seed, cfg.seed_count)?;
    let (train, test) = generate_sinusoids(&cfg.data)?;
    let tasks: Vec<(ModelKind, u64)> =
        ModelKind::ALL.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let runs = run_parallel(&tasks, jobs, |&(kind, seed)| {
        let spec = cfg.model.exp1(kind, &train);
        run_one(&format!("{kind}/seed{seed}"), &spec, seed, &train, &test, &cfg.train, progress).map(|r| r.0)
    })?;
    let models = ModelKind::ALL
        .iter()
        .map(|k| {
            let mine: Vec<&RunReport> = runs.iter().filter(|r| r.model == k.as_str()).collect();
            ModelSummary::of(k.as_str(), &mine)
        })
        .collect::<Result<_>>()?;
    Ok(Exp1Report { config: cfg.clone(), seeds, models, runs })
}

/// Which FracSRF initialisation a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "values")]
pub enum SweepAxis {
    /// Initial σ, trained afterwards, with the support following σ.
    SigmaInit(Vec<f64>),
    /// Range of the uniform order initialisation.
    OrderInit(Vec<(f64, f64)>),
}

impl SweepAxis {
    /// σ ∈ {2⁻², 2⁻¹, 2⁰, 2¹, 2²}.
    pub fn sigma_default() -> Self {
        SweepAxis::SigmaInit((-2..=2).map(|e| 2f64.powi(e)).collect())
    }

    /// Orders drawn from [1, 3], [3, 6] and [6, 10].
    pub fn order_default() -> Self {
        SweepAxis::OrderInit(vec![(1.0, 3.0), (3.0, 6.0), (6.0, 10.0)])
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SigmaInit(_) => "sigma_init",
            SweepAxis::OrderInit(_) => "order_init",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::SigmaInit(v) => v.len(),
            SweepAxis::OrderInit(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub data: SinusoidsSpec,
    pub train: TrainConfig,
    pub model: ModelOptions,
    pub axis: SweepAxis,
    pub seed_count: usize,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            data: SinusoidsSpec::default(),
            train: TrainConfig::default(),
            model: ModelOptions::default(),
            axis: SweepAxis::order_default(),
            seed_count: 3,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub sigma_init: f64,
    pub order_range: (f64, f64),
    /// Side of the initial kernels.
    pub kernel_size: usize,
    /// Over the runs that finished; `None` when every run diverged.
    pub test_accuracy: Option<MeanStd>,
    pub seconds_per_epoch: Option<MeanStd>,
    pub runs: Vec<RunReport>,
    pub diverged: Vec<DivergedRun>,
}

/// A sweep run stopped by a non-finite loss or parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergedRun {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.seconds_per_epoch = row.seconds_per_epoch.map(|_| MeanStd { mean: 0.0, std: 0.0 });
            row.runs = row.runs.iter().map(RunReport::without_timing).collect();
        }
        r
    }
}

/// The Exp-1 FracSRF network with the swept initialisation applied, plus a
/// row label and the initial kernel side.
fn sweep_spec(axis: &SweepAxis, i: usize, base: ModelSpec) -> (ModelSpec, String, usize) {
    let mut spec = base;
    match axis {
        SweepAxis::SigmaInit(v) => {
            spec.init.sigma = v[i];
            for l in &mut spec.layers {
                l.kind = LayerKind::FracSrf { support: Support::FromSigma };
                l.learn_sigma = true;
            }
            (spec, format!("sigma={}", v[i]), 2 * half_width_from_sigma(v[i]) + 1)
        }
        SweepAxis::OrderInit(v) => {
            spec.init.order_range = v[i];
            let side = match spec.layers[0].kind {
                LayerKind::FracSrf { support: Support::Fixed(h) } => 2 * h + 1,
                _ => 2 * half_width_from_sigma(spec.init.sigma) + 1,
            };
            (spec, format!("order=[{},{}]", v[i].0, v[i].1), side)
        }
    }
}

/// Trains the FracSRF network once per axis value and seed. Runs that
/// diverge are listed in their row; any other error aborts the sweep.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize, progress: Progress) -> Result<SweepReport> {
    if cfg.axis.len() == 0 {
        return Err(Error::invalid("a sweep needs at least one value"));
    }
    let seeds = seeds(cfg.base_seed, cfg.seed_count)?;
    let (train, test) = generate_sinusoids(&cfg.data)?;
    let base = cfg.model.exp1(ModelKind::FracSrf, &train);
    let specs: Vec<_> = (0..cfg.axis.len()).map(|i| sweep_spec(&cfg.axis, i, base.clone())).collect();
    for (spec, ..) in &specs {
        spec.validate()?;
    }
    let tasks: Vec<(usize, u64)> = (0..specs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let mut results = run_parallel(&tasks, jobs, |&(i, seed)| {
        let (spec, label, _) = &specs[i];
        match run_one(&format!("fracsrf/{label}/seed{seed}"), spec, seed, &train, &test, &cfg.train, progress) {
            Ok((report, _)) => Ok(Ok(report)),
            Err(Error::NonFinite(message)) => Ok(Err(DivergedRun { seed, message })),
            Err(e) => Err(e),
        }
    })?
    .into_iter();
    let rows = specs
        .into_iter()
        .map(|(spec, label, kernel_size)| {
            let (mut runs, mut diverged) = (Vec::new(), Vec::new());
            for r in results.by_ref().take(seeds.len()) {
                match r {
                    Ok(report) => runs.push(report),
                    Err(d) => diverged.push(d),
                }
            }
            let acc: Vec<f64> = runs.iter().map(|r| r.test.as_ref().map_or(0.0, |t| t.accuracy)).collect();
            let secs: Vec<f64> = runs.iter().map(|r| r.mean_seconds_per_epoch).collect();
            SweepRow {
                label,
                sigma_init: spec.init.sigma,
                order_range: spec.init.order_range,
                kernel_size,
                test_accuracy: (!runs.is_empty()).then(|| MeanStd::of(&acc)),
                seconds_per_epoch: (!runs.is_empty()).then(|| MeanStd::of(&secs)),
                runs,
                diverged,
            }
        })
        .collect();
    Ok(SweepReport { config: cfg.clone(), seeds, rows })
}

/// SRF(N=2) trained with and without the α-entropy penalty from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub data: SinusoidsSpec,
    /// `entropy_lambda` here is ignored; see `lambda`.
    pub train: TrainConfig,
    pub model: ModelOptions,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            data: SinusoidsSpec::default(),
            train: TrainConfig::default(),
            model: ModelOptions::default(),
            // Largest tried value that collapses the bases without costing
            // accuracy on the default Sinusoids; 0.05 already drops ~9 points.
            lambda: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub config: EntropyConfig,
    /// Mean per-kernel α entropy before and after the penalised run.
    pub initial_entropy: f64,
    pub final_entropy: f64,
    /// Median over every SRF kernel of the penalised model of the number of
    /// basis functions whose normalised |α| exceeds the effective threshold.
    pub median_effective_basis: f64,
    pub effective_threshold: f64,
    pub baseline_accuracy: f64,
    pub regularized_accuracy: f64,
    pub baseline: RunReport,
    pub regularized: RunReport,
}

impl EntropyReport {
    pub fn without_timing(&self) -> Self {
        Self {
            baseline: self.baseline.without_timing(),
            regularized: self.regularized.without_timing(),
            ..self.clone()
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[m],
        _ => 0.5 * (v[m - 1] + v[m]),
    }
}

pub fn run_entropy_study(cfg: &EntropyConfig, jobs: usize, progress: Progress) -> Result<EntropyReport> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::invalid(format!("entropy lambda must be positive, got {}", cfg.lambda)));
    }
    let (train, test) = generate_sinusoids(&cfg.data)?;
    let spec = cfg.model.exp1(ModelKind::Srf, &train);
    let lambdas = [0.0, cfg.lambda];
    let mut out = run_parallel(&lambdas, jobs, |&lambda| {
        let train_cfg = TrainConfig { entropy_lambda: lambda, ..cfg.train.clone() };
        let label = format!("srf/lambda{lambda}/seed{}", cfg.seed);
        run_one(&label, &spec, cfg.seed, &train, &test, &train_cfg, progress)
    })?;
    let (regularized, model) = out.pop().ok_or_else(|| Error::invalid("missing regularized run"))?;
    let (baseline, _) = out.pop().ok_or_else(|| Error::invalid("missing baseline run"))?;
    let mut counts = Vec::new();
    for l in model.layers() {
        if let Layer::Srf(s) = l {
            counts.extend(effective_basis_counts(s.alpha(), EFFECTIVE_THRESHOLD)?.into_iter().map(|c| c as f64));
        }
    }
    let accuracy = |r: &RunReport| r.test.as_ref().map_or(0.0, |t| t.accuracy);
    Ok(EntropyReport {
        config: cfg.clone(),
        initial_entropy: regularized.initial_alpha_entropy.unwrap_or(0.0),
        final_entropy: mean_alpha_entropy(&model)?.unwrap_or(0.0),
        median_effective_basis: median(counts),
        effective_threshold: EFFECTIVE_THRESHOLD,
        baseline_accuracy: accuracy(&baseline),
        regularized_accuracy: accuracy(&regularized),
        baseline,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(_: &str, _: &EpochStats) {}

    fn tiny_data() -> SinusoidsSpec {
        SinusoidsSpec::geometric(8, 3, 0.05, 0.35, 4, 2, 3)
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 8, ..Default::default() }
    }

    #[test]
    fn mean_std_sample() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[7.0]), MeanStd { mean: 7.0, std: 0.0 });
    }

    #[test]
    fn exp1_has_three_models_per_seed() {
        let cfg = Exp1Config { data: tiny_data(), train: tiny_train(), seed_count: 2, ..Default::default() };
        let r = run_experiment_1(&cfg, 1, &quiet).unwrap();
        assert_eq!(r.runs.len(), 6);
        assert_eq!(r.models.len(), 3);
        for m in &r.models {
            let total: f64 = m.mean_confusion.iter().flatten().sum();
            assert!((total - 6.0).abs() < 1e-12);
        }
        assert!(r.model(ModelKind::FracSrf).unwrap().order_ks.is_some());
        assert!(r.model(ModelKind::Cnn).unwrap().order_ks.is_none());
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = Exp1Config { data: tiny_data(), train: tiny_train(), seed_count: 2, ..Default::default() };
        let a = run_experiment_1(&cfg, 1, &quiet).unwrap();
        let b = run_experiment_1(&cfg, 3, &quiet).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
    }

    #[test]
    fn sigma_sweep_rows() {
        let cfg = SweepConfig {
            data: tiny_data(),
            train: tiny_train(),
            axis: SweepAxis::sigma_default(),
            seed_count: 1,
            ..Default::default()
        };
        let r = run_sweep(&cfg, 1, &quiet).unwrap();
        let sizes: Vec<usize> = r.rows.iter().map(|r| r.kernel_size).collect();
        assert_eq!(sizes, [3, 3, 5, 9, 17]);
        for row in &r.rows {
            assert_eq!(row.runs.len() + row.diverged.len(), 1);
            assert_eq!(row.test_accuracy.is_some(), row.runs.len() == 1);
        }
        // Raw derivative magnitudes grow like σ^-(ν+1), so the smallest
        // scale blows up on the first step.
        assert_eq!(r.rows[0].diverged.len(), 1);
    }

    #[test]
    fn order_sweep_rows() {
        let cfg = SweepConfig { data: tiny_data(), train: tiny_train(), seed_count: 2, ..Default::default() };
        let r = run_sweep(&cfg, 2, &quiet).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[2].order_range, (6.0, 10.0));
        assert!(r.rows.iter().all(|row| row.kernel_size == 5 && row.runs.len() == 2));
    }

    #[test]
    fn entropy_study_runs_both_arms() {
        let cfg = EntropyConfig { data: tiny_data(), train: tiny_train(), ..Default::default() };
        let r = run_entropy_study(&cfg, 1, &quiet).unwrap();
        assert_eq!(r.baseline.config.entropy_lambda, 0.0);
        assert_eq!(r.regularized.config.entropy_lambda, 0.01);
        assert!(r.median_effective_basis >= 1.0 && r.median_effective_basis <= 9.0);
        assert!(run_entropy_study(&EntropyConfig { lambda: 0.0, ..cfg }, 1, &quiet).is_err());
    }

    #[test]
    fn rejects_zero_seeds() {
        let cfg = Exp1Config { data: tiny_data(), train: tiny_train(), seed_count: 0, ..Default::default() };
        assert!(run_experiment_1(&cfg, 1, &quiet).is_err());
    }
}
