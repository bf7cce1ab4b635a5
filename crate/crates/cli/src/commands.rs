//! One function per subcommand. Progress goes to stderr, summaries to
//! stdout and artifacts under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use fracsrf::caputo::compare_cf;
use fracsrf::checkpoint::Checkpoint;
use fracsrf::datasets::{generate_sinusoids, load_cifar10, read_sinusoids, subsample, write_sinusoids, LabeledImageSet};
use fracsrf::experiments::{run_experiment_1, run_sweep, Exp1Config, SweepConfig};
use fracsrf::gradcheck::gradcheck;
use fracsrf::layers::{bias_count, param_count, Layer, LayerKind};
use fracsrf::metrics::ConfusionMatrix;
use fracsrf::model::{Model, ModelKind, ModelSpec};
use fracsrf::train::{evaluate, train_model, EpochStats, EvalReport};

use crate::args::{
    CompareCfArgs, CountArgs, EvalArgs, Exp1Args, GenArgs, GradcheckArgs, InspectArgs, SinusoidFlags, SourceFlags,
    SweepArgs, TrainArgs,
};
use crate::error::{CliError, CliResult};
use crate::output::{kernel_csv, kernel_pgm};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(fracsrf::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn progress(label: &str, e: &EpochStats) {
    eprintln!("{label} epoch {:>3}  loss {:.4}  train acc {:.4}  {:.2}s", e.epoch + 1, e.loss, e.accuracy, e.seconds);
}

/// Where a train or eval command got its images from.
#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum DataInfo {
    Sinusoids { spec: fracsrf::datasets::SinusoidsSpec },
    Export { dir: PathBuf, spec: fracsrf::datasets::SinusoidsSpec },
    Cifar10 { dir: PathBuf },
}

/// Train and test sets from `--data`, or freshly generated Sinusoids. The
/// training set is subsampled with `seed` when requested.
fn load_data(
    source: &SourceFlags,
    shape: &SinusoidFlags,
    seed: u64,
) -> CliResult<(LabeledImageSet, LabeledImageSet, DataInfo)> {
    let (train, test, info) = match &source.data {
        Some(dir) if dir.join("meta.json").is_file() => {
            let (spec, train, test) = read_sinusoids(dir)?;
            (train, test, DataInfo::Export { dir: dir.clone(), spec })
        }
        Some(dir) => {
            let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let present: Vec<&Path> = batches.iter().filter(|p| p.is_file()).map(PathBuf::as_path).collect();
            let test_file = dir.join("test_batch.bin");
            if present.is_empty() || !test_file.is_file() {
                return Err(CliError::Usage(format!(
                    "{} holds neither a Sinusoids export (meta.json) nor CIFAR-10 batches",
                    dir.display()
                )));
            }
            let (train, test) = load_cifar10(&present, Some(&test_file))?;
            let test = test.ok_or_else(|| CliError::Usage("missing CIFAR-10 test batch".into()))?;
            (train, test, DataInfo::Cifar10 { dir: dir.clone() })
        }
        None => {
            let spec = shape.spec(source.data_seed.unwrap_or(0));
            let (train, test) = generate_sinusoids(&spec)?;
            (train, test, DataInfo::Sinusoids { spec })
        }
    };
    let train = match source.subsample {
        Some(f) => subsample(&train, f, seed)?,
        None => train,
    };
    Ok((train, test, info))
}

fn confusion_csv(m: &ConfusionMatrix, names: &[String]) -> String {
    m.to_csv(names)
}

fn print_eval(r: &EvalReport) {
    println!(
        "test accuracy {:.4}  macro precision {:.4}  macro recall {:.4}",
        r.accuracy, r.macro_precision, r.macro_recall
    );
    let recalls: Vec<String> = r.per_class_recall.iter().map(|v| format!("{v:.3}")).collect();
    println!("per-class recall [{}]", recalls.join(", "));
}

pub fn gen_sinusoids(mut a: GenArgs) -> CliResult<()> {
    let spec = a.spec()?;
    let (train, test) = generate_sinusoids(&spec)?;
    create_dir(&a.out)?;
    write_sinusoids(&a.out, &spec, &train, &test)?;
    eprintln!("wrote {} train and {} test images to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

pub fn train(mut a: TrainArgs) -> CliResult<()> {
    let file = a.run.resolve()?;
    a.source.fill(&file);
    let (train, test, info) = load_data(&a.source, &a.run.data, a.seed)?;
    let cfg = a.run.train.config(a.seed);
    let mut spec = a.run.model.options().exp1(a.model, &train);
    if a.learn_sigma {
        for l in spec.layers.iter_mut().filter(|l| l.kind != LayerKind::PlainConv) {
            l.learn_sigma = true;
        }
    }
    let mut model = Model::build(&spec, a.seed)?;
    create_dir(&a.out)?;
    let label = a.model.to_string();
    let mut report = train_model(&mut model, &train, Some(&test), &cfg, |e| progress(&label, e))?;
    report.model = label;
    write_json(&a.out.join("model.json"), &spec)?;
    model.to_checkpoint().save(a.out.join("model.ckpt"))?;
    write_json(&a.out.join("data.json"), &info)?;
    write_json(&a.out.join("report.json"), &report)?;
    if let Some(t) = &report.test {
        write_text(&a.out.join("confusion.csv"), &confusion_csv(&t.confusion, &test.class_names))?;
        print_eval(t);
    }
    if let (Some(h0), Some(last)) = (report.initial_alpha_entropy, report.epochs.last()) {
        println!("mean alpha entropy {h0:.4} -> {:.4}", last.alpha_entropy.unwrap_or(h0));
    }
    for l in &report.layers {
        if let Some(m) = l.median_effective_basis {
            println!("{} median effective basis count {m}", l.layer);
        }
        if let Some(ks) = l.order_ks {
            println!("{} order shift (KS) {ks:.4}", l.layer);
        }
    }
    Ok(())
}

/// Model spec named by `--spec`, or `model.json` beside the checkpoint.
fn load_model(checkpoint: &Path, spec: Option<&PathBuf>) -> CliResult<Model> {
    let spec_path = match spec {
        Some(p) => p.clone(),
        None => checkpoint.with_file_name("model.json"),
    };
    let spec: ModelSpec = read_json(&spec_path)?;
    let mut model = Model::build(&spec, 0)?;
    model.load_checkpoint(&Checkpoint::load(checkpoint)?)?;
    Ok(model)
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    seed: Option<u64>,
    data: DataInfo,
    report: EvalReport,
}

pub fn eval(mut a: EvalArgs) -> CliResult<()> {
    a.resolve()?;
    let model = load_model(&a.checkpoint, a.spec.as_ref())?;
    let (_, test, data) = load_data(&SourceFlags { subsample: None, ..a.source.clone() }, &a.data, 0)?;
    let defaults = fracsrf::train::TrainConfig::default();
    let report = evaluate(&model, &test, a.batch_size.unwrap_or(256), a.precision.unwrap_or(defaults.precision))?;
    create_dir(&a.out)?;
    write_text(&a.out.join("confusion.csv"), &confusion_csv(&report.confusion, &test.class_names))?;
    print_eval(&report);
    write_json(&a.out.join("eval.json"), &EvalOutput { checkpoint: a.checkpoint.clone(), seed: a.seed, data, report })
}

fn mean_std(m: &fracsrf::experiments::MeanStd) -> String {
    format!("{:.4} ± {:.4}", m.mean, m.std)
}

pub fn exp1(mut a: Exp1Args) -> CliResult<()> {
    let file = a.run.resolve()?;
    let cfg = Exp1Config {
        data: a.run.data.spec(a.data_seed.or(file.data.seed).unwrap_or(0)),
        train: a.run.train.config(a.seed),
        model: a.run.model.options(),
        seed_count: a.seeds.or(file.seeds).unwrap_or(5),
        base_seed: a.seed,
    };
    let jobs = a.jobs.or(file.jobs).unwrap_or(1);
    create_dir(&a.out)?;
    let report = run_experiment_1(&cfg, jobs, &progress)?;
    write_json(&a.out.join("report.json"), &report)?;

    let classes = cfg.data.num_classes;
    let mut csv = String::from("model,param_count,accuracy_mean,accuracy_std,macro_precision_mean,macro_recall_mean");
    for c in 0..classes {
        csv.push_str(&format!(",recall_{c}_mean,recall_{c}_std"));
    }
    csv.push_str(",seconds_per_epoch_mean\n");
    println!("{:<8} {:>7}  {:<17}  {:<17}  {:<17}  per-class recall", "model", "params", "accuracy", "macro precision", "macro recall");
    for m in &report.models {
        csv.push_str(&format!(
            "{},{},{},{},{},{}",
            m.model, m.param_count, m.test_accuracy.mean, m.test_accuracy.std, m.macro_precision.mean, m.macro_recall.mean
        ));
        for r in &m.per_class_recall {
            csv.push_str(&format!(",{},{}", r.mean, r.std));
        }
        csv.push_str(&format!(",{}\n", m.seconds_per_epoch.mean));
        let recalls: Vec<String> = m.per_class_recall.iter().map(|r| format!("{:.3}", r.mean)).collect();
        println!(
            "{:<8} {:>7}  {}  {}  {}  [{}]",
            m.model,
            m.param_count,
            mean_std(&m.test_accuracy),
            mean_std(&m.macro_precision),
            mean_std(&m.macro_recall),
            recalls.join(", ")
        );
        let names = cfg.data.class_names();
        let mut conf = String::from("true\\predicted");
        for n in &names {
            conf.push_str(&format!(",{n}"));
        }
        conf.push('\n');
        for (n, row) in names.iter().zip(&m.mean_confusion) {
            conf.push_str(n);
            for v in row {
                conf.push_str(&format!(",{v}"));
            }
            conf.push('\n');
        }
        write_text(&a.out.join(format!("confusion_{}.csv", m.model)), &conf)?;
    }
    write_text(&a.out.join("summary.csv"), &csv)
}

pub fn sweep(mut a: SweepArgs) -> CliResult<()> {
    let file = a.run.resolve()?;
    let axis = a.axis(&file)?;
    let cfg = SweepConfig {
        data: a.run.data.spec(a.data_seed.or(file.data.seed).unwrap_or(0)),
        train: a.run.train.config(a.seed),
        model: a.run.model.options(),
        axis,
        seed_count: a.seeds.or(file.seeds).unwrap_or(3),
        base_seed: a.seed,
    };
    let jobs = a.jobs.or(file.jobs).unwrap_or(1);
    create_dir(&a.out)?;
    let report = run_sweep(&cfg, jobs, &progress)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut csv = String::from(
        "label,sigma_init,order_lo,order_hi,kernel_size,accuracy_mean,accuracy_std,seconds_per_epoch_mean,seconds_per_epoch_std,diverged\n",
    );
    println!("{:<18} {:>6}  {:<17}  {:<17}  diverged", cfg.axis.name(), "kernel", "accuracy", "sec/epoch");
    let cell = |m: &Option<fracsrf::experiments::MeanStd>| m.map_or(",".to_string(), |m| format!("{},{}", m.mean, m.std));
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.label,
            r.sigma_init,
            r.order_range.0,
            r.order_range.1,
            r.kernel_size,
            cell(&r.test_accuracy),
            cell(&r.seconds_per_epoch),
            r.diverged.len()
        ));
        let show = |m: &Option<fracsrf::experiments::MeanStd>| m.as_ref().map_or("-".to_string(), mean_std);
        println!(
            "{:<18} {:>6}  {:<17}  {:<17}  {}",
            r.label,
            r.kernel_size,
            show(&r.test_accuracy),
            show(&r.seconds_per_epoch),
            r.diverged.len()
        );
    }
    write_text(&a.out.join("table.csv"), &csv)
}

/// One structured kernel in the inspect index.
#[derive(Debug, Serialize)]
struct KernelEntry {
    layer: String,
    kind: &'static str,
    k: usize,
    c: usize,
    /// Fractional layers only.
    nu_x: Option<f64>,
    nu_y: Option<f64>,
    sigma: f64,
    /// Fractional layers only.
    alpha: Option<f64>,
    /// SRF layers only: weights of the integer-order basis.
    coefficients: Option<Vec<f64>>,
    size: usize,
    pgm: String,
    csv: String,
}

#[derive(Debug, Serialize)]
struct KernelIndex {
    checkpoint: PathBuf,
    seed: Option<u64>,
    kernels: Vec<KernelEntry>,
}

pub fn inspect_kernels(a: InspectArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint, a.spec.as_ref())?;
    create_dir(&a.out)?;
    let mut kernels = Vec::new();
    for layer in model.layers() {
        let bank = match layer {
            Layer::Plain(_) => continue,
            _ => layer.filter_bank()?,
        };
        let (kn, cn, size) = (bank.shape()[0], bank.shape()[1], bank.shape()[2]);
        for k in 0..kn {
            for c in 0..cn {
                let i = k * cn + c;
                let values = &bank.data()[i * size * size..(i + 1) * size * size];
                let stem = format!("{}_k{k:03}_c{c:03}", layer.name());
                let (pgm, csv) = (format!("{stem}.pgm"), format!("{stem}.csv"));
                fs::write(a.out.join(&pgm), kernel_pgm(values, size)).map_err(io_err(&a.out.join(&pgm)))?;
                write_text(&a.out.join(&csv), &kernel_csv(values, size))?;
                let mut e = KernelEntry {
                    layer: layer.name().to_string(),
                    kind: "",
                    k,
                    c,
                    nu_x: None,
                    nu_y: None,
                    sigma: 0.0,
                    alpha: None,
                    coefficients: None,
                    size,
                    pgm,
                    csv,
                };
                match layer {
                    Layer::Frac(f) => {
                        let p = f.frac_params();
                        e.kind = "fracsrf";
                        e.nu_x = Some(p.nu_x.data()[i]);
                        e.nu_y = Some(p.nu_y.data()[i]);
                        e.alpha = Some(p.alpha.data()[i]);
                        e.sigma = p.log2_sigma.data()[k].exp2();
                    }
                    Layer::Srf(s) => {
                        let p = s.srf_params();
                        let n = p.alpha.shape()[2];
                        e.kind = "srf";
                        e.coefficients = Some(p.alpha.data()[i * n..(i + 1) * n].to_vec());
                        e.sigma = p.log2_sigma.data()[k].exp2();
                    }
                    Layer::Plain(_) => unreachable!("plain layers are skipped above"),
                }
                kernels.push(e);
            }
        }
    }
    eprintln!("wrote {} kernels to {}", kernels.len(), a.out.display());
    write_json(&a.out.join("index.json"), &KernelIndex { checkpoint: a.checkpoint.clone(), seed: a.seed, kernels })
}

pub fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<()> {
    let r = gradcheck(a.seed)?;
    println!("{:<18} {:>7}  max rel error", "parameter", "entries");
    for t in &r.tensors {
        println!("{:<18} {:>7}  {:.3e}", t.name, t.entries, t.max_rel_error);
    }
    let verdict = if r.passed() { "pass" } else { "FAIL" };
    println!("overall max {:.3e} (tolerance {:.0e}): {verdict}", r.max_rel_error(), r.tolerance);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &r)?;
    }
    if r.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed { max: r.max_rel_error(), tolerance: r.tolerance })
    }
}

#[derive(Debug, Serialize)]
struct LayerCount {
    kind: LayerKind,
    in_channels: usize,
    out_channels: usize,
    weights: usize,
    biases: usize,
}

#[derive(Debug, Serialize)]
struct ModelCount {
    model: ModelKind,
    total: usize,
    layers: Vec<LayerCount>,
}

#[derive(Debug, Serialize)]
struct NinCount {
    model: ModelKind,
    /// Weights of the layers wider than 1×1.
    spatial_weights: usize,
    /// `spatial_weights` relative to the plain network's.
    ratio_to_plain: f64,
}

#[derive(Debug, Serialize)]
struct ParamReport {
    seed: Option<u64>,
    exp1: Vec<ModelCount>,
    nin: Vec<NinCount>,
}

pub fn count_params(a: CountArgs) -> CliResult<()> {
    let exp1: Vec<ModelCount> = ModelKind::ALL
        .iter()
        .map(|&model| {
            let spec = ModelSpec::exp1(model, a.in_channels, a.classes);
            let layers = spec
                .layers
                .iter()
                .map(|l| LayerCount {
                    kind: l.kind,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    weights: param_count(l),
                    biases: bias_count(l),
                })
                .collect();
            ModelCount { model, total: spec.param_count(), layers }
        })
        .collect();
    let plain = ModelSpec::nin(ModelKind::Cnn, 3, 10).spatial_param_count();
    let nin: Vec<NinCount> = ModelKind::ALL
        .iter()
        .map(|&model| {
            let spatial_weights = ModelSpec::nin(model, 3, 10).spatial_param_count();
            NinCount { model, spatial_weights, ratio_to_plain: spatial_weights as f64 / plain as f64 }
        })
        .collect();
    println!("Exp-1 networks ({} -> 32 -> {}, 5x5)", a.in_channels, a.classes);
    for m in &exp1 {
        let parts: Vec<String> = m.layers.iter().map(|l| format!("{}+{}", l.weights, l.biases)).collect();
        println!("  {:<8} {:>7}  ({})", m.model.as_str(), m.total, parts.join(", "));
    }
    println!("NiN on CIFAR-10, layers wider than 1x1");
    for n in &nin {
        println!("  {:<8} {:>7}  ratio {:.4}", n.model.as_str(), n.spatial_weights, n.ratio_to_plain);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("params.json"), &ParamReport { seed: a.seed, exp1, nin })?;
    }
    Ok(())
}

pub fn compare_cf_cmd(a: CompareCfArgs) -> CliResult<()> {
    let c = compare_cf(a.sigma)?;
    println!("{:>4}  rmse", "nu");
    for r in &c.rows {
        println!("{:>4}  {:.6}", r.nu, r.rmse);
    }
    println!("mean rmse {:.6} (sigma {})", c.mean_rmse, c.sigma);
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_text(out, &c.to_csv())?;
    }
    Ok(())
}
